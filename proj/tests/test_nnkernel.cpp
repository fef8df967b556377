#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "featrl/nnkernel.hpp"
#include "gradcheck.hpp"

using namespace featrl;
using namespace featrl::nn;
using featrl::testing::check_gradients;
using featrl::testing::check_layer;
using featrl::testing::random_matrix;
using featrl::testing::weighted_sum;

namespace {
constexpr double kTol = 1e-4;
}

TEST(Matrix, ProductsAgree) {
    std::mt19937_64 rng(1);
    Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng), c = random_matrix(5, 4, rng);
    Matrix ab = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
            EXPECT_NEAR(ab(i, j), s, 1e-12);
        }
    Matrix atc = matmul_tn(a, random_matrix(3, 2, rng));
    EXPECT_EQ(atc.rows, 4u);
    Matrix act = matmul_nt(a, c);
    EXPECT_EQ(act.rows, 3u);
    EXPECT_EQ(act.cols, 5u);
    EXPECT_NEAR(act(1, 2), [&] {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a(1, k) * c(2, k);
        return s;
    }(), 1e-12);
    EXPECT_THROW(matmul(a, a), ConfigError);
}

TEST(LayerNorm, Examples) {
    LayerNorm ln(2);
    Matrix y = ln.forward(Matrix::from_rows({{1, 3}}));
    const double s = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(y(0, 0), -s, 1e-15);
    EXPECT_NEAR(y(0, 1), s, 1e-15);
    LayerNorm ln4(4);
    Matrix z = ln4.forward(Matrix::from_rows({{2, 2, 2, 2}}));
    for (double v : z.data) EXPECT_EQ(v, 0.0);
    std::mt19937_64 rng(2);
    Matrix r = ln4.forward(random_matrix(6, 4, rng, 5.0));
    for (std::size_t i = 0; i < r.rows; ++i) {
        double m = 0, v = 0;
        for (double x : r.row(i)) m += x;
        m /= 4;
        for (double x : r.row(i)) v += (x - m) * (x - m);
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v / 4, 1.0, 1e-3);
    }
}

TEST(Attention, DivisibilityChecked) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(MultiHeadAttention(6, 4, rng), ConfigError);
    EXPECT_NO_THROW(MultiHeadAttention(8, 8, rng));
}

TEST(Attention, SingleToken) {
    std::mt19937_64 rng(4);
    MultiHeadAttention mha(4, 2, rng);
    Matrix x = random_matrix(1, 4, rng);
    for (const auto& w : mha.attention_weights(x)) {
        ASSERT_EQ(w.rows, 1u);
        EXPECT_EQ(w(0, 0), 1.0);
    }
    Matrix expect = matmul(matmul(x, mha.wv().weight().value), mha.wo().weight().value);
    Matrix got = mha.forward(x);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got.data[i], expect.data[i], 1e-12);
}

TEST(Attention, HandComputedTwoTokens) {
    // one head, d_model = 2, identity Q/K/O and V = 2*I
    std::mt19937_64 rng(5);
    MultiHeadAttention mha(2, 1, rng);
    auto set = [](Linear& l, Matrix m) { l.weight().value = std::move(m); };
    set(mha.wq(), Matrix::from_rows({{1, 0}, {0, 1}}));
    set(mha.wk(), Matrix::from_rows({{1, 0}, {0, 1}}));
    set(mha.wv(), Matrix::from_rows({{2, 0}, {0, 2}}));
    set(mha.wo(), Matrix::from_rows({{1, 0}, {0, 1}}));
    Matrix x = Matrix::from_rows({{1, 0}, {0, 1}});
    // scores = x x^T / sqrt(2) = [[s, 0], [0, s]] with s = 1/sqrt(2)
    const double s = 1 / std::sqrt(2.0);
    const double p = std::exp(s) / (std::exp(s) + 1);
    Matrix y = mha.forward(x);
    EXPECT_NEAR(y(0, 0), 2 * p, 1e-12);
    EXPECT_NEAR(y(0, 1), 2 * (1 - p), 1e-12);
    EXPECT_NEAR(y(1, 0), 2 * (1 - p), 1e-12);
    EXPECT_NEAR(y(1, 1), 2 * p, 1e-12);
}

TEST(AttentionProperty, RowsSumToOneAndEquivariant) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = 1 + rng() % 7;
        MultiHeadAttention mha(8, 1u << (rng() % 4), rng);
        Matrix x = random_matrix(t, 8, rng, 3.0);
        for (const auto& w : mha.attention_weights(x))
            for (std::size_t i = 0; i < t; ++i) {
                double sum = 0;
                for (double v : w.row(i)) sum += v;
                EXPECT_NEAR(sum, 1.0, 1e-9);
            }
        std::vector<std::size_t> perm(t);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix px(t, 8);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < 8; ++c) px(i, c) = x(perm[i], c);
        Matrix y = mha.forward(x), py = mha.forward(px);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(py(i, c), y(perm[i], c));
    }
}

TEST(Mlp, ZeroWeightsGiveBias) {
    std::mt19937_64 rng(7);
    Mlp m(3, 5, {2}, rng);
    m.hidden_layer().weight().value.fill(0);
    m.head(0).weight().value.fill(0);
    m.head(0).bias().value = Matrix::from_rows({{0.25, -1.5}});
    auto q = m.forward(std::vector<double>{1, 2, 3}, 0);
    EXPECT_EQ(q, (std::vector<double>{0.25, -1.5}));
}

TEST(Mlp, IdentityNetworkIsRelu) {
    std::mt19937_64 rng(8);
    Mlp m(1, 1, {1}, rng);
    m.hidden_layer().weight().value(0, 0) = 1;
    m.hidden_layer().bias().value(0, 0) = 0;
    m.head(0).weight().value(0, 0) = 1;
    m.head(0).bias().value(0, 0) = 0;
    for (double x : {-2.0, -0.1, 0.0, 0.7, 3.0}) EXPECT_EQ(m.forward(std::vector<double>{x}, 0)[0], std::max(0.0, x));
    EXPECT_THROW(m.forward(std::vector<double>{1.0}, 1), ConfigError);
    EXPECT_THROW(m.forward(std::vector<double>{1.0, 2.0}, 0), ConfigError);
}

TEST(GradCheck, Linear) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Linear l(4, 3, trial % 2 == 0, rng);
        Matrix x = random_matrix(5, 4, rng);
        Matrix w = random_matrix(5, 3, rng);
        ParamList ps;
        l.collect(ps, "l");
        auto rep = check_gradients(ps, x, [&] { return weighted_sum(l.forward(x), w); },
                                   [&] { return l.backward(x, w); });
        EXPECT_LT(rep.worst, kTol) << rep.where;
    }
}

TEST(GradCheck, LayerNorm) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        LayerNorm ln(6);
        ParamList ps;
        ln.collect(ps, "ln");
        for (auto& p : ps) p.param->value = random_matrix(1, 6, rng);
        auto rep = check_layer(ln, 3, 6, rng);
        EXPECT_LT(rep.worst, kTol) << rep.where;
    }
}

TEST(GradCheck, AttentionFeedForwardBlock) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        MultiHeadAttention mha(8, 2, rng);
        auto r1 = check_layer(mha, 4, 8, rng);
        EXPECT_LT(r1.worst, kTol) << r1.where;
        FeedForward ffn(8, 16, rng);
        auto r2 = check_layer(ffn, 4, 8, rng);
        EXPECT_LT(r2.worst, kTol) << r2.where;
        EncoderBlock block(8, 8, 16, rng);
        auto r3 = check_layer(block, 5, 8, rng);
        EXPECT_LT(r3.worst, kTol) << r3.where;
    }
}

TEST(GradCheck, MlpHeads) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        Mlp m(6, 12, {11, 2}, rng);
        const std::size_t head = static_cast<std::size_t>(trial % 2);
        Matrix x = random_matrix(3, 6, rng);
        Matrix w = random_matrix(3, m.head_size(head), rng);
        ParamList ps;
        m.collect(ps, "m");
        auto rep = check_gradients(ps, x, [&] { return weighted_sum(m.forward(x, head), w); },
                                   [&] {
                                       Mlp::Cache c;
                                       m.forward(x, head, &c);
                                       return m.backward(c, head, w);
                                   });
        EXPECT_LT(rep.worst, kTol) << rep.where;
    }
}

TEST(Adam, ZeroGradientLeavesParams) {
    Param p(2, 2, 0.5);
    ParamList ps{{"p", &p}};
    Adam opt;
    opt.step(ps);
    for (double v : p.value.data) EXPECT_EQ(v, 0.5);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
    Param p(1, 3, 1.0);
    p.grad = Matrix::from_rows({{2.0, -0.3, 1e3}});
    ParamList ps{{"p", &p}};
    Adam opt;
    opt.step(ps);
    // m_hat = g, v_hat = g^2  ->  update = lr * g / (|g| + eps)
    const double lr = 1e-4, eps = 1e-8;
    EXPECT_NEAR(p.value(0, 0), 1 - lr * 2.0 / (2.0 + eps), 1e-15);
    EXPECT_NEAR(p.value(0, 1), 1 + lr * 0.3 / (0.3 + eps), 1e-15);
    EXPECT_NEAR(p.value(0, 2), 1 - lr, 1e-12);
}

TEST(Adam, IdenticalParamsStayIdentical) {
    std::mt19937_64 rng(13);
    Param a(3, 3), b(3, 3);
    a.value = b.value = random_matrix(3, 3, rng);
    ParamList ps{{"a", &a}, {"b", &b}};
    Adam opt;
    for (int s = 0; s < 20; ++s) {
        Matrix g = random_matrix(3, 3, rng);
        a.grad = g;
        b.grad = g;
        opt.step(ps);
    }
    EXPECT_EQ(a.value.data, b.value.data);
}

TEST(Checkpoint, RoundTripBitExact) {
    std::mt19937_64 rng(14);
    EncoderBlock a(8, 2, 16, rng), b(8, 2, 16, rng);
    ParamList pa, pb;
    a.collect(pa, "block");
    b.collect(pb, "block");
    std::stringstream ss;
    save_params(ss, pa);
    EXPECT_EQ(ss.str().rfind("featrl-checkpoint 1\n", 0), 0u);
    load_params(ss, pb);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].param->value.data, pb[i].param->value.data);
    Matrix x = random_matrix(3, 8, rng);
    EXPECT_EQ(a.forward(x).data, b.forward(x).data);
}

TEST(Checkpoint, RejectsMismatch) {
    std::mt19937_64 rng(15);
    Linear a(2, 2, true, rng), b(3, 2, true, rng);
    ParamList pa, pb;
    a.collect(pa, "l");
    b.collect(pb, "l");
    std::stringstream ss;
    save_params(ss, pa);
    EXPECT_THROW(load_params(ss, pb), SchemaError);
    std::stringstream bad("not-a-checkpoint 1\n");
    EXPECT_THROW(load_params(bad, pa), SchemaError);
}

TEST(Init, GlorotBounds) {
    std::mt19937_64 rng(16);
    Linear l(10, 30, true, rng);
    const double a = std::sqrt(6.0 / 40.0);
    double mx = 0;
    for (double v : l.weight().value.data) {
        EXPECT_LE(std::abs(v), a);
        mx = std::max(mx, std::abs(v));
    }
    EXPECT_GT(mx, 0.8 * a);
    for (double v : l.bias().value.data) EXPECT_EQ(v, 0.0);
}
