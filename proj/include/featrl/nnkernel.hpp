#pragma once

// Small dense neural-network kernel in double precision: linear layers,
// layer normalization, multi-head self-attention, feed-forward block, ReLU
// MLP with several output heads, hand-written backward passes and Adam.
//
// Forward passes are const and take an optional cache; backward passes read
// that cache and accumulate into Param::grad.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <numeric>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "featrl/error.hpp"

namespace featrl::nn {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> init) {
        Matrix m(init.size(), init.size() ? init.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& r : init) {
            if (r.size() != m.cols) throw ConfigError("Matrix::from_rows: ragged rows");
            std::copy(r.begin(), r.end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
            ++i;
        }
        return m;
    }

    static Matrix row_vector(std::span<const double> v) {
        Matrix m(1, v.size());
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ConfigError("matmul: shape mismatch");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = a(i, k);
            if (av == 0) continue;
            const double* br = &b.data[k * b.cols];
            double* orow = &out.data[i * out.cols];
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += av * br[j];
        }
    return out;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw ConfigError("matmul_tn: shape mismatch");
    Matrix out(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k)
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double av = a(k, i);
            if (av == 0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += av * b(k, j);
        }
    return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw ConfigError("matmul_nt: shape mismatch");
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ConfigError("add: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ConfigError("add: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// Numerically stable row-wise softmax.
inline void softmax_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        auto row = m.row(r);
        double mx = *std::max_element(row.begin(), row.end());
        double sum = 0;
        for (double& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Parameters

struct Param {
    Matrix value;
    Matrix grad;

    Param() = default;
    Param(std::size_t r, std::size_t c, double fill = 0.0) : value(r, c, fill), grad(r, c) {}

    void zero_grad() { grad.fill(0.0); }
};

struct NamedParam {
    std::string name;
    Param* param;
};

using ParamList = std::vector<NamedParam>;

inline void zero_grads(const ParamList& ps) {
    for (const auto& p : ps) p.param->zero_grad();
}

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (double& v : m.data) v = dist(rng);
}

// ---------------------------------------------------------------------------
// Layers

class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool bias, std::mt19937_64& rng)
        : weight_(in, out), bias_(1, out), has_bias_(bias) {
        glorot_uniform(weight_.value, in, out, rng);
    }

    std::size_t in_features() const { return weight_.value.rows; }
    std::size_t out_features() const { return weight_.value.cols; }

    Matrix forward(const Matrix& x) const {
        if (x.cols != in_features()) throw ConfigError("Linear: input width mismatch");
        Matrix y = matmul(x, weight_.value);
        if (has_bias_)
            for (std::size_t r = 0; r < y.rows; ++r)
                for (std::size_t c = 0; c < y.cols; ++c) y(r, c) += bias_.value(0, c);
        return y;
    }

    // Accumulates parameter gradients, returns d loss / d x.
    Matrix backward(const Matrix& x, const Matrix& dy) {
        add_inplace(weight_.grad, matmul_tn(x, dy));
        if (has_bias_)
            for (std::size_t r = 0; r < dy.rows; ++r)
                for (std::size_t c = 0; c < dy.cols; ++c) bias_.grad(0, c) += dy(r, c);
        return matmul_nt(dy, weight_.value);
    }

    void collect(ParamList& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &weight_});
        if (has_bias_) out.push_back({prefix + ".bias", &bias_});
    }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }
    const Param& weight() const { return weight_; }
    const Param& bias() const { return bias_; }

private:
    Param weight_;
    Param bias_;
    bool has_bias_ = true;
};

inline constexpr double kLayerNormEps = 1e-5;

class LayerNorm {
public:
    struct Cache {
        Matrix xhat;
        std::vector<double> inv_std;
    };

    LayerNorm() = default;
    explicit LayerNorm(std::size_t width) : gain_(1, width, 1.0), bias_(1, width, 0.0) {}

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        const std::size_t d = x.cols;
        if (d != gain_.value.cols) throw ConfigError("LayerNorm: width mismatch");
        Matrix y(x.rows, d);
        Matrix xhat(x.rows, d);
        std::vector<double> inv(x.rows);
        for (std::size_t r = 0; r < x.rows; ++r) {
            double mean = 0;
            for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
            mean /= static_cast<double>(d);
            double var = 0;
            for (std::size_t c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
            var /= static_cast<double>(d);
            inv[r] = 1.0 / std::sqrt(var + kLayerNormEps);
            for (std::size_t c = 0; c < d; ++c) {
                xhat(r, c) = (x(r, c) - mean) * inv[r];
                y(r, c) = xhat(r, c) * gain_.value(0, c) + bias_.value(0, c);
            }
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_std = std::move(inv);
        }
        return y;
    }

    Matrix backward(const Cache& cache, const Matrix& dy) {
        const std::size_t d = dy.cols;
        const double dd = static_cast<double>(d);
        Matrix dx(dy.rows, d);
        for (std::size_t r = 0; r < dy.rows; ++r) {
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t c = 0; c < d; ++c) {
                double dxhat = dy(r, c) * gain_.value(0, c);
                gain_.grad(0, c) += dy(r, c) * cache.xhat(r, c);
                bias_.grad(0, c) += dy(r, c);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.xhat(r, c);
            }
            for (std::size_t c = 0; c < d; ++c) {
                double dxhat = dy(r, c) * gain_.value(0, c);
                dx(r, c) = cache.inv_std[r] / dd * (dd * dxhat - sum_dxhat - cache.xhat(r, c) * sum_dxhat_xhat);
            }
        }
        return dx;
    }

    void collect(ParamList& out, const std::string& prefix) {
        out.push_back({prefix + ".gain", &gain_});
        out.push_back({prefix + ".bias", &bias_});
    }

    Param& gain() { return gain_; }
    Param& bias() { return bias_; }

private:
    Param gain_;
    Param bias_;
};

// Scaled dot-product self-attention over token rows, split into heads of
// width d_model / heads, concatenated and output-projected. No positional
// term: permuting the input rows permutes the output rows.
class MultiHeadAttention {
public:
    struct Cache {
        Matrix x, q, k, v, concat;
        std::vector<Matrix> weights; // per head, tokens x tokens
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t d_model, std::size_t heads, std::mt19937_64& rng) : heads_(heads) {
        if (heads == 0 || d_model % heads != 0)
            throw ConfigError("attention: d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        wq_ = Linear(d_model, d_model, false, rng);
        wk_ = Linear(d_model, d_model, false, rng);
        wv_ = Linear(d_model, d_model, false, rng);
        wo_ = Linear(d_model, d_model, false, rng);
    }

    std::size_t heads() const { return heads_; }
    std::size_t d_model() const { return wq_.in_features(); }

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        const std::size_t t = x.rows;
        const std::size_t d = d_model();
        const std::size_t dk = d / heads_;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        Matrix q = wq_.forward(x), k = wk_.forward(x), v = wv_.forward(x);
        Matrix concat(t, d);
        // Sums over keys run in canonical token order (rows sorted by value).
        std::vector<std::size_t> order(t);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            auto ra = x.row(a), rb = x.row(b);
            return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
        });
        std::vector<Matrix> weights;
        weights.reserve(heads_);
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t off = h * dk;
            Matrix s(t, t);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < t; ++j) {
                    double acc = 0;
                    for (std::size_t c = 0; c < dk; ++c) acc += q(i, off + c) * k(j, off + c);
                    s(i, j) = acc * scale;
                }
            for (std::size_t i = 0; i < t; ++i) {
                auto row = s.row(i);
                const double mx = *std::max_element(row.begin(), row.end());
                double sum = 0;
                for (double& e : row) e = std::exp(e - mx);
                for (std::size_t j : order) sum += row[j];
                for (double& e : row) e /= sum;
            }
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j : order) {
                    const double a = s(i, j);
                    for (std::size_t c = 0; c < dk; ++c) concat(i, off + c) += a * v(j, off + c);
                }
            weights.push_back(std::move(s));
        }
        Matrix y = wo_.forward(concat);
        if (cache) {
            cache->x = x;
            cache->q = std::move(q);
            cache->k = std::move(k);
            cache->v = std::move(v);
            cache->concat = std::move(concat);
            cache->weights = std::move(weights);
        }
        return y;
    }

    // Per-head attention weight matrices (rows sum to one).
    std::vector<Matrix> attention_weights(const Matrix& x) const {
        Cache c;
        forward(x, &c);
        return c.weights;
    }

    Matrix backward(const Cache& c, const Matrix& dy) {
        const std::size_t t = c.x.rows;
        const std::size_t d = d_model();
        const std::size_t dk = d / heads_;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        Matrix dconcat = wo_.backward(c.concat, dy);
        Matrix dq(t, d), dk_m(t, d), dv(t, d);
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t off = h * dk;
            const Matrix& a = c.weights[h];
            Matrix da(t, t);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < t; ++j) {
                    double acc = 0;
                    for (std::size_t col = 0; col < dk; ++col) {
                        acc += dconcat(i, off + col) * c.v(j, off + col);
                        dv(j, off + col) += a(i, j) * dconcat(i, off + col);
                    }
                    da(i, j) = acc;
                }
            for (std::size_t i = 0; i < t; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < t; ++j) dot += da(i, j) * a(i, j);
                for (std::size_t j = 0; j < t; ++j) {
                    const double ds = a(i, j) * (da(i, j) - dot) * scale;
                    for (std::size_t col = 0; col < dk; ++col) {
                        dq(i, off + col) += ds * c.k(j, off + col);
                        dk_m(j, off + col) += ds * c.q(i, off + col);
                    }
                }
            }
        }
        Matrix dx = wq_.backward(c.x, dq);
        add_inplace(dx, wk_.backward(c.x, dk_m));
        add_inplace(dx, wv_.backward(c.x, dv));
        return dx;
    }

    void collect(ParamList& out, const std::string& prefix) {
        wq_.collect(out, prefix + ".wq");
        wk_.collect(out, prefix + ".wk");
        wv_.collect(out, prefix + ".wv");
        wo_.collect(out, prefix + ".wo");
    }

    Linear& wq() { return wq_; }
    Linear& wk() { return wk_; }
    Linear& wv() { return wv_; }
    Linear& wo() { return wo_; }

private:
    std::size_t heads_ = 1;
    Linear wq_, wk_, wv_, wo_;
};

inline Matrix relu(const Matrix& x) {
    Matrix y = x;
    for (double& v : y.data) v = v > 0 ? v : 0;
    return y;
}

inline Matrix relu_backward(const Matrix& pre, const Matrix& dy) {
    Matrix dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
        if (pre.data[i] <= 0) dx.data[i] = 0;
    return dx;
}

// Position-wise affine -> ReLU -> affine.
class FeedForward {
public:
    struct Cache {
        Matrix x, pre, hidden;
    };

    FeedForward() = default;
    FeedForward(std::size_t d_model, std::size_t hidden, std::mt19937_64& rng)
        : l1_(d_model, hidden, true, rng), l2_(hidden, d_model, true, rng) {}

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        Matrix pre = l1_.forward(x);
        Matrix h = relu(pre);
        Matrix y = l2_.forward(h);
        if (cache) {
            cache->x = x;
            cache->pre = std::move(pre);
            cache->hidden = std::move(h);
        }
        return y;
    }

    Matrix backward(const Cache& c, const Matrix& dy) {
        Matrix dh = l2_.backward(c.hidden, dy);
        return l1_.backward(c.x, relu_backward(c.pre, dh));
    }

    void collect(ParamList& out, const std::string& prefix) {
        l1_.collect(out, prefix + ".l1");
        l2_.collect(out, prefix + ".l2");
    }

private:
    Linear l1_, l2_;
};

// attention -> add & norm -> feed-forward -> add & norm
class EncoderBlock {
public:
    struct Cache {
        MultiHeadAttention::Cache attn;
        LayerNorm::Cache ln1;
        FeedForward::Cache ffn;
        LayerNorm::Cache ln2;
    };

    EncoderBlock() = default;
    EncoderBlock(std::size_t d_model, std::size_t heads, std::size_t hidden, std::mt19937_64& rng)
        : attn_(d_model, heads, rng), ln1_(d_model), ffn_(d_model, hidden, rng), ln2_(d_model) {}

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        Matrix h1 = ln1_.forward(add(x, attn_.forward(x, cache ? &cache->attn : nullptr)), cache ? &cache->ln1 : nullptr);
        return ln2_.forward(add(h1, ffn_.forward(h1, cache ? &cache->ffn : nullptr)), cache ? &cache->ln2 : nullptr);
    }

    Matrix backward(const Cache& c, const Matrix& dy) {
        Matrix dh2 = ln2_.backward(c.ln2, dy);
        Matrix dh1 = add(dh2, ffn_.backward(c.ffn, dh2));
        Matrix dx1 = ln1_.backward(c.ln1, dh1);
        return add(dx1, attn_.backward(c.attn, dx1));
    }

    void collect(ParamList& out, const std::string& prefix) {
        attn_.collect(out, prefix + ".attn");
        ln1_.collect(out, prefix + ".ln1");
        ffn_.collect(out, prefix + ".ffn");
        ln2_.collect(out, prefix + ".ln2");
    }

    const MultiHeadAttention& attention() const { return attn_; }

private:
    MultiHeadAttention attn_;
    LayerNorm ln1_;
    FeedForward ffn_;
    LayerNorm ln2_;
};

// affine -> ReLU -> one of several affine output heads.
class Mlp {
public:
    struct Cache {
        Matrix x, pre, hidden;
    };

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::vector<std::size_t> head_sizes, std::mt19937_64& rng)
        : hidden_(in, hidden, true, rng) {
        for (std::size_t s : head_sizes) heads_.emplace_back(hidden, s, true, rng);
    }

    std::size_t in_features() const { return hidden_.in_features(); }
    std::size_t head_count() const { return heads_.size(); }
    std::size_t head_size(std::size_t h) const { return heads_.at(h).out_features(); }

    Matrix forward(const Matrix& x, std::size_t head, Cache* cache = nullptr) const {
        if (head >= heads_.size()) throw ConfigError("Mlp: head index out of range");
        Matrix pre = hidden_.forward(x);
        Matrix h = relu(pre);
        Matrix y = heads_[head].forward(h);
        if (cache) {
            cache->x = x;
            cache->pre = std::move(pre);
            cache->hidden = std::move(h);
        }
        return y;
    }

    std::vector<double> forward(std::span<const double> x, std::size_t head) const {
        return forward(Matrix::row_vector(x), head).data;
    }

    Matrix backward(const Cache& c, std::size_t head, const Matrix& dy) {
        Matrix dh = heads_.at(head).backward(c.hidden, dy);
        return hidden_.backward(c.x, relu_backward(c.pre, dh));
    }

    void collect(ParamList& out, const std::string& prefix) {
        hidden_.collect(out, prefix + ".hidden");
        for (std::size_t h = 0; h < heads_.size(); ++h) heads_[h].collect(out, prefix + ".head" + std::to_string(h));
    }

    Linear& hidden_layer() { return hidden_; }
    Linear& head(std::size_t h) { return heads_.at(h); }

private:
    Linear hidden_;
    std::vector<Linear> heads_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return t_; }

    // One bias-corrected update of every parameter from its accumulated grad.
    void step(const ParamList& params) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.param->value.rows, p.param->value.cols);
                v_.emplace_back(p.param->value.rows, p.param->value.cols);
            }
        }
        if (m_.size() != params.size()) throw ConfigError("Adam: parameter list changed between steps");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param& p = *params[i].param;
            if (!p.value.same_shape(m_[i])) throw ConfigError("Adam: shape mismatch for '" + params[i].name + "'");
            for (std::size_t j = 0; j < p.value.data.size(); ++j) {
                const double g = p.grad.data[j];
                double& m = m_[i].data[j];
                double& v = v_[i].data[j];
                m = cfg_.beta1 * m + (1 - cfg_.beta1) * g;
                v = cfg_.beta2 * v + (1 - cfg_.beta2) * g * g;
                p.value.data[j] -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text format, one tensor per block:
//   featrl-checkpoint 1
//   tensors <count>
//   <name> <rows> <cols>
//   <row values, space separated, %.17g>   (one line per row)

inline void save_params(std::ostream& out, const ParamList& params) {
    out << "featrl-checkpoint 1\n";
    out << "tensors " << params.size() << "\n";
    char buf[32];
    for (const auto& p : params) {
        const Matrix& m = p.param->value;
        out << p.name << ' ' << m.rows << ' ' << m.cols << "\n";
        for (std::size_t r = 0; r < m.rows; ++r) {
            for (std::size_t c = 0; c < m.cols; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
                out << (c ? " " : "") << buf;
            }
            out << "\n";
        }
    }
}

inline void load_params(std::istream& in, const ParamList& params) {
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "featrl-checkpoint" || version != 1)
        throw SchemaError("checkpoint: bad header");
    std::string word;
    std::size_t count = 0;
    if (!(in >> word >> count) || word != "tensors" || count != params.size())
        throw SchemaError("checkpoint: tensor count mismatch");
    for (const auto& p : params) {
        std::string name;
        std::size_t rows = 0, cols = 0;
        if (!(in >> name >> rows >> cols)) throw SchemaError("checkpoint: truncated");
        Matrix& m = p.param->value;
        if (name != p.name || rows != m.rows || cols != m.cols)
            throw SchemaError("checkpoint: expected tensor '" + p.name + "', found '" + name + "'");
        for (double& v : m.data)
            if (!(in >> v)) throw SchemaError("checkpoint: truncated values in '" + name + "'");
    }
}

} // namespace featrl::nn
