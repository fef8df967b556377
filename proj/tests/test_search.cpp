#include <gtest/gtest.h>

#include <sstream>

#include "apply_oracle.hpp"
#include "featrl/search.hpp"
#include "synthetic.hpp"

using namespace featrl;
using featrl::testing::multiplicative_dataset;

namespace {

SearchConfig tiny_config(std::uint64_t seed = 0) {
    SearchConfig c;
    c.epochs = 3;
    c.steps = 2;
    c.seed = seed;
    c.learner.trees = 8;
    c.folds = 3;
    return c;
}

Dataset small_data() { return multiplicative_dataset(90, 3); }

Dataset mixed_data() {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0, 1);
    const std::size_t n = 90;
    Column a{"a", ColumnKind::Continuous, {}, {}};
    Column b{"b", ColumnKind::Continuous, {}, {}};
    Column g{"g", ColumnKind::Discrete, {}, {"x", "y", "z"}};
    Column t{"label", ColumnKind::Target, {}, {"no", "yes"}};
    for (std::size_t i = 0; i < n; ++i) {
        a.values.push_back(u(rng));
        b.values.push_back(u(rng));
        g.values.push_back(static_cast<double>(i % 3));
        t.values.push_back(a.values.back() + 0.3 * g.values.back() > 0.8 ? 1.0 : 0.0);
    }
    return Dataset({a, b, g}, t, Task::Classification);
}

} // namespace

TEST(ApplyActions, ExhaustiveOracle) {
    auto [bad, total] = featrl::testing::exhaustive_apply_check();
    EXPECT_EQ(bad, 0u);
    EXPECT_GT(total, 0u);
}

TEST(ApplyActions, IdentityActionsKeepOriginals) {
    auto fx = featrl::testing::oracle_fixture(3, false, 5);
    std::vector<std::optional<GeneratedFeature>> none(3);
    auto r = apply_actions(fx.ws, none, {DiscAction::Replace, DiscAction::Add, DiscAction::Delete}, 6);
    ASSERT_EQ(r.ws.data.feature_count(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r.ws.data.feature(i).name, fx.ws.data.feature(i).name);
        EXPECT_EQ(r.successor[i], i);
    }
    EXPECT_FALSE(r.flagged);
}

TEST(ApplyActions, CapNeverExceeded) {
    auto fx = featrl::testing::oracle_fixture(4, false, 9);
    std::vector<DiscAction> all_add(4, DiscAction::Add);
    for (std::size_t cap = 4; cap <= 8; ++cap) EXPECT_LE(apply_actions(fx.ws, fx.gen, all_add, cap).ws.data.feature_count(), cap);
}

TEST(ApplyActions, LengthMismatchRejected) {
    auto fx = featrl::testing::oracle_fixture(3, false, 5);
    EXPECT_THROW(apply_actions(fx.ws, fx.gen, {DiscAction::Add}, 6), ConfigError);
}

TEST(SelectTopK, KeepsHighestInformation) {
    auto fx = featrl::testing::oracle_fixture(3, false, 21);
    auto r = select_top_k(fx.ws, fx.gen, 3);
    EXPECT_EQ(r.ws.data.feature_count(), 3u);
    Variable y{fx.ws.data.target().values, false};
    double kept_min = 1e9;
    for (const auto& c : r.ws.data.features()) kept_min = std::min(kept_min, mutual_information(as_variable(c), y));
    std::vector<std::string> kept;
    for (const auto& c : r.ws.data.features()) kept.push_back(c.name);
    auto consider = [&](const Column& c) {
        if (std::find(kept.begin(), kept.end(), c.name) == kept.end())
            EXPECT_LE(mutual_information(as_variable(c), y), kept_min);
    };
    for (const auto& c : fx.ws.data.features()) consider(c);
    for (const auto& g : fx.gen)
        if (g && g->column.name != "f0") consider(g->column);
}

TEST(OrderReport, CountsHighOrder) {
    std::vector<FeatureExpression> e{
        FeatureExpression::original("a"),
        FeatureExpression::apply(OperatorId::Sqrt, {FeatureExpression::original("a")}),
        FeatureExpression::apply(OperatorId::Mul,
                                 {FeatureExpression::apply(OperatorId::Sqrt, {FeatureExpression::original("a")}),
                                  FeatureExpression::original("b")}),
    };
    auto r = order_report(e);
    EXPECT_EQ(r.low, 2u);
    EXPECT_EQ(r.high, 1u);
    EXPECT_NEAR(r.proportion, 1.0 / 3.0, 1e-15);
}

TEST(SearchConfig, Validation) {
    auto c = tiny_config();
    c.epochs = 0;
    EXPECT_THROW(c.validate(5), ConfigError);
    c = tiny_config();
    c.steps = 0;
    EXPECT_THROW(c.validate(5), ConfigError);
    c = tiny_config();
    c.cap = 3;
    EXPECT_THROW(c.validate(5), ConfigError);
    c = tiny_config();
    c.fixed_epsilon = 1.5;
    EXPECT_THROW(c.validate(5), ConfigError);
    c = tiny_config();
    c.replay_capacity = 0;
    EXPECT_THROW(c.validate(5), ConfigError);
    EXPECT_EQ(tiny_config().effective_cap(5), 20u);
}

TEST(Search, RejectsReservedCharactersInNames) {
    auto d = small_data();
    auto cols = d.features();
    cols[0].name = "x(1)";
    Dataset bad(cols, d.target(), d.task());
    EXPECT_THROW(Search(bad, tiny_config()), SchemaError);
}

TEST(Search, MetricTaskMismatch) {
    auto c = tiny_config();
    c.metric = Metric::F1Macro;
    EXPECT_THROW(Search(small_data(), c), ConfigError);
}

TEST(Search, TraceShapeAndMonotoneBest) {
    auto cfg = tiny_config();
    auto r = run_search(small_data(), cfg);
    EXPECT_EQ(r.trace.size(), cfg.epochs * cfg.steps);
    ASSERT_EQ(r.epoch_best.size(), cfg.epochs);
    EXPECT_GE(r.best_score, r.base_score);
    for (std::size_t i = 1; i < r.epoch_best.size(); ++i) EXPECT_GE(r.epoch_best[i], r.epoch_best[i - 1]);
    double running = r.base_score;
    for (const auto& s : r.trace) {
        if (s.error.empty()) running = std::max(running, s.score);
        EXPECT_EQ(s.best, running);
        EXPECT_LE(s.features, cfg.effective_cap(5));
        EXPECT_GE(s.features, 1u);
    }
    EXPECT_EQ(r.generation_transitions, r.discrimination_transitions);
    EXPECT_GT(r.generation_transitions, 0u);
}

TEST(Search, DeterministicForSeed) {
    auto a = run_search(small_data(), tiny_config(4));
    auto b = run_search(small_data(), tiny_config(4));
    std::ostringstream ta, tb, ca, cb;
    write_trace(ta, a.trace);
    write_trace(tb, b.trace);
    write_csv(ca, a.best.data);
    write_csv(cb, b.best.data);
    EXPECT_EQ(ta.str(), tb.str());
    EXPECT_EQ(ca.str(), cb.str());
}

TEST(Search, BestScoreReproducibleFromExpressions) {
    auto d = small_data();
    Search s(d, tiny_config(2));
    auto r = s.run();
    auto rebuilt = materialize(r.best.exprs, s.original());
    double again = evaluate_cv(rebuilt.data, s.learner(), s.folds(), s.metric()).value;
    EXPECT_EQ(again, r.best_score);
}

TEST(Search, ReplayBuffersHonourCapacity) {
    auto cfg = tiny_config();
    cfg.replay_capacity = 7;
    Search s(small_data(), cfg);
    s.run();
    EXPECT_EQ(s.generation_buffer().capacity(), 7u);
    EXPECT_EQ(s.generation_buffer().size(), 7u);
    EXPECT_EQ(s.discrimination_buffer().size(), 7u);
}

TEST(Search, ChainedEpochsRun) {
    auto cfg = tiny_config();
    cfg.chain_epochs = true;
    auto r = run_search(small_data(), cfg);
    EXPECT_EQ(r.trace.size(), 6u);
}

TEST(Search, ClassificationWithCategoricals) {
    auto r = run_search(mixed_data(), tiny_config(1));
    EXPECT_EQ(r.metric, Metric::F1Macro);
    EXPECT_GE(r.best_score, r.base_score);
    for (const auto& s : r.trace) EXPECT_TRUE(s.error.empty()) << s.error;
}

TEST(Ablation, NoDiscreteMatchesFullOnContinuousData) {
    auto full = run_search(small_data(), tiny_config(5));
    auto c = run_ablation(small_data(), tiny_config(5), Ablation::NoDiscrete);
    std::ostringstream a, b;
    write_trace(a, full.trace);
    write_trace(b, c.trace);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(full.best_score, c.best_score);
}

TEST(Ablation, NoDiscriminatorKeepsOriginalWidth) {
    Search s(small_data(), [] {
        auto c = tiny_config();
        c.ablation = Ablation::NoDiscriminator;
        return c;
    }());
    EXPECT_FALSE(s.discriminator().has_value());
    auto r = s.run();
    for (const auto& st : r.trace) EXPECT_LE(st.features, 5u);
    EXPECT_EQ(r.discrimination_transitions, 0u);
}

TEST(Ablation, NoAttentionUsesRawTokens) {
    auto c = tiny_config();
    c.ablation = Ablation::NoAttention;
    Search s(small_data(), c);
    EXPECT_TRUE(s.generator().network().encoder.config().raw_tokens);
    EXPECT_TRUE(s.generator().network().encoder.blocks().empty());
    EXPECT_NO_THROW(s.run());
}

TEST(Ablation, NoDiscreteRelabelsCategoricals) {
    auto c = tiny_config();
    c.ablation = Ablation::NoDiscrete;
    Search s(mixed_data(), c);
    for (const auto& col : s.original().features()) EXPECT_EQ(col.kind, ColumnKind::Continuous);
    EXPECT_THROW(run_ablation(small_data(), tiny_config(), Ablation::None), ConfigError);
}

TEST(Export, CsvRoundTrip) {
    auto d = mixed_data();
    std::ostringstream csv, schema;
    write_csv(csv, d);
    write_schema(schema, d);
    std::istringstream sin(schema.str()), cin(csv.str());
    auto back = read_csv(cin, parse_schema(sin));
    ASSERT_EQ(back.feature_count(), d.feature_count());
    for (std::size_t j = 0; j < d.feature_count(); ++j) EXPECT_EQ(back.feature(j).values, d.feature(j).values);
    EXPECT_EQ(back.target().values, d.target().values);
}

TEST(Export, FieldsWithCommasAreQuoted) {
    EXPECT_EQ(detail::csv_field("add(a,b)"), "\"add(a,b)\"");
    EXPECT_EQ(detail::csv_field("plain"), "plain");
    EXPECT_EQ(detail::format_real(0.1), "0.10000000000000001");
}
