#pragma once

// The epoch/step search loop: both agents act on the current feature set, the
// combined actions produce a new set, the downstream learner scores it and
// both agents learn from the resulting rewards.

#include <algorithm>
#include <cstdio>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "featrl/agents.hpp"
#include "featrl/embedding.hpp"
#include "featrl/evaluator.hpp"
#include "featrl/mutualinfo.hpp"
#include "featrl/rewards.hpp"
#include "featrl/tabular.hpp"
#include "featrl/transforms.hpp"

namespace featrl {

enum class Ablation {
    None,
    NoDiscriminator, // mutual-information top-K filter instead of the discrimination agent
    NoAttention,     // raw descriptor tokens, no encoder block
    NoDiscrete,      // categorical columns treated as continuous codes
};

inline const char* to_string(Ablation a) {
    switch (a) {
    case Ablation::None: return "none";
    case Ablation::NoDiscriminator: return "k";
    case Ablation::NoAttention: return "t";
    case Ablation::NoDiscrete: return "c";
    }
    return "?";
}

struct SearchConfig {
    std::size_t epochs = 200;
    std::size_t steps = 6;
    std::uint64_t seed = 0;
    RewardWeights weights;
    RewardMode reward_mode = RewardMode::Unconditional;
    EncodingConfig encoding;
    LearnerConfig learner;
    std::optional<Metric> metric;
    std::size_t folds = 5;
    double discount = 0.99;
    EpsilonSchedule epsilon;
    std::optional<double> fixed_epsilon;
    std::size_t cap = 0; // 0: 4x the original feature count
    Ablation ablation = Ablation::None;
    bool chain_epochs = false;
    std::size_t replay_capacity = 24;
    std::size_t batch = 8;
    nn::AdamConfig adam;
    std::size_t target_sync = 0;

    std::size_t effective_cap(std::size_t original) const { return cap == 0 ? 4 * original : cap; }

    void validate(std::size_t original_features) const {
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (steps < 1) throw ConfigError("steps per epoch must be at least 1");
        if (effective_cap(original_features) < original_features)
            throw ConfigError("feature cap must be at least the original feature count");
        if (batch < 1) throw ConfigError("batch size must be positive");
        if (replay_capacity < 1) throw ConfigError("replay capacity must be positive");
        if (fixed_epsilon && (*fixed_epsilon < 0 || *fixed_epsilon > 1)) throw ConfigError("epsilon must lie in [0, 1]");
        weights.validate();
        learner.validate();
    }
};

// A feature set under transformation: columns plus their derivations.
struct WorkingSet {
    Dataset data;
    std::vector<FeatureExpression> exprs;

    static WorkingSet from_original(const Dataset& d) {
        WorkingSet ws{d, {}};
        for (const auto& c : d.features()) ws.exprs.push_back(FeatureExpression::original(c.name));
        return ws;
    }
};

// Copy with every categorical feature relabeled as continuous.
inline Dataset categorical_as_continuous(const Dataset& d) {
    std::vector<Column> cols = d.features();
    for (auto& c : cols)
        if (c.kind == ColumnKind::Discrete) c.kind = ColumnKind::Continuous;
    return d.with_features(std::move(cols));
}

inline Variable target_variable(const Dataset& d) { return {d.target().values, d.classification()}; }

// Generated column per feature (nullopt for identity operators).
inline std::vector<std::optional<GeneratedFeature>> generate_all(const WorkingSet& ws, const OperatorSequence& t1,
                                                                 PartnerSelector& sel) {
    if (t1.size() != ws.data.feature_count()) throw ConfigError("operator sequence length must equal the feature count");
    std::vector<std::optional<GeneratedFeature>> out;
    out.reserve(t1.size());
    for (std::size_t i = 0; i < t1.size(); ++i)
        out.push_back(generate_feature(ws.data, ws.exprs, i, t1[i].op, t1[i].partner, sel));
    return out;
}

struct ApplyResult {
    WorkingSet ws;
    // For each input feature, the row of its surviving successor in `ws`
    // (the feature itself if kept, otherwise its generated column).
    std::vector<std::optional<std::size_t>> successor;
    bool flagged = false; // the result would have been empty; input kept
};

namespace detail {

struct Candidate {
    Column column;
    FeatureExpression expr;
    std::size_t source = 0;
    bool generated = false;
};

inline ApplyResult finish(const WorkingSet& in, std::vector<Candidate> kept) {
    ApplyResult r;
    r.successor.assign(in.data.feature_count(), std::nullopt);
    if (kept.empty()) {
        r.ws = in;
        r.flagged = true;
        for (std::size_t i = 0; i < in.data.feature_count(); ++i) r.successor[i] = i;
        return r;
    }
    std::vector<Column> cols;
    std::vector<FeatureExpression> exprs;
    for (std::size_t j = 0; j < kept.size(); ++j) {
        auto& c = kept[j];
        auto& succ = r.successor[c.source];
        // an original that survives takes precedence over its generated column
        if (!succ || !c.generated) succ = j;
        cols.push_back(std::move(c.column));
        exprs.push_back(std::move(c.expr));
    }
    r.ws = WorkingSet{in.data.with_features(std::move(cols)), std::move(exprs)};
    return r;
}

inline void dedup(std::vector<Candidate>& c) {
    std::vector<Candidate> out;
    std::vector<std::string> seen;
    for (auto& x : c) {
        const std::string& key = x.column.name;
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(key);
        out.push_back(std::move(x));
    }
    c = std::move(out);
}

} // namespace detail

// Combine generated columns with the discriminator's decisions:
//   Delete  -> keep the original, drop the generated column
//   Replace -> drop the original, keep the generated column
//   Add     -> keep both
// Features without a generated column are kept unchanged. Kept originals come
// first (in order), then kept generated columns; duplicate expressions keep
// their first occurrence. Above `cap`, the generated columns with the lowest
// mutual information with the target are dropped (later ones first on ties).
inline ApplyResult apply_actions(const WorkingSet& ws, const std::vector<std::optional<GeneratedFeature>>& generated,
                                 const DiscriminatorSequence& t2, std::size_t cap) {
    const std::size_t n = ws.data.feature_count();
    if (generated.size() != n || t2.size() != n) throw ConfigError("action sequences must match the feature count");
    std::vector<detail::Candidate> originals, fresh;
    for (std::size_t i = 0; i < n; ++i) {
        const bool has_new = generated[i].has_value();
        const DiscAction a = t2[i];
        if (!has_new || a != DiscAction::Replace) originals.push_back({ws.data.feature(i), ws.exprs[i], i, false});
        if (has_new && a != DiscAction::Delete)
            fresh.push_back({generated[i]->column, generated[i]->expr, i, true});
    }
    std::vector<detail::Candidate> all = std::move(originals);
    for (auto& f : fresh) all.push_back(std::move(f));
    detail::dedup(all);

    if (all.size() > cap) {
        const Variable y = target_variable(ws.data);
        std::vector<double> mi(all.size(), 0.0);
        for (std::size_t j = 0; j < all.size(); ++j)
            if (all[j].generated) mi[j] = mutual_information(as_variable(all[j].column), y);
        while (all.size() > cap) {
            std::optional<std::size_t> victim;
            for (std::size_t j = 0; j < all.size(); ++j)
                if (all[j].generated && (!victim || mi[j] <= mi[*victim])) victim = j;
            if (!victim) break;
            all.erase(all.begin() + static_cast<std::ptrdiff_t>(*victim));
            mi.erase(mi.begin() + static_cast<std::ptrdiff_t>(*victim));
        }
    }
    return detail::finish(ws, std::move(all));
}

// Mutual-information filter used when the discrimination agent is ablated:
// keep the `k` columns (current and generated) sharing the most information
// with the target, in their original order.
inline ApplyResult select_top_k(const WorkingSet& ws, const std::vector<std::optional<GeneratedFeature>>& generated,
                                std::size_t k) {
    std::vector<detail::Candidate> all;
    for (std::size_t i = 0; i < ws.data.feature_count(); ++i) all.push_back({ws.data.feature(i), ws.exprs[i], i, false});
    for (std::size_t i = 0; i < generated.size(); ++i)
        if (generated[i]) all.push_back({generated[i]->column, generated[i]->expr, i, true});
    detail::dedup(all);
    if (all.size() > k) {
        const Variable y = target_variable(ws.data);
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t j = 0; j < all.size(); ++j)
            ranked.emplace_back(-mutual_information(as_variable(all[j].column), y), j);
        std::stable_sort(ranked.begin(), ranked.end());
        std::vector<bool> keep(all.size(), false);
        for (std::size_t j = 0; j < k; ++j) keep[ranked[j].second] = true;
        std::vector<detail::Candidate> kept;
        for (std::size_t j = 0; j < all.size(); ++j)
            if (keep[j]) kept.push_back(std::move(all[j]));
        all = std::move(kept);
    }
    return detail::finish(ws, std::move(all));
}

// ---------------------------------------------------------------------------
// Results

struct StepRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double score = 0;
    double r1 = 0;
    double mean_r2 = 0;
    double epsilon = 0;
    std::size_t features = 0;
    double best = 0;
    bool flagged = false;
    std::string error;
};

struct OrderReport {
    std::size_t low = 0;
    std::size_t high = 0;
    double proportion = 0;
};

// Features of order <= 1 are low-order, order >= 2 high-order.
inline OrderReport order_report(const std::vector<FeatureExpression>& exprs) {
    OrderReport r;
    for (const auto& e : exprs) (e.order() >= 2 ? r.high : r.low) += 1;
    const std::size_t total = r.low + r.high;
    r.proportion = total ? static_cast<double>(r.high) / static_cast<double>(total) : 0.0;
    return r;
}

struct SearchResult {
    WorkingSet best;
    double best_score = 0;
    double base_score = 0;
    Metric metric = Metric::F1Macro;
    std::vector<StepRecord> trace;
    std::vector<double> epoch_best; // best score so far at the end of each epoch
    OrderReport order;
    std::size_t generation_transitions = 0;
    std::size_t discrimination_transitions = 0;
    std::size_t evaluations = 0;
};

inline OrderReport order_report(const SearchResult& r) { return order_report(r.best.exprs); }

// Rebuild a feature set from its expressions against the original data.
inline WorkingSet materialize(const std::vector<FeatureExpression>& exprs, const Dataset& original) {
    std::vector<Column> cols;
    for (const auto& e : exprs) {
        Column c = evaluate_expression(e, original);
        c.name = e.to_string();
        cols.push_back(std::move(c));
    }
    return WorkingSet{original.with_features(std::move(cols)), exprs};
}

// ---------------------------------------------------------------------------
// Search

class Search {
public:
    Search(const Dataset& data, SearchConfig cfg) : cfg_(std::move(cfg)) {
        for (const auto& c : data.features())
            if (c.name.find_first_of("(),") != std::string::npos)
                throw SchemaError("column name '" + c.name + "' must not contain '(', ')' or ','");
        cfg_.validate(data.feature_count());
        original_ = cfg_.ablation == Ablation::NoDiscrete ? categorical_as_continuous(data) : data;
        if (cfg_.ablation == Ablation::NoAttention) cfg_.encoding.raw_tokens = true;
        metric_ = cfg_.metric.value_or(default_metric(original_.task()));
        check_metric(metric_, original_.task());
        learner_ = cfg_.learner;
        learner_.seed = cfg_.seed;
        folds_ = split_folds(original_, cfg_.folds, cfg_.seed);

        auto gen_cfg = AgentConfig::generation(cfg_.encoding);
        auto disc_cfg = AgentConfig::discrimination(cfg_.encoding);
        gen_cfg.adam = disc_cfg.adam = cfg_.adam;
        gen_cfg.target_sync = disc_cfg.target_sync = cfg_.target_sync;
        generator_ = QAgent(gen_cfg, splitmix64(cfg_.seed ^ 0x67656eULL));
        if (cfg_.ablation != Ablation::NoDiscriminator)
            discriminator_ = QAgent(disc_cfg, splitmix64(cfg_.seed ^ 0x646973ULL));
        rng_.seed(splitmix64(cfg_.seed ^ 0x726e67ULL));
        gen_buf_ = ReplayBuffer(cfg_.replay_capacity);
        disc_buf_ = ReplayBuffer(cfg_.replay_capacity);
    }

    const Dataset& original() const { return original_; }
    const FoldPlan& folds() const { return folds_; }
    const LearnerConfig& learner() const { return learner_; }
    Metric metric() const { return metric_; }
    const ReplayBuffer& generation_buffer() const { return gen_buf_; }
    const ReplayBuffer& discrimination_buffer() const { return disc_buf_; }
    QAgent& generator() { return generator_; }
    std::optional<QAgent>& discriminator() { return discriminator_; }

    double score(const Dataset& d) {
        ++evaluations_;
        return evaluate_cv(d, learner_, folds_, metric_, &cache_).value;
    }

    SearchResult run() {
        SearchResult res;
        res.metric = metric_;
        const WorkingSet start = WorkingSet::from_original(original_);
        res.base_score = score(original_);
        res.best = start;
        res.best_score = res.base_score;

        WorkingSet ws = start;
        double ws_score = res.base_score;
        for (std::size_t e = 0; e < cfg_.epochs; ++e) {
            const double eps = cfg_.fixed_epsilon.value_or(cfg_.epsilon.at(e, cfg_.epochs));
            if (!cfg_.chain_epochs || e == 0) {
                ws = start;
                ws_score = res.base_score;
            }
            for (std::size_t k = 0; k < cfg_.steps; ++k) {
                StepRecord rec;
                rec.epoch = e;
                rec.step = k;
                rec.epsilon = eps;
                try {
                    step(ws, ws_score, eps, k + 1 == cfg_.steps, rec);
                } catch (const Error& err) {
                    rec.error = err.what();
                    rec.flagged = true;
                    rec.score = ws_score;
                    rec.features = ws.data.feature_count();
                }
                if (rec.error.empty() && rec.score > res.best_score) {
                    res.best_score = rec.score;
                    res.best = ws;
                }
                rec.best = res.best_score;
                res.trace.push_back(std::move(rec));
            }
            res.epoch_best.push_back(res.best_score);
        }
        res.order = order_report(res.best.exprs);
        res.generation_transitions = gen_count_;
        res.discrimination_transitions = disc_count_;
        res.evaluations = evaluations_;
        return res;
    }

private:
    // One exploration step; on success `ws` and `ws_score` advance.
    void step(WorkingSet& ws, double& ws_score, double eps, bool last, StepRecord& rec) {
        auto state = std::make_shared<const StateInput>(build_state_input(ws.data));
        PartnerSelector partners(ws.data);
        OperatorSequence t1 = act_generation(generator_, *state, ws.data, partners, eps, rng_);
        auto generated = generate_all(ws, t1, partners);

        const std::size_t cap = cfg_.effective_cap(original_.feature_count());
        DiscriminatorSequence t2;
        ApplyResult applied;
        if (discriminator_) {
            t2 = act_discrimination(*discriminator_, *state, t1, eps, rng_);
            applied = apply_actions(ws, generated, t2, cap);
        } else {
            applied = select_top_k(ws, generated, original_.feature_count());
        }

        const double new_score = score(applied.ws.data);
        const double r1 = generation_reward(new_score, ws_score);
        auto next_state = std::make_shared<const StateInput>(build_state_input(applied.ws.data));

        const Variable y = target_variable(ws.data);
        double r2_sum = 0;
        for (std::size_t i = 0; i < t1.size(); ++i) {
            const ColumnKind kind = ws.data.feature(i).kind;
            const auto succ = applied.successor[i];
            Transition t;
            t.state = state;
            t.row = i;
            t.head = head_for(kind);
            t.action = head_index(t1[i].op);
            t.reward = r1;
            t.next_state = next_state;
            t.terminal = last || !succ;
            if (succ) {
                const ColumnKind next_kind = applied.ws.data.feature(*succ).kind;
                t.next_row = *succ;
                t.next_head = head_for(next_kind);
                t.next_op = static_cast<int>(next_kind == ColumnKind::Discrete ? OperatorId::AddD : OperatorId::None);
            }
            gen_buf_.push(t);
            ++gen_count_;

            if (discriminator_) {
                std::optional<Variable> f_new;
                if (generated[i]) f_new = as_variable(generated[i]->column);
                RewardBreakdown b = discrimination_reward(as_variable(ws.data.feature(i)), f_new, y, new_score,
                                                          ws_score, cfg_.weights);
                const double r2 = combine_rewards(b, cfg_.weights, cfg_.reward_mode, t2[i]);
                r2_sum += r2;
                Transition d = t;
                d.head = 0;
                d.op = static_cast<int>(t1[i].op);
                d.action = static_cast<std::size_t>(t2[i]);
                d.reward = r2;
                d.next_head = 0;
                disc_buf_.push(std::move(d));
                ++disc_count_;
            }
        }

        train(generator_, gen_buf_);
        if (discriminator_) train(*discriminator_, disc_buf_);

        rec.score = new_score;
        rec.r1 = r1;
        rec.mean_r2 = discriminator_ && !t1.empty() ? r2_sum / static_cast<double>(t1.size()) : 0.0;
        rec.features = applied.ws.data.feature_count();
        rec.flagged = applied.flagged;
        ws = std::move(applied.ws);
        ws_score = new_score;
    }

    void train(QAgent& agent, const ReplayBuffer& buf) {
        if (buf.empty()) return;
        auto batch = buf.sample(std::min(cfg_.batch, buf.size()), rng_);
        agent.td_update(batch, cfg_.discount);
    }

    SearchConfig cfg_;
    Dataset original_;
    Metric metric_ = Metric::F1Macro;
    LearnerConfig learner_;
    FoldPlan folds_;
    ScoreCache cache_;
    QAgent generator_;
    std::optional<QAgent> discriminator_;
    ReplayBuffer gen_buf_{24};
    ReplayBuffer disc_buf_{24};
    std::mt19937_64 rng_;
    std::size_t gen_count_ = 0;
    std::size_t disc_count_ = 0;
    std::size_t evaluations_ = 0;
};

inline SearchResult run_search(const Dataset& d, const SearchConfig& cfg) {
    Search s(d, cfg);
    return s.run();
}

inline SearchResult run_ablation(const Dataset& d, SearchConfig cfg, Ablation variant) {
    if (variant == Ablation::None) throw ConfigError("run_ablation needs one ablation variant");
    cfg.ablation = variant;
    return run_search(d, cfg);
}

// ---------------------------------------------------------------------------
// Export

namespace detail {

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

inline std::string format_cell(const Column& c, std::size_t i) {
    if (c.kind == ColumnKind::Discrete || (c.kind == ColumnKind::Target && !c.categories.empty())) {
        auto code = static_cast<std::size_t>(c.values[i]);
        if (code < c.categories.size()) return csv_field(c.categories[code]);
        return std::to_string(code);
    }
    return format_real(c.values[i]);
}

} // namespace detail

// CSV with one column per feature (header = expression) plus the target.
inline void write_csv(std::ostream& out, const Dataset& d) {
    for (const auto& c : d.features()) out << detail::csv_field(c.name) << ',';
    out << detail::csv_field(d.target().name) << '\n';
    for (std::size_t i = 0; i < d.rows(); ++i) {
        for (const auto& c : d.features()) out << detail::format_cell(c, i) << ',';
        out << detail::format_cell(d.target(), i) << '\n';
    }
}

inline void write_schema(std::ostream& out, const Dataset& d) {
    for (const auto& c : d.features()) out << c.name << " = " << to_string(c.kind) << '\n';
    out << d.target().name << " = " << (d.classification() ? "target:discrete" : "target:continuous") << '\n';
}

inline void write_trace(std::ostream& out, const std::vector<StepRecord>& trace) {
    out << "epoch,step,score,r1,mean_r2,epsilon,features,best,flagged,error\n";
    for (const auto& r : trace) {
        out << r.epoch << ',' << r.step << ',' << detail::format_real(r.score) << ',' << detail::format_real(r.r1) << ','
            << detail::format_real(r.mean_r2) << ',' << detail::format_real(r.epsilon) << ',' << r.features << ','
            << detail::format_real(r.best) << ',' << (r.flagged ? 1 : 0) << ',' << detail::csv_field(r.error) << '\n';
    }
}

} // namespace featrl
