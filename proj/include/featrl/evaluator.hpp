#pragma once

// Downstream learners (CART random forest, logistic/linear model), the F1 and
// 1-RAE metrics and cross-validated scoring with a score cache.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <tuple>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "featrl/error.hpp"
#include "featrl/nnkernel.hpp"
#include "featrl/tabular.hpp"

namespace featrl {

// ---------------------------------------------------------------------------
// Metrics

enum class F1Averaging { Macro, Weighted };

enum class Metric { F1Macro, F1Weighted, OneMinusRae };

inline const char* to_string(Metric m) {
    switch (m) {
    case Metric::F1Macro: return "f1-macro";
    case Metric::F1Weighted: return "f1-weighted";
    case Metric::OneMinusRae: return "1rae";
    }
    return "?";
}

inline std::optional<Metric> metric_from_string(std::string_view s) {
    if (s == "f1-macro" || s == "f1") return Metric::F1Macro;
    if (s == "f1-weighted") return Metric::F1Weighted;
    if (s == "1rae" || s == "1-rae") return Metric::OneMinusRae;
    return std::nullopt;
}

inline Metric default_metric(Task t) { return t == Task::Classification ? Metric::F1Macro : Metric::OneMinusRae; }

inline void check_metric(Metric m, Task t) {
    const bool cls_metric = m != Metric::OneMinusRae;
    if (cls_metric != (t == Task::Classification))
        throw ConfigError(std::string("metric/task mismatch: ") + to_string(m) + " on a " + to_string(t) + " task");
}

// Per-class precision/recall/F1 (0 on empty denominators) averaged over the
// labels present in either vector.
inline double f1_score(std::span<const double> y_true, std::span<const double> y_pred,
                       F1Averaging averaging = F1Averaging::Macro) {
    if (y_true.empty()) throw ConfigError("f1_score: empty input");
    if (y_true.size() != y_pred.size()) throw ConfigError("f1_score: length mismatch");
    std::size_t classes = 0;
    for (double v : y_true) classes = std::max(classes, static_cast<std::size_t>(v) + 1);
    for (double v : y_pred) classes = std::max(classes, static_cast<std::size_t>(v) + 1);
    std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0), support(classes, 0);
    std::vector<bool> seen(classes, false);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        auto t = static_cast<std::size_t>(y_true[i]);
        auto p = static_cast<std::size_t>(y_pred[i]);
        seen[t] = seen[p] = true;
        support[t] += 1;
        if (t == p) {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn[t] += 1;
        }
    }
    double total = 0, weight_sum = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        if (!seen[c]) continue;
        double prec = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
        double rec = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
        double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        double w = averaging == F1Averaging::Macro ? 1.0 : support[c];
        total += w * f1;
        weight_sum += w;
    }
    return weight_sum > 0 ? total / weight_sum : 0.0;
}

inline double one_minus_rae(std::span<const double> y_true, std::span<const double> y_pred) {
    if (y_true.empty()) throw ConfigError("1-RAE: empty input");
    if (y_true.size() != y_pred.size()) throw ConfigError("1-RAE: length mismatch");
    double mean = 0;
    for (double v : y_true) mean += v;
    mean /= static_cast<double>(y_true.size());
    double num = 0, den = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        num += std::abs(y_true[i] - y_pred[i]);
        den += std::abs(y_true[i] - mean);
    }
    if (den == 0) throw DataError("degenerate target: all target values are identical");
    return 1.0 - num / den;
}

inline double compute_metric(Metric m, std::span<const double> y_true, std::span<const double> y_pred) {
    switch (m) {
    case Metric::F1Macro: return f1_score(y_true, y_pred, F1Averaging::Macro);
    case Metric::F1Weighted: return f1_score(y_true, y_pred, F1Averaging::Weighted);
    case Metric::OneMinusRae: return one_minus_rae(y_true, y_pred);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Learners

enum class LearnerKind { RandomForest, LogisticRegression };

enum class MtryRule { Sqrt, All };

struct LearnerConfig {
    LearnerKind kind = LearnerKind::RandomForest;
    std::size_t trees = 50;
    std::size_t max_depth = 0; // 0 = unlimited
    MtryRule mtry = MtryRule::Sqrt;
    std::uint64_t seed = 0;
    // linear model
    std::size_t epochs = 300;
    double learning_rate = 0.05;
    double l2 = 1e-4;

    void validate() const {
        if (trees < 1) throw ConfigError("random forest needs at least one tree");
    }
};

// Column-major feature matrix: cols[j][i] = feature j of row i.
struct FeatureMatrix {
    std::vector<std::vector<double>> cols;

    std::size_t features() const { return cols.size(); }
    std::size_t rows() const { return cols.empty() ? 0 : cols[0].size(); }

    FeatureMatrix subset(std::span<const std::size_t> rows) const {
        FeatureMatrix out;
        out.cols.resize(cols.size());
        for (std::size_t j = 0; j < cols.size(); ++j) {
            out.cols[j].reserve(rows.size());
            for (std::size_t r : rows) out.cols[j].push_back(cols[j][r]);
        }
        return out;
    }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// CART tree on numeric features; gini for classification, squared error for
// regression.
class DecisionTree {
public:
    struct Node {
        int feature = -1; // -1 marks a leaf
        double threshold = 0;
        std::size_t left = 0, right = 0;
        double value = 0;
    };

    void fit(const FeatureMatrix& x, std::span<const double> y, std::vector<std::size_t> rows, Task task,
             std::size_t classes, std::size_t mtry, std::size_t max_depth, std::mt19937_64& rng) {
        nodes_.clear();
        task_ = task;
        classes_ = classes;
        const std::size_t p = x.features();
        mtry = std::clamp<std::size_t>(mtry, 1, std::max<std::size_t>(p, 1));
        std::vector<std::size_t> feature_pool(p);
        std::iota(feature_pool.begin(), feature_pool.end(), 0);
        std::vector<std::pair<double, double>> scratch;
        std::vector<double> left_counts(classes), total_counts(classes);

        struct Work {
            std::size_t node, lo, hi, depth;
        };
        nodes_.push_back({});
        std::vector<Work> stack{{0, 0, rows.size(), 0}};
        while (!stack.empty()) {
            Work w = stack.back();
            stack.pop_back();
            const std::size_t m = w.hi - w.lo;
            nodes_[w.node].value = leaf_value(y, rows, w.lo, w.hi, total_counts);
            if (m < 2 || is_pure(y, rows, w.lo, w.hi) || (max_depth > 0 && w.depth >= max_depth) || p == 0) continue;

            // draw mtry candidate features without replacement
            for (std::size_t i = 0; i < mtry; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, p - 1);
                std::swap(feature_pool[i], feature_pool[pick(rng)]);
            }
            int best_feature = -1;
            double best_score = -std::numeric_limits<double>::infinity();
            double best_threshold = 0;
            for (std::size_t fi = 0; fi < mtry; ++fi) {
                const std::size_t f = feature_pool[fi];
                scratch.clear();
                for (std::size_t r = w.lo; r < w.hi; ++r) scratch.emplace_back(x.cols[f][rows[r]], y[rows[r]]);
                std::sort(scratch.begin(), scratch.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                if (scratch.front().first == scratch.back().first) continue;
                double score;
                std::size_t split;
                if (task == Task::Classification)
                    std::tie(score, split) = best_gini_split(scratch, total_counts, left_counts);
                else
                    std::tie(score, split) = best_sse_split(scratch);
                if (split == 0) continue;
                if (score > best_score + 1e-12) {
                    best_score = score;
                    best_feature = static_cast<int>(f);
                    double lo_v = scratch[split - 1].first, hi_v = scratch[split].first;
                    double mid = lo_v + (hi_v - lo_v) / 2;
                    best_threshold = (mid >= hi_v || mid < lo_v) ? lo_v : mid;
                }
            }
            if (best_feature < 0) continue;

            auto mid_it = std::partition(rows.begin() + static_cast<std::ptrdiff_t>(w.lo),
                                         rows.begin() + static_cast<std::ptrdiff_t>(w.hi), [&](std::size_t r) {
                                             return x.cols[static_cast<std::size_t>(best_feature)][r] <= best_threshold;
                                         });
            const auto mid = static_cast<std::size_t>(mid_it - rows.begin());
            if (mid == w.lo || mid == w.hi) continue;
            nodes_[w.node].feature = best_feature;
            nodes_[w.node].threshold = best_threshold;
            const std::size_t l = nodes_.size();
            nodes_.push_back({});
            nodes_.push_back({});
            nodes_[w.node].left = l;
            nodes_[w.node].right = l + 1;
            stack.push_back({l + 1, mid, w.hi, w.depth + 1});
            stack.push_back({l, w.lo, mid, w.depth + 1});
        }
    }

    double predict(const FeatureMatrix& x, std::size_t row) const {
        std::size_t n = 0;
        while (nodes_[n].feature >= 0) {
            const Node& node = nodes_[n];
            n = x.cols[static_cast<std::size_t>(node.feature)][row] <= node.threshold ? node.left : node.right;
        }
        return nodes_[n].value;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    double leaf_value(std::span<const double> y, const std::vector<std::size_t>& rows, std::size_t lo, std::size_t hi,
                      std::vector<double>& counts) const {
        if (task_ == Task::Regression) {
            double s = 0;
            for (std::size_t r = lo; r < hi; ++r) s += y[rows[r]];
            return s / static_cast<double>(hi - lo);
        }
        std::fill(counts.begin(), counts.end(), 0.0);
        for (std::size_t r = lo; r < hi; ++r) counts[static_cast<std::size_t>(y[rows[r]])] += 1;
        return static_cast<double>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }

    static bool is_pure(std::span<const double> y, const std::vector<std::size_t>& rows, std::size_t lo,
                        std::size_t hi) {
        for (std::size_t r = lo + 1; r < hi; ++r)
            if (y[rows[r]] != y[rows[lo]]) return false;
        return true;
    }

    // Returns (-(weighted child gini * m), split position); split 0 = none.
    std::pair<double, std::size_t> best_gini_split(const std::vector<std::pair<double, double>>& s,
                                                   std::vector<double>& total, std::vector<double>& left) const {
        const std::size_t m = s.size();
        std::fill(total.begin(), total.end(), 0.0);
        std::fill(left.begin(), left.end(), 0.0);
        for (const auto& e : s) total[static_cast<std::size_t>(e.second)] += 1;
        double sq_left = 0, sq_right = 0;
        for (double c : total) sq_right += c * c;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_pos = 0;
        for (std::size_t i = 1; i < m; ++i) {
            auto c = static_cast<std::size_t>(s[i - 1].second);
            const double lc = left[c], rc = total[c] - left[c];
            sq_left += 2 * lc + 1;
            sq_right -= 2 * rc - 1;
            left[c] += 1;
            if (s[i - 1].first == s[i].first) continue;
            const double nl = static_cast<double>(i), nr = static_cast<double>(m - i);
            // maximize sum of squared class counts normalized by child size
            double score = sq_left / nl + sq_right / nr;
            if (score > best + 1e-12) {
                best = score;
                best_pos = i;
            }
        }
        return {best, best_pos};
    }

    static std::pair<double, std::size_t> best_sse_split(const std::vector<std::pair<double, double>>& s) {
        const std::size_t m = s.size();
        double total = 0;
        for (const auto& e : s) total += e.second;
        const double mean = total / static_cast<double>(m);
        double sl = 0, st = 0;
        for (const auto& e : s) st += e.second - mean;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_pos = 0;
        for (std::size_t i = 1; i < m; ++i) {
            sl += s[i - 1].second - mean;
            if (s[i - 1].first == s[i].first) continue;
            const double sr = st - sl;
            const double nl = static_cast<double>(i), nr = static_cast<double>(m - i);
            double score = sl * sl / nl + sr * sr / nr;
            if (score > best + 1e-12) {
                best = score;
                best_pos = i;
            }
        }
        return {best, best_pos};
    }

    std::vector<Node> nodes_;
    Task task_ = Task::Classification;
    std::size_t classes_ = 0;
};

class RandomForest {
public:
    void fit(const FeatureMatrix& x, std::span<const double> y, Task task, const LearnerConfig& lc) {
        lc.validate();
        task_ = task;
        classes_ = 0;
        if (task == Task::Classification)
            for (double v : y) classes_ = std::max(classes_, static_cast<std::size_t>(v) + 1);
        const std::size_t n = x.rows();
        const std::size_t p = x.features();
        const std::size_t mtry =
            lc.mtry == MtryRule::All ? p : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(p))));
        trees_.assign(lc.trees, {});
        for (std::size_t t = 0; t < lc.trees; ++t) {
            std::mt19937_64 rng(splitmix64(lc.seed * 1000003ULL + t));
            std::vector<std::size_t> rows(n);
            std::uniform_int_distribution<std::size_t> draw(0, n - 1);
            for (auto& r : rows) r = draw(rng);
            trees_[t].fit(x, y, std::move(rows), task, classes_, mtry, lc.max_depth, rng);
        }
    }

    std::vector<double> predict(const FeatureMatrix& x) const {
        const std::size_t n = x.rows();
        std::vector<double> out(n);
        std::vector<double> votes(classes_);
        for (std::size_t i = 0; i < n; ++i) {
            if (task_ == Task::Regression) {
                double s = 0;
                for (const auto& t : trees_) s += t.predict(x, i);
                out[i] = s / static_cast<double>(trees_.size());
            } else {
                std::fill(votes.begin(), votes.end(), 0.0);
                for (const auto& t : trees_) votes[static_cast<std::size_t>(t.predict(x, i))] += 1;
                out[i] = static_cast<double>(std::max_element(votes.begin(), votes.end()) - votes.begin());
            }
        }
        return out;
    }

private:
    std::vector<DecisionTree> trees_;
    Task task_ = Task::Classification;
    std::size_t classes_ = 0;
};

// Multinomial logistic regression (classification) or least-squares linear
// regression (regression) on standardized features, full-batch Adam.
class LinearModel {
public:
    void fit(const FeatureMatrix& x, std::span<const double> y, Task task, const LearnerConfig& lc) {
        task_ = task;
        const std::size_t n = x.rows(), p = x.features();
        mean_.assign(p, 0);
        scale_.assign(p, 1);
        for (std::size_t j = 0; j < p; ++j) {
            double m = 0;
            for (double v : x.cols[j]) m += v;
            m /= static_cast<double>(n);
            double var = 0;
            for (double v : x.cols[j]) var += (v - m) * (v - m);
            double sd = std::sqrt(var / static_cast<double>(n));
            mean_[j] = m;
            scale_[j] = sd > 1e-12 ? sd : 1.0;
        }
        if (task == Task::Classification) {
            outputs_ = 0;
            for (double v : y) outputs_ = std::max(outputs_, static_cast<std::size_t>(v) + 1);
        } else {
            outputs_ = 1;
            y_mean_ = 0;
            for (double v : y) y_mean_ += v;
            y_mean_ /= static_cast<double>(n);
            double var = 0;
            for (double v : y) var += (v - y_mean_) * (v - y_mean_);
            y_scale_ = std::sqrt(var / static_cast<double>(n));
            if (y_scale_ < 1e-12) y_scale_ = 1;
        }
        nn::Matrix z = standardized(x);
        weight_ = nn::Param(p, outputs_);
        bias_ = nn::Param(1, outputs_);
        nn::Adam adam({lc.learning_rate, 0.9, 0.999, 1e-8});
        nn::ParamList params{{"w", &weight_}, {"b", &bias_}};
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t epoch = 0; epoch < lc.epochs; ++epoch) {
            nn::zero_grads(params);
            nn::Matrix out = logits(z);
            nn::Matrix dout(n, outputs_);
            if (task == Task::Classification) {
                nn::softmax_rows(out);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t c = 0; c < outputs_; ++c)
                        dout(i, c) = (out(i, c) - (static_cast<std::size_t>(y[i]) == c ? 1.0 : 0.0)) * inv_n;
            } else {
                for (std::size_t i = 0; i < n; ++i) dout(i, 0) = 2 * (out(i, 0) - (y[i] - y_mean_) / y_scale_) * inv_n;
            }
            nn::add_inplace(weight_.grad, nn::matmul_tn(z, dout));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < outputs_; ++c) bias_.grad(0, c) += dout(i, c);
            for (std::size_t k = 0; k < weight_.value.data.size(); ++k)
                weight_.grad.data[k] += 2 * lc.l2 * weight_.value.data[k];
            adam.step(params);
        }
    }

    std::vector<double> predict(const FeatureMatrix& x) const {
        nn::Matrix out = logits(standardized(x));
        std::vector<double> pred(x.rows());
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (task_ == Task::Classification) {
                auto r = out.row(i);
                pred[i] = static_cast<double>(std::max_element(r.begin(), r.end()) - r.begin());
            } else {
                pred[i] = out(i, 0) * y_scale_ + y_mean_;
            }
        }
        return pred;
    }

private:
    nn::Matrix standardized(const FeatureMatrix& x) const {
        nn::Matrix z(x.rows(), x.features());
        for (std::size_t j = 0; j < x.features(); ++j)
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double v = (x.cols[j][i] - mean_[j]) / scale_[j];
                z(i, j) = std::clamp(v, -1e6, 1e6);
            }
        return z;
    }

    nn::Matrix logits(const nn::Matrix& z) const {
        nn::Matrix out = nn::matmul(z, weight_.value);
        for (std::size_t i = 0; i < out.rows; ++i)
            for (std::size_t c = 0; c < outputs_; ++c) out(i, c) += bias_.value(0, c);
        return out;
    }

    Task task_ = Task::Classification;
    std::size_t outputs_ = 1;
    std::vector<double> mean_, scale_;
    double y_mean_ = 0, y_scale_ = 1;
    nn::Param weight_, bias_;
};

inline std::vector<double> fit_predict(const FeatureMatrix& train, std::span<const double> y_train,
                                       const FeatureMatrix& test, Task task, const LearnerConfig& lc) {
    if (lc.kind == LearnerKind::RandomForest) {
        RandomForest rf;
        rf.fit(train, y_train, task, lc);
        return rf.predict(test);
    }
    LinearModel lm;
    lm.fit(train, y_train, task, lc);
    return lm.predict(test);
}

// ---------------------------------------------------------------------------
// Cross-validated scoring

struct Score {
    double value = 0;
    Metric metric = Metric::F1Macro;
};

namespace detail {

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;

    void bytes(const void* p, std::size_t n) {
        auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    }
    template <class T>
    void pod(const T& v) {
        bytes(&v, sizeof v);
    }
    void str(std::string_view s) {
        pod(s.size());
        bytes(s.data(), s.size());
    }
    void reals(std::span<const double> v) {
        pod(v.size());
        bytes(v.data(), v.size() * sizeof(double));
    }
};

// Features in canonical (name) order.
inline std::vector<std::size_t> canonical_feature_order(const Dataset& d) {
    std::vector<std::size_t> order(d.feature_count());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d.feature(a).name < d.feature(b).name; });
    return order;
}

} // namespace detail

inline std::uint64_t score_key(const Dataset& d, const LearnerConfig& lc, const FoldPlan& folds, Metric metric) {
    detail::Fnv1a h;
    for (std::size_t j : detail::canonical_feature_order(d)) {
        h.str(d.feature(j).name);
        h.reals(d.feature(j).values);
    }
    h.reals(d.target().values);
    h.pod(static_cast<int>(lc.kind));
    h.pod(lc.trees);
    h.pod(lc.max_depth);
    h.pod(static_cast<int>(lc.mtry));
    h.pod(lc.seed);
    h.pod(lc.epochs);
    h.pod(lc.learning_rate);
    h.pod(lc.l2);
    h.pod(folds.k);
    for (std::size_t a : folds.assignments) h.pod(a);
    h.pod(static_cast<int>(metric));
    return h.h;
}

// Thread-safe memo of cross-validated scores.
class ScoreCache {
public:
    std::optional<double> find(std::uint64_t key) const {
        std::lock_guard lock(mu_);
        auto it = map_.find(key);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    void insert(std::uint64_t key, double value) {
        std::lock_guard lock(mu_);
        map_.emplace(key, value);
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return map_.size();
    }

private:
    mutable std::mutex mu_;
    std::unordered_map<std::uint64_t, double> map_;
};

// Pooled out-of-fold score: every row is predicted by a model that never saw it.
inline Score evaluate_cv(const Dataset& d, const LearnerConfig& lc, const FoldPlan& folds, Metric metric,
                         ScoreCache* cache = nullptr) {
    check_metric(metric, d.task());
    if (folds.assignments.size() != d.rows()) throw ConfigError("fold plan does not match the dataset");
    if (d.feature_count() == 0) throw ConfigError("cannot evaluate a dataset without features");
    std::uint64_t key = 0;
    if (cache) {
        key = score_key(d, lc, folds, metric);
        if (auto hit = cache->find(key)) return {*hit, metric};
    }

    FeatureMatrix all;
    for (std::size_t j : detail::canonical_feature_order(d)) all.cols.push_back(d.feature(j).values);
    const auto& y = d.target().values;
    const std::size_t classes = d.class_count();
    std::vector<double> pred(d.rows(), 0.0);
    for (std::size_t f = 0; f < folds.k; ++f) {
        auto train = folds.train_rows(f);
        auto test = folds.fold_rows(f);
        if (test.empty() || train.empty()) continue;
        std::vector<double> y_train;
        y_train.reserve(train.size());
        for (std::size_t r : train) y_train.push_back(y[r]);
        if (d.classification()) {
            std::vector<bool> present(classes, false);
            for (double v : y_train) present[static_cast<std::size_t>(v)] = true;
            for (std::size_t c = 0; c < classes; ++c)
                if (!present[c]) throw DataError("class " + std::to_string(c) + " absent from the training split of fold " + std::to_string(f));
        }
        LearnerConfig fold_cfg = lc;
        fold_cfg.seed = splitmix64(lc.seed + 7919 * (f + 1));
        auto p = fit_predict(all.subset(train), y_train, all.subset(test), d.task(), fold_cfg);
        for (std::size_t i = 0; i < test.size(); ++i) pred[test[i]] = p[i];
    }
    double value = compute_metric(metric, y, pred);
    if (cache) cache->insert(key, value);
    return {value, metric};
}

} // namespace featrl
