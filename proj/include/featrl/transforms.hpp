#pragma once

// Operator algebra over columns: guarded unary/binary arithmetic, categorical
// cross, supervised tree binning, partner selection for two-operand
// operators and expression trees that record how a column was derived.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "featrl/error.hpp"
#include "featrl/mutualinfo.hpp"
#include "featrl/tabular.hpp"

namespace featrl {

enum class OperatorId : int {
    Abs = 0,
    None,
    Square,
    Inverse,
    Log,
    Sqrt,
    Cube,
    Add,
    Sub,
    Mul,
    Div,
    Cross,
    AddD,
};

inline constexpr std::size_t kOperatorCount = 13;
inline constexpr std::size_t kContinuousOps = 11;
inline constexpr std::size_t kDiscreteOps = 2;

inline constexpr double kGuardEps = 1e-6;
inline constexpr double kClampBound = 1e12;
inline constexpr std::size_t kDefaultBinLeaves = 8;

inline bool is_unary(OperatorId op) { return static_cast<int>(op) <= static_cast<int>(OperatorId::Cube); }
inline bool is_binary_arith(OperatorId op) {
    return op == OperatorId::Add || op == OperatorId::Sub || op == OperatorId::Mul || op == OperatorId::Div;
}
inline bool is_continuous_op(OperatorId op) { return static_cast<int>(op) < static_cast<int>(kContinuousOps); }
inline bool needs_partner(OperatorId op) { return is_binary_arith(op) || op == OperatorId::Cross; }
// None and AddD emit no new column.
inline bool is_identity(OperatorId op) { return op == OperatorId::None || op == OperatorId::AddD; }

// Action index within the head that owns the operator (continuous head: 0..10,
// categorical head: 0..1).
inline std::size_t head_index(OperatorId op) {
    int v = static_cast<int>(op);
    return is_continuous_op(op) ? static_cast<std::size_t>(v) : static_cast<std::size_t>(v) - kContinuousOps;
}

inline OperatorId continuous_op(std::size_t index) { return static_cast<OperatorId>(index); }
inline OperatorId discrete_op(std::size_t index) { return static_cast<OperatorId>(kContinuousOps + index); }

inline std::string_view op_name(OperatorId op) {
    switch (op) {
    case OperatorId::Abs: return "abs";
    case OperatorId::None: return "none";
    case OperatorId::Square: return "square";
    case OperatorId::Inverse: return "inverse";
    case OperatorId::Log: return "log";
    case OperatorId::Sqrt: return "sqrt";
    case OperatorId::Cube: return "cube";
    case OperatorId::Add: return "add";
    case OperatorId::Sub: return "sub";
    case OperatorId::Mul: return "mul";
    case OperatorId::Div: return "div";
    case OperatorId::Cross: return "cross";
    case OperatorId::AddD: return "addd";
    }
    return "?";
}

inline std::optional<OperatorId> op_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kOperatorCount; ++i) {
        auto op = static_cast<OperatorId>(i);
        if (op_name(op) == name) return op;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Element-wise operators

inline double clamp_value(double x) {
    if (std::isnan(x)) return kClampBound;
    return std::clamp(x, -kClampBound, kClampBound);
}

inline double guarded_inverse(double x) {
    double sign = x < 0 ? -1.0 : 1.0;
    return sign / (std::abs(x) + kGuardEps);
}

inline double apply_unary_scalar(double x, OperatorId op) {
    switch (op) {
    case OperatorId::Abs: return std::abs(x);
    case OperatorId::None: return x;
    case OperatorId::Square: return x * x;
    case OperatorId::Inverse: return guarded_inverse(x);
    case OperatorId::Log: return std::log(std::abs(x) + kGuardEps);
    case OperatorId::Sqrt: return std::sqrt(std::abs(x));
    case OperatorId::Cube: return x * x * x;
    default: throw ConfigError("operator '" + std::string(op_name(op)) + "' is not unary");
    }
}

inline std::vector<double> apply_unary(std::span<const double> col, OperatorId op) {
    if (!is_unary(op)) throw ConfigError("operator '" + std::string(op_name(op)) + "' is not unary");
    std::vector<double> out(col.size());
    for (std::size_t i = 0; i < col.size(); ++i) out[i] = clamp_value(apply_unary_scalar(col[i], op));
    return out;
}

inline std::vector<double> apply_binary(std::span<const double> a, std::span<const double> b, OperatorId op) {
    if (!is_binary_arith(op)) throw ConfigError("operator '" + std::string(op_name(op)) + "' is not binary arithmetic");
    if (a.size() != b.size()) throw ConfigError("binary operator: length mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        double r = 0;
        switch (op) {
        case OperatorId::Add: r = a[i] + b[i]; break;
        case OperatorId::Sub: r = a[i] - b[i]; break;
        case OperatorId::Mul: r = a[i] * b[i]; break;
        default: r = a[i] * guarded_inverse(b[i]); break;
        }
        out[i] = clamp_value(r);
    }
    return out;
}

// Categories of the result are the observed (a, b) pairs, coded by first appearance.
inline std::vector<double> cross(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("cross: length mismatch");
    std::unordered_map<std::uint64_t, double> seen;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        std::uint64_t key = (static_cast<std::uint64_t>(a[i]) << 32) | static_cast<std::uint64_t>(b[i]);
        auto [it, inserted] = seen.try_emplace(key, static_cast<double>(seen.size()));
        out[i] = it->second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Supervised binning

// Default minimum leaf size: max(5, 5% of n), relaxed to n/2 on tiny inputs so
// that a single split stays possible.
inline std::size_t default_min_leaf(std::size_t n) {
    std::size_t want = std::max<std::size_t>(5, static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(n))));
    return std::max<std::size_t>(1, std::min(want, n / 2));
}

// Fit a one-feature tree of at most `max_leaves` leaves, growing best-first by
// impurity reduction (gini for classification, squared error for regression).
// Returns one code per row, ordered by leaf interval.
inline std::vector<double> bin_with_tree(std::span<const double> col, std::span<const double> y, Task task,
                                         std::size_t max_leaves = kDefaultBinLeaves, std::size_t min_leaf = 0) {
    if (max_leaves < 2) throw ConfigError("bin_with_tree: max_leaves must be at least 2");
    if (col.size() != y.size()) throw ConfigError("bin_with_tree: length mismatch");
    const std::size_t n = col.size();
    if (min_leaf == 0) min_leaf = default_min_leaf(n);
    std::vector<double> codes(n, 0.0);
    if (n < 2) return codes;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return col[a] < col[b]; });

    const bool cls = task == Task::Classification;
    std::size_t classes = 0;
    double ymean = 0;
    if (cls) {
        for (double v : y) classes = std::max(classes, static_cast<std::size_t>(v) + 1);
    } else {
        for (double v : y) ymean += v;
        ymean /= static_cast<double>(n);
    }
    // prefix statistics over the sorted order
    std::vector<double> psum(n + 1, 0.0), psq(n + 1, 0.0);
    std::vector<std::vector<double>> pcount;
    if (cls) {
        pcount.assign(classes, std::vector<double>(n + 1, 0.0));
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < classes; ++c) pcount[c][r + 1] = pcount[c][r];
            pcount[static_cast<std::size_t>(y[order[r]])][r + 1] += 1;
        }
    } else {
        for (std::size_t r = 0; r < n; ++r) {
            double v = y[order[r]] - ymean;
            psum[r + 1] = psum[r] + v;
            psq[r + 1] = psq[r] + v * v;
        }
    }
    // n * impurity of the sorted range [lo, hi)
    auto cost = [&](std::size_t lo, std::size_t hi) {
        const double m = static_cast<double>(hi - lo);
        if (m == 0) return 0.0;
        if (cls) {
            double s = 0;
            for (std::size_t c = 0; c < classes; ++c) {
                double k = pcount[c][hi] - pcount[c][lo];
                s += k * k;
            }
            return m - s / m;
        }
        double s = psum[hi] - psum[lo];
        return (psq[hi] - psq[lo]) - s * s / m;
    };

    struct Leaf {
        std::size_t lo, hi;
        std::size_t split = 0;
        double gain = 0;
    };
    auto best_split = [&](Leaf& leaf) {
        leaf.gain = 0;
        leaf.split = 0;
        const double parent = cost(leaf.lo, leaf.hi);
        for (std::size_t p = leaf.lo + min_leaf; p + min_leaf <= leaf.hi; ++p) {
            if (col[order[p - 1]] == col[order[p]]) continue;
            double g = parent - cost(leaf.lo, p) - cost(p, leaf.hi);
            if (g > leaf.gain + 1e-12) {
                leaf.gain = g;
                leaf.split = p;
            }
        }
    };

    std::vector<Leaf> leaves{{0, n}};
    best_split(leaves[0]);
    while (leaves.size() < max_leaves) {
        std::size_t best = leaves.size();
        for (std::size_t i = 0; i < leaves.size(); ++i)
            if (leaves[i].split != 0 && (best == leaves.size() || leaves[i].gain > leaves[best].gain)) best = i;
        if (best == leaves.size()) break;
        Leaf left{leaves[best].lo, leaves[best].split};
        Leaf right{leaves[best].split, leaves[best].hi};
        best_split(left);
        best_split(right);
        leaves[best] = left;
        leaves.insert(leaves.begin() + static_cast<std::ptrdiff_t>(best) + 1, right);
    }
    for (std::size_t l = 0; l < leaves.size(); ++l)
        for (std::size_t r = leaves[l].lo; r < leaves[l].hi; ++r) codes[order[r]] = static_cast<double>(l);
    return codes;
}

// ---------------------------------------------------------------------------
// Expressions

class FeatureExpression {
public:
    enum class Node { Original, Apply, Bin };

    FeatureExpression() = default;

    static FeatureExpression original(std::string name) {
        auto n = std::make_shared<Data>();
        n->node = Node::Original;
        n->name = std::move(name);
        return FeatureExpression(std::move(n));
    }

    static FeatureExpression apply(OperatorId op, std::vector<FeatureExpression> children) {
        const std::size_t want = (is_binary_arith(op) || op == OperatorId::Cross) ? 2 : 1;
        if (is_identity(op)) throw ConfigError("identity operators do not form expressions");
        if (children.size() != want) throw ConfigError("operator '" + std::string(op_name(op)) + "' has wrong arity");
        auto n = std::make_shared<Data>();
        n->node = Node::Apply;
        n->op = op;
        int m = 0;
        for (const auto& c : children) m = std::max(m, c.order());
        n->order = 1 + m;
        n->children = std::move(children);
        return FeatureExpression(std::move(n));
    }

    // Discretization of a continuous operand. Keeps the child's order.
    static FeatureExpression bin(std::size_t leaves, FeatureExpression child) {
        auto n = std::make_shared<Data>();
        n->node = Node::Bin;
        n->leaves = leaves;
        n->order = child.order();
        n->children = {std::move(child)};
        return FeatureExpression(std::move(n));
    }

    bool valid() const { return data_ != nullptr; }
    Node node() const { return data_->node; }
    OperatorId op() const { return data_->op; }
    const std::string& name() const { return data_->name; }
    std::size_t leaves() const { return data_->leaves; }
    const std::vector<FeatureExpression>& children() const { return data_->children; }
    int order() const { return data_ ? data_->order : 0; }

    std::string to_string() const {
        switch (data_->node) {
        case Node::Original: return data_->name;
        case Node::Bin: return "bin" + std::to_string(data_->leaves) + "(" + data_->children[0].to_string() + ")";
        case Node::Apply: {
            std::string s(op_name(data_->op));
            s += '(';
            for (std::size_t i = 0; i < data_->children.size(); ++i) {
                if (i) s += ',';
                s += data_->children[i].to_string();
            }
            return s + ')';
        }
        }
        return {};
    }

    friend bool operator==(const FeatureExpression& a, const FeatureExpression& b) {
        return a.to_string() == b.to_string();
    }

private:
    struct Data {
        Node node = Node::Original;
        std::string name;
        OperatorId op = OperatorId::None;
        std::size_t leaves = 0;
        int order = 0;
        std::vector<FeatureExpression> children;
    };

    explicit FeatureExpression(std::shared_ptr<const Data> d) : data_(std::move(d)) {}

    std::shared_ptr<const Data> data_;
};

inline int expression_order(const FeatureExpression& e) { return e.order(); }

namespace detail {

class ExpressionParser {
public:
    explicit ExpressionParser(std::string_view text) : text_(text) {}

    FeatureExpression parse() {
        auto e = expr();
        if (pos_ != text_.size()) fail("trailing characters");
        return e;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw SchemaError("cannot parse expression '" + std::string(text_) + "' at offset " + std::to_string(pos_) +
                          ": " + what);
    }

    FeatureExpression expr() {
        std::size_t start = pos_;
        std::size_t p = pos_;
        while (p < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[p])) || text_[p] == '_')) ++p;
        if (p < text_.size() && text_[p] == '(' && p > start) {
            std::string_view word = text_.substr(start, p - start);
            pos_ = p + 1;
            std::vector<FeatureExpression> args{expr()};
            while (pos_ < text_.size() && text_[pos_] == ',') {
                ++pos_;
                args.push_back(expr());
            }
            if (pos_ >= text_.size() || text_[pos_] != ')') fail("expected ')'");
            ++pos_;
            if (word.size() > 3 && word.substr(0, 3) == "bin" &&
                std::all_of(word.begin() + 3, word.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
                if (args.size() != 1) fail("bin takes one operand");
                return FeatureExpression::bin(std::stoul(std::string(word.substr(3))), std::move(args[0]));
            }
            auto op = op_from_name(word);
            if (!op) fail("unknown operator '" + std::string(word) + "'");
            try {
                return FeatureExpression::apply(*op, std::move(args));
            } catch (const ConfigError& e) {
                fail(e.what());
            }
        }
        // original column name: everything up to the next ',' or ')'
        p = start;
        while (p < text_.size() && text_[p] != ',' && text_[p] != ')' && text_[p] != '(') ++p;
        if (p == start) fail("empty column name");
        pos_ = p;
        return FeatureExpression::original(std::string(text_.substr(start, p - start)));
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline FeatureExpression parse_expression(std::string_view text) { return detail::ExpressionParser(text).parse(); }

// Re-evaluate an expression against the dataset holding its original columns.
inline Column evaluate_expression(const FeatureExpression& e, const Dataset& originals) {
    Column out;
    out.name = e.to_string();
    switch (e.node()) {
    case FeatureExpression::Node::Original: {
        auto idx = originals.find_feature(e.name());
        if (!idx) throw SchemaError("expression refers to unknown column '" + e.name() + "'");
        out = originals.feature(*idx);
        return out;
    }
    case FeatureExpression::Node::Bin: {
        Column child = evaluate_expression(e.children()[0], originals);
        out.kind = ColumnKind::Discrete;
        out.values = bin_with_tree(child.values, originals.target().values, originals.task(), e.leaves());
        return out;
    }
    case FeatureExpression::Node::Apply: break;
    }
    std::vector<Column> args;
    for (const auto& c : e.children()) args.push_back(evaluate_expression(c, originals));
    if (e.op() == OperatorId::Cross) {
        out.kind = ColumnKind::Discrete;
        out.values = cross(args[0].values, args[1].values);
    } else if (is_unary(e.op())) {
        out.kind = ColumnKind::Continuous;
        out.values = apply_unary(args[0].values, e.op());
    } else {
        out.kind = ColumnKind::Continuous;
        out.values = apply_binary(args[0].values, args[1].values, e.op());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Partner selection

inline double pearson(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0 || sbb <= 0) return 0;
    double r = sab / std::sqrt(saa * sbb);
    return std::isfinite(r) ? r : 0;
}

// Chooses the second operand of binary and cross operators. Continuous
// partners maximize |Pearson correlation| with the focal feature; categorical
// partners maximize normalized mutual information, where a continuous
// candidate is first binned against the target. Ties go to the lowest index.
class PartnerSelector {
public:
    explicit PartnerSelector(const Dataset& d, std::size_t bin_leaves = kDefaultBinLeaves)
        : d_(d), leaves_(bin_leaves), binned_(d.feature_count()) {}

    std::optional<std::size_t> select(std::size_t focal, ColumnKind needed) {
        const Column& f = d_.feature(focal);
        std::optional<std::size_t> best;
        double best_score = -1;
        for (std::size_t j = 0; j < d_.feature_count(); ++j) {
            if (j == focal) continue;
            const Column& c = d_.feature(j);
            double score;
            if (needed == ColumnKind::Continuous) {
                if (c.kind != ColumnKind::Continuous) continue;
                score = std::abs(pearson(f.values, c.values));
            } else {
                score = normalized_mutual_information(categorical_view(focal), categorical_view(j));
            }
            if (score > best_score) {
                best_score = score;
                best = j;
            }
        }
        return best;
    }

    // Column j as category codes (binned when continuous).
    Variable categorical_view(std::size_t j) {
        const Column& c = d_.feature(j);
        if (c.kind == ColumnKind::Discrete) return {c.values, true};
        return {binned(j), true};
    }

    const std::vector<double>& binned(std::size_t j) {
        if (!binned_[j])
            binned_[j] = bin_with_tree(d_.feature(j).values, d_.target().values, d_.task(), leaves_);
        return *binned_[j];
    }

    std::size_t bin_leaves() const { return leaves_; }

private:
    const Dataset& d_;
    std::size_t leaves_;
    std::vector<std::optional<std::vector<double>>> binned_;
};

inline std::optional<std::size_t> select_partner(const Dataset& d, std::size_t focal, ColumnKind needed) {
    PartnerSelector sel(d);
    return sel.select(focal, needed);
}

// ---------------------------------------------------------------------------
// Feature generation

struct GeneratedFeature {
    Column column; // name = canonical expression string
    FeatureExpression expr;
    std::size_t parent = 0;
};

// Apply `op` to feature `focal` of `d` (with `partner` for two-operand
// operators). `exprs[i]` is the expression of feature i. Identity operators
// return nullopt.
inline std::optional<GeneratedFeature> generate_feature(const Dataset& d, const std::vector<FeatureExpression>& exprs,
                                                        std::size_t focal, OperatorId op,
                                                        std::optional<std::size_t> partner, PartnerSelector& sel) {
    if (is_identity(op)) return std::nullopt;
    const Column& f = d.feature(focal);
    GeneratedFeature g;
    g.parent = focal;
    if (is_unary(op)) {
        g.column.values = apply_unary(f.values, op);
        g.column.kind = ColumnKind::Continuous;
        g.expr = FeatureExpression::apply(op, {exprs[focal]});
    } else {
        if (!partner) throw ConfigError("operator '" + std::string(op_name(op)) + "' needs a partner");
        const Column& p = d.feature(*partner);
        if (op == OperatorId::Cross) {
            FeatureExpression pe = exprs[*partner];
            if (p.kind == ColumnKind::Continuous) pe = FeatureExpression::bin(sel.bin_leaves(), pe);
            g.column.values = cross(f.values, sel.categorical_view(*partner).values);
            g.column.kind = ColumnKind::Discrete;
            g.expr = FeatureExpression::apply(op, {exprs[focal], pe});
        } else {
            g.column.values = apply_binary(f.values, p.values, op);
            g.column.kind = ColumnKind::Continuous;
            g.expr = FeatureExpression::apply(op, {exprs[focal], exprs[*partner]});
        }
    }
    g.column.name = g.expr.to_string();
    return g;
}

} // namespace featrl
