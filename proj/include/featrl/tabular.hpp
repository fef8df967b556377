#pragma once

// Column-typed tabular data: CSV loading against a schema, stratified fold
// plans and fixed-length per-column descriptors.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "featrl/error.hpp"

namespace featrl {

enum class ColumnKind { Discrete, Continuous, Target };
enum class Task { Classification, Regression };

inline const char* to_string(ColumnKind k) {
    switch (k) {
    case ColumnKind::Discrete: return "discrete";
    case ColumnKind::Continuous: return "continuous";
    case ColumnKind::Target: return "target";
    }
    return "?";
}

inline const char* to_string(Task t) {
    return t == Task::Classification ? "classification" : "regression";
}

struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::Continuous;
    std::vector<double> values;
    // Code -> original label for columns loaded as categorical. Empty for
    // continuous columns and for generated categorical columns.
    std::vector<std::string> categories;

    // Number of category codes (max code + 1); 0 for continuous columns.
    std::size_t cardinality() const {
        if (kind == ColumnKind::Continuous || values.empty()) return 0;
        double m = *std::max_element(values.begin(), values.end());
        return static_cast<std::size_t>(m) + 1;
    }
};

// Feature columns plus exactly one target column. Immutable once built.
class Dataset {
public:
    Dataset() = default;

    Dataset(std::vector<Column> features, Column target, Task task)
        : features_(std::move(features)), target_(std::move(target)), task_(task) {
        validate();
    }

    Task task() const { return task_; }
    bool classification() const { return task_ == Task::Classification; }
    std::size_t rows() const { return target_.values.size(); }
    std::size_t feature_count() const { return features_.size(); }
    const std::vector<Column>& features() const { return features_; }
    const Column& feature(std::size_t i) const { return features_.at(i); }
    const Column& target() const { return target_; }

    // Number of target classes (classification only).
    std::size_t class_count() const { return classification() ? cardinality_of(target_.values) : 0; }

    std::optional<std::size_t> find_feature(std::string_view name) const {
        for (std::size_t i = 0; i < features_.size(); ++i)
            if (features_[i].name == name) return i;
        return std::nullopt;
    }

    Dataset with_features(std::vector<Column> features) const {
        return Dataset(std::move(features), target_, task_);
    }

private:
    static std::size_t cardinality_of(const std::vector<double>& v) {
        if (v.empty()) return 0;
        return static_cast<std::size_t>(*std::max_element(v.begin(), v.end())) + 1;
    }

    static void check_codes(const Column& c) {
        for (double v : c.values) {
            if (v < 0 || v != std::floor(v))
                throw SchemaError("column '" + c.name + "': categorical codes must be non-negative integers");
        }
    }

    void validate() const {
        const std::size_t n = target_.values.size();
        if (n < 2) throw SchemaError("dataset needs at least 2 rows");
        if (target_.kind != ColumnKind::Target) throw SchemaError("target column must have kind 'target'");
        for (const auto& c : features_) {
            if (c.kind == ColumnKind::Target) throw SchemaError("multiple target columns ('" + c.name + "')");
            if (c.values.size() != n) throw SchemaError("column '" + c.name + "' has a different length than the target");
            for (double v : c.values)
                if (!std::isfinite(v)) throw SchemaError("column '" + c.name + "' contains a non-finite value");
            if (c.kind == ColumnKind::Discrete) check_codes(c);
        }
        for (double v : target_.values)
            if (!std::isfinite(v)) throw SchemaError("target column contains a non-finite value");
        if (task_ == Task::Classification) check_codes(target_);
    }

    std::vector<Column> features_;
    Column target_;
    Task task_ = Task::Classification;
};

// ---------------------------------------------------------------------------
// Schema + CSV

// Maps column name -> kind. The target is declared as `target:discrete`
// (classification) or `target:continuous` / `target` (regression).
struct SchemaSpec {
    std::vector<std::pair<std::string, ColumnKind>> columns;
    std::string target;
    bool target_discrete = false;

    std::optional<ColumnKind> kind_of(std::string_view name) const {
        for (const auto& [n, k] : columns)
            if (n == name) return k;
        return std::nullopt;
    }

    Task task() const { return target_discrete ? Task::Classification : Task::Regression; }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Split one CSV record. Supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline std::optional<double> parse_real(const std::string& s) {
    if (s.empty()) return std::nullopt;
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        return std::nullopt;
    }
    if (pos != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

} // namespace detail

inline SchemaSpec parse_schema(std::istream& in) {
    SchemaSpec spec;
    std::string line;
    int lineno = 0;
    int targets = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string t = detail::trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw SchemaError("schema line " + std::to_string(lineno) + ": expected 'name = kind'");
        std::string name = detail::trim(std::string_view(t).substr(0, eq));
        std::string kind = detail::lower(detail::trim(std::string_view(t).substr(eq + 1)));
        if (name.empty()) throw SchemaError("schema line " + std::to_string(lineno) + ": empty column name");
        if (spec.kind_of(name)) throw SchemaError("schema line " + std::to_string(lineno) + ": duplicate column '" + name + "'");
        ColumnKind k;
        if (kind == "discrete") {
            k = ColumnKind::Discrete;
        } else if (kind == "continuous") {
            k = ColumnKind::Continuous;
        } else if (kind == "target" || kind == "target:continuous") {
            k = ColumnKind::Target;
            spec.target_discrete = false;
        } else if (kind == "target:discrete") {
            k = ColumnKind::Target;
            spec.target_discrete = true;
        } else {
            throw SchemaError("schema line " + std::to_string(lineno) + ": unknown kind '" + kind + "'");
        }
        if (k == ColumnKind::Target) {
            ++targets;
            spec.target = name;
        }
        spec.columns.emplace_back(name, k);
    }
    if (targets != 1)
        throw SchemaError("schema must declare exactly one target column (found " + std::to_string(targets) + ")");
    return spec;
}

inline SchemaSpec load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open schema file '" + path + "'");
    return parse_schema(in);
}

// Parse CSV text against a schema. Discrete columns (and a discrete target)
// are label-encoded by first appearance.
inline Dataset read_csv(std::istream& in, const SchemaSpec& schema) {
    std::string line;
    if (!std::getline(in, line) || detail::trim(line).empty()) throw SchemaError("zero rows: input has no header");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3); // UTF-8 BOM
    auto header = detail::split_csv_line(line);

    for (const auto& h : header) {
        if (!schema.kind_of(h)) throw SchemaError("column '" + h + "' is not declared in the schema");
    }
    for (const auto& [name, kind] : schema.columns) {
        if (std::find(header.begin(), header.end(), name) == header.end())
            throw SchemaError("missing column '" + name + "' declared in the schema");
    }

    const std::size_t width = header.size();
    std::vector<Column> cols(width);
    std::vector<std::unordered_map<std::string, double>> codebooks(width);
    for (std::size_t j = 0; j < width; ++j) {
        cols[j].name = header[j];
        cols[j].kind = *schema.kind_of(header[j]);
    }
    auto is_categorical = [&](std::size_t j) {
        return cols[j].kind == ColumnKind::Discrete || (cols[j].kind == ColumnKind::Target && schema.target_discrete);
    };

    std::size_t row = 0;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != width)
            throw SchemaError("line " + std::to_string(lineno) + ": expected " + std::to_string(width) + " cells, got " +
                              std::to_string(cells.size()));
        for (std::size_t j = 0; j < width; ++j) {
            const std::string& cell = cells[j];
            if (cell.empty())
                throw SchemaError("line " + std::to_string(lineno) + ", column '" + header[j] + "': missing value");
            if (is_categorical(j)) {
                auto [it, inserted] = codebooks[j].try_emplace(cell, static_cast<double>(codebooks[j].size()));
                if (inserted) cols[j].categories.push_back(cell);
                cols[j].values.push_back(it->second);
            } else {
                auto v = detail::parse_real(cell);
                if (!v)
                    throw SchemaError("line " + std::to_string(lineno) + ", column '" + header[j] +
                                      "': cannot parse '" + cell + "' as a number");
                cols[j].values.push_back(*v);
            }
        }
        ++row;
    }
    if (row == 0) throw SchemaError("zero rows");

    std::vector<Column> features;
    Column target;
    for (auto& c : cols) {
        if (c.kind == ColumnKind::Target)
            target = std::move(c);
        else
            features.push_back(std::move(c));
    }
    return Dataset(std::move(features), std::move(target), schema.task());
}

inline Dataset load_csv(const std::string& path, const SchemaSpec& schema) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open data file '" + path + "'");
    return read_csv(in, schema);
}

// ---------------------------------------------------------------------------
// Quantile coding

// Equal-frequency bin codes in 0..B-1 with B = min(max_bins, distinct values).
// Tied values always share a bin; codes are compacted to 0..k-1.
inline std::vector<int> quantile_codes(std::span<const double> values, std::size_t max_bins) {
    const std::size_t n = values.size();
    std::vector<int> codes(n, 0);
    if (n == 0) return codes;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::size_t distinct = 1;
    for (std::size_t r = 1; r < n; ++r)
        if (values[order[r]] != values[order[r - 1]]) ++distinct;
    const std::size_t bins = std::max<std::size_t>(1, std::min(max_bins, distinct));

    std::size_t first_rank = 0;
    int last_raw = -1, next_code = -1;
    for (std::size_t r = 0; r < n; ++r) {
        if (r > 0 && values[order[r]] != values[order[r - 1]]) first_rank = r;
        int raw = static_cast<int>(first_rank * bins / n);
        if (raw != last_raw) {
            ++next_code;
            last_raw = raw;
        }
        codes[order[r]] = next_code;
    }
    return codes;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
    std::size_t k = 0;
    std::vector<std::size_t> assignments; // row -> fold index

    std::vector<std::size_t> fold_rows(std::size_t fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < assignments.size(); ++i)
            if (assignments[i] == fold) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> train_rows(std::size_t fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < assignments.size(); ++i)
            if (assignments[i] != fold) out.push_back(i);
        return out;
    }
};

// Stratified k-fold plan. Classification stratifies on the class; regression
// on min(5, distinct) quantile bins of the target. Rows of each stratum are
// shuffled and dealt round-robin with a counter shared across strata, which
// keeps both fold sizes and per-stratum counts within 1 of each other.
inline FoldPlan split_folds(const Dataset& d, std::size_t k, std::uint64_t seed) {
    const std::size_t n = d.rows();
    if (k < 2) throw ConfigError("fold count must be at least 2");
    if (n < k) throw DataError("fewer rows (" + std::to_string(n) + ") than folds (" + std::to_string(k) + ")");

    std::vector<int> strata;
    if (d.classification()) {
        strata.reserve(n);
        for (double v : d.target().values) strata.push_back(static_cast<int>(v));
    } else {
        strata = quantile_codes(d.target().values, 5);
    }
    const int n_strata = *std::max_element(strata.begin(), strata.end()) + 1;
    std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(n_strata));
    for (std::size_t i = 0; i < n; ++i) groups[static_cast<std::size_t>(strata[i])].push_back(i);

    if (d.classification()) {
        for (std::size_t c = 0; c < groups.size(); ++c) {
            if (groups[c].size() < k) {
                const auto& cats = d.target().categories;
                std::string label = c < cats.size() ? cats[c] : std::to_string(c);
                throw DataError("class '" + label + "' has " + std::to_string(groups[c].size()) +
                                " members, fewer than the fold count " + std::to_string(k));
            }
        }
    }

    std::mt19937_64 rng(seed);
    FoldPlan plan;
    plan.k = k;
    plan.assignments.assign(n, 0);
    std::size_t counter = 0;
    for (auto& g : groups) {
        std::shuffle(g.begin(), g.end(), rng);
        for (std::size_t row : g) plan.assignments[row] = counter++ % k;
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Descriptors

inline constexpr std::size_t kDescriptorSize = 8;
using ColumnDescriptor = std::array<double, kDescriptorSize>;

enum DescriptorSlot : std::size_t { kMean = 0, kStd, kMin, kMax, kQ25, kQ50, kQ75, kDistinctRatio };

namespace detail {

// Linear-interpolated quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
    if (sorted.size() == 1) return sorted[0];
    double pos = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = std::min(lo + 1, sorted.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline ColumnDescriptor summarize(std::vector<double> v, double distinct_ratio) {
    ColumnDescriptor out{};
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    double mean = 0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n;
    const double sd = std::sqrt(var);
    out[kMean] = mean;
    if (sd > 0) {
        out[kStd] = sd;
        out[kMin] = v.front();
        out[kMax] = v.back();
        out[kQ25] = sorted_quantile(v, 0.25);
        out[kQ50] = sorted_quantile(v, 0.50);
        out[kQ75] = sorted_quantile(v, 0.75);
    } else {
        // degenerate: location only, dispersion slots stay zero
        out[kMin] = out[kMax] = out[kQ25] = out[kQ50] = out[kQ75] = mean;
    }
    out[kDistinctRatio] = distinct_ratio;
    for (double& x : out)
        if (!std::isfinite(x)) x = 0;
    return out;
}

} // namespace detail

// Eight order-free statistics of a column: mean, std, min, max, quartiles and
// distinct-value ratio. Categorical columns are summarized through their
// category frequency vector.
inline ColumnDescriptor describe_values(std::span<const double> values, bool categorical) {
    const std::size_t n = values.size();
    std::map<double, std::size_t> counts;
    for (double v : values) ++counts[v];
    const double distinct_ratio = static_cast<double>(counts.size()) / static_cast<double>(n);
    if (!categorical) return detail::summarize(std::vector<double>(values.begin(), values.end()), distinct_ratio);
    std::vector<double> freqs;
    freqs.reserve(counts.size());
    for (const auto& [v, c] : counts) freqs.push_back(static_cast<double>(c) / static_cast<double>(n));
    return detail::summarize(std::move(freqs), distinct_ratio);
}

// Descriptor of feature `col`; col == feature_count() selects the target.
inline ColumnDescriptor column_descriptor(const Dataset& d, std::size_t col) {
    if (col == d.feature_count()) return describe_values(d.target().values, d.classification());
    const Column& c = d.feature(col);
    return describe_values(c.values, c.kind == ColumnKind::Discrete);
}

} // namespace featrl
