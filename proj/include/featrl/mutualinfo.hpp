#pragma once

// Plug-in entropy and mutual information estimators (natural log units).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "featrl/error.hpp"
#include "featrl/tabular.hpp"

namespace featrl {

// Continuous columns are discretized into at most this many equal-frequency bins.
inline constexpr std::size_t kMiBins = 16;

// A column as seen by the estimators: its values and whether they are
// category codes or reals to be discretized.
struct Variable {
    std::span<const double> values;
    bool discrete = true;
};

inline Variable as_variable(const Column& c, bool target_discrete = false) {
    bool discrete = c.kind == ColumnKind::Discrete || (c.kind == ColumnKind::Target && target_discrete);
    return {c.values, discrete};
}

// Compact integer codes for a variable (first-appearance relabeling for
// discrete input, quantile bins for continuous input).
inline std::vector<int> discretize(const Variable& v) {
    if (!v.discrete) return quantile_codes(v.values, kMiBins);
    std::vector<int> codes(v.values.size());
    std::unordered_map<double, int> seen;
    for (std::size_t i = 0; i < v.values.size(); ++i) {
        auto [it, inserted] = seen.try_emplace(v.values[i], static_cast<int>(seen.size()));
        codes[i] = it->second;
    }
    return codes;
}

namespace detail {

inline std::vector<std::size_t> count_codes(const std::vector<int>& codes) {
    int m = codes.empty() ? -1 : *std::max_element(codes.begin(), codes.end());
    std::vector<std::size_t> counts(static_cast<std::size_t>(m + 1), 0);
    for (int c : codes) ++counts[static_cast<std::size_t>(c)];
    return counts;
}

inline double entropy_of_codes(const std::vector<int>& codes) {
    const double n = static_cast<double>(codes.size());
    double h = 0;
    for (std::size_t c : count_codes(codes)) {
        if (c == 0) continue;
        double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return std::max(0.0, h);
}

inline double mi_of_codes(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw ConfigError("mutual information: length mismatch");
    if (a.empty()) throw ConfigError("mutual information: empty input");
    // One evaluation order for (a, b) and (b, a).
    if (b < a) return mi_of_codes(b, a);

    const double n = static_cast<double>(a.size());
    auto ca = count_codes(a);
    auto cb = count_codes(b);
    std::vector<std::uint64_t> keys(a.size());
    const std::uint64_t width = cb.size();
    for (std::size_t i = 0; i < a.size(); ++i)
        keys[i] = static_cast<std::uint64_t>(a[i]) * width + static_cast<std::uint64_t>(b[i]);
    std::sort(keys.begin(), keys.end());

    double mi = 0;
    for (std::size_t i = 0; i < keys.size();) {
        std::size_t j = i;
        while (j < keys.size() && keys[j] == keys[i]) ++j;
        double nxy = static_cast<double>(j - i);
        double nx = static_cast<double>(ca[keys[i] / width]);
        double ny = static_cast<double>(cb[keys[i] % width]);
        mi += (nxy / n) * std::log(n * nxy / (nx * ny));
        i = j;
    }
    return std::max(0.0, mi);
}

} // namespace detail

inline double entropy(const Variable& a) {
    if (a.values.empty()) throw ConfigError("entropy: empty input");
    return detail::entropy_of_codes(discretize(a));
}

inline double entropy(std::span<const double> codes) { return entropy(Variable{codes, true}); }

inline double mutual_information(const Variable& a, const Variable& b) {
    if (a.values.size() != b.values.size()) throw ConfigError("mutual information: length mismatch");
    return detail::mi_of_codes(discretize(a), discretize(b));
}

// I(a,b) / sqrt(H(a) H(b)); zero when either side is constant.
inline double normalized_mutual_information(const Variable& a, const Variable& b) {
    auto ca = discretize(a);
    auto cb = discretize(b);
    double ha = detail::entropy_of_codes(ca);
    double hb = detail::entropy_of_codes(cb);
    if (ha <= 0 || hb <= 0) return 0;
    return detail::mi_of_codes(ca, cb) / std::sqrt(ha * hb);
}

} // namespace featrl
