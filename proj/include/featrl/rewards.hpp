#pragma once

#include <cmath>
#include <optional>
#include <span>

#include "featrl/agents.hpp"
#include "featrl/error.hpp"
#include "featrl/mutualinfo.hpp"

namespace featrl {

struct RewardWeights {
    double alpha = 0.1;  // deletion term
    double beta = 0.1;   // replacement term
    double gamma = 1.0;  // downstream improvement term
    double delta = 0.01; // redundancy penalty

    void validate() const {
        if (!(alpha > 0 && beta > 0 && gamma > 0 && delta > 0))
            throw ConfigError("reward weights must be strictly positive");
    }
};

// Unconditional: every component contributes regardless of the action taken.
// Masked: only the component matching the taken action (plus improvement).
enum class RewardMode { Unconditional, Masked };

struct RewardBreakdown {
    double r_del = 0;
    double r_rep = 0;
    double r_add = 0;
    double r_imp = 0;
    double r2 = 0;
};

inline double generation_reward(double score_new, double score_ori) { return score_new - score_ori; }

inline double combine_rewards(const RewardBreakdown& b, const RewardWeights& w) {
    return w.alpha * b.r_del + w.beta * b.r_rep + w.gamma * b.r_imp - w.delta * b.r_add;
}

inline double combine_rewards(const RewardBreakdown& b, const RewardWeights& w, RewardMode mode, DiscAction taken) {
    if (mode == RewardMode::Unconditional) return combine_rewards(b, w);
    double r = w.gamma * b.r_imp;
    switch (taken) {
    case DiscAction::Delete: r += w.alpha * b.r_del; break;
    case DiscAction::Replace: r += w.beta * b.r_rep; break;
    case DiscAction::Add: r -= w.delta * b.r_add; break;
    }
    return r;
}

// Reward components for one (original, generated) pair. An absent generated
// column (identity action) leaves the information terms at zero.
inline RewardBreakdown discrimination_reward(const Variable& f_ori, const std::optional<Variable>& f_new,
                                             const Variable& y, double score_new, double score_ori,
                                             const RewardWeights& w) {
    RewardBreakdown b;
    if (f_new) {
        if (f_new->values.size() != f_ori.values.size() || y.values.size() != f_ori.values.size())
            throw ConfigError("discrimination reward: length mismatch");
        b.r_del = mutual_information(f_ori, y) - mutual_information(*f_new, y);
        b.r_rep = -b.r_del;
        b.r_add = mutual_information(f_ori, *f_new);
    } else if (y.values.size() != f_ori.values.size()) {
        throw ConfigError("discrimination reward: length mismatch");
    }
    b.r_imp = score_new - score_ori;
    b.r2 = combine_rewards(b, w);
    return b;
}

} // namespace featrl
