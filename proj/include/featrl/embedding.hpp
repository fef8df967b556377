#pragma once

// Dataset -> RL state. Each feature (and the target) becomes one token:
// a linear projection of its standardized descriptor plus a sinusoidal
// kind marker, optionally followed by self-attention encoder blocks.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "featrl/nnkernel.hpp"
#include "featrl/tabular.hpp"

namespace featrl {

struct EncodingConfig {
    double gamma_enc = 1.0;   // amplitude of the kind marker
    std::size_t d_model = 8;
    std::size_t heads = 8;
    std::size_t hidden = 128; // feed-forward width inside the block
    std::size_t depth = 1;    // number of encoder blocks
    // Tokens are the standardized descriptors plus the kind marker, with no
    // learned projection and no attention (requires d_model == 8).
    bool raw_tokens = false;
};

// Kind marker: gamma * sin(p_f / 10^(i / (d_model - 1))), with p_f = -1 for
// categorical features, 1 for continuous features and 0 for the target.
inline double feature_encoding(int p_f, std::size_t i, const EncodingConfig& cfg) {
    const double denom = cfg.d_model > 1 ? static_cast<double>(cfg.d_model - 1) : 1.0;
    return cfg.gamma_enc * std::sin(static_cast<double>(p_f) / std::pow(10.0, static_cast<double>(i) / denom));
}

inline int kind_code(ColumnKind k) {
    switch (k) {
    case ColumnKind::Discrete: return -1;
    case ColumnKind::Continuous: return 1;
    case ColumnKind::Target: return 0;
    }
    return 0;
}

// Encoder input for one dataset: one descriptor row per feature followed by
// the target row, z-scored per statistic across the rows.
struct StateInput {
    nn::Matrix descriptors;
    std::vector<int> kinds;

    std::size_t tokens() const { return descriptors.rows; }
};

inline StateInput build_state_input(const Dataset& d, bool categorical_as_continuous = false) {
    const std::size_t t = d.feature_count() + 1;
    StateInput s;
    s.descriptors = nn::Matrix(t, kDescriptorSize);
    s.kinds.resize(t);
    for (std::size_t i = 0; i < t; ++i) {
        auto desc = column_descriptor(d, i);
        std::copy(desc.begin(), desc.end(), s.descriptors.row(i).begin());
        if (i == d.feature_count())
            s.kinds[i] = 0;
        else
            s.kinds[i] = categorical_as_continuous ? 1 : kind_code(d.feature(i).kind);
    }
    // per-statistic sums over sorted values
    std::vector<double> buf(t);
    auto sorted_sum = [&buf] {
        std::sort(buf.begin(), buf.end());
        double acc = 0;
        for (double v : buf) acc += v;
        return acc;
    };
    for (std::size_t c = 0; c < kDescriptorSize; ++c) {
        for (std::size_t r = 0; r < t; ++r) buf[r] = s.descriptors(r, c);
        const double mean = sorted_sum() / static_cast<double>(t);
        for (std::size_t r = 0; r < t; ++r) buf[r] = (s.descriptors(r, c) - mean) * (s.descriptors(r, c) - mean);
        const double var = sorted_sum() / static_cast<double>(t);
        const double sd = std::sqrt(var);
        for (std::size_t r = 0; r < t; ++r) {
            double z = sd > 1e-12 ? (s.descriptors(r, c) - mean) / sd : 0.0;
            s.descriptors(r, c) = std::isfinite(z) ? z : 0.0;
        }
    }
    return s;
}

class Encoder {
public:
    struct Cache {
        std::vector<nn::EncoderBlock::Cache> blocks;
    };

    Encoder() = default;
    Encoder(const EncodingConfig& cfg, std::mt19937_64& rng)
        : cfg_(cfg) {
        if (cfg.raw_tokens) {
            if (cfg.d_model != kDescriptorSize)
                throw ConfigError("raw descriptor tokens need d_model == " + std::to_string(kDescriptorSize));
            return;
        }
        proj_ = nn::Linear(kDescriptorSize, cfg.d_model, true, rng);
        for (std::size_t b = 0; b < cfg.depth; ++b) blocks_.emplace_back(cfg.d_model, cfg.heads, cfg.hidden, rng);
    }

    const EncodingConfig& config() const { return cfg_; }

    // tokens x d_model embedding
    nn::Matrix forward(const StateInput& s, Cache* cache = nullptr) const {
        nn::Matrix x = cfg_.raw_tokens ? s.descriptors : proj_.forward(s.descriptors);
        for (std::size_t r = 0; r < x.rows; ++r)
            for (std::size_t i = 0; i < cfg_.d_model; ++i) x(r, i) += feature_encoding(s.kinds[r], i, cfg_);
        if (cache) cache->blocks.resize(blocks_.size());
        for (std::size_t b = 0; b < blocks_.size(); ++b) x = blocks_[b].forward(x, cache ? &cache->blocks[b] : nullptr);
        return x;
    }

    void backward(const StateInput& s, const Cache& cache, nn::Matrix dtokens) {
        if (cfg_.raw_tokens) return;
        for (std::size_t b = blocks_.size(); b-- > 0;) dtokens = blocks_[b].backward(cache.blocks[b], dtokens);
        proj_.backward(s.descriptors, dtokens);
    }

    void collect(nn::ParamList& out, const std::string& prefix) {
        if (cfg_.raw_tokens) return;
        proj_.collect(out, prefix + ".proj");
        for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, prefix + ".block" + std::to_string(b));
    }

    const std::vector<nn::EncoderBlock>& blocks() const { return blocks_; }

private:
    EncodingConfig cfg_;
    nn::Linear proj_;
    std::vector<nn::EncoderBlock> blocks_;
};

struct StateEmbedding {
    nn::Matrix tokens; // (feature_count + 1) x d_model, target last
};

inline StateEmbedding encode_dataset(const Dataset& d, const Encoder& enc, bool categorical_as_continuous = false) {
    return {enc.forward(build_state_input(d, categorical_as_continuous))};
}

} // namespace featrl
