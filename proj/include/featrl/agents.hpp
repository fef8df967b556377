#pragma once

// Deep Q-learning agents. One value network is shared across features: each
// feature token is scored independently, and the per-feature decisions are
// concatenated into the agent's action sequence.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "featrl/embedding.hpp"
#include "featrl/nnkernel.hpp"
#include "featrl/transforms.hpp"

namespace featrl {

enum class DiscAction : int { Delete = 0, Replace = 1, Add = 2 };
inline constexpr std::size_t kDiscActions = 3;

inline const char* to_string(DiscAction a) {
    switch (a) {
    case DiscAction::Delete: return "delete";
    case DiscAction::Replace: return "replace";
    case DiscAction::Add: return "add";
    }
    return "?";
}

// Heads of the generation network.
inline constexpr std::size_t kContinuousHead = 0;
inline constexpr std::size_t kDiscreteHead = 1;

inline std::size_t head_for(ColumnKind k) { return k == ColumnKind::Discrete ? kDiscreteHead : kContinuousHead; }

struct GenAction {
    OperatorId op = OperatorId::None;
    std::optional<std::size_t> partner;
};

using OperatorSequence = std::vector<GenAction>;
using DiscriminatorSequence = std::vector<DiscAction>;

// One per-feature experience record. States are kept as encoder inputs and the
// TD loss backpropagates into the encoder.
struct Transition {
    std::shared_ptr<const StateInput> state;
    std::size_t row = 0;
    std::size_t head = 0;
    int op = -1; // operator embedding id (discrimination agent only)
    std::size_t action = 0;
    double reward = 0;
    std::shared_ptr<const StateInput> next_state;
    std::size_t next_row = 0;
    std::size_t next_head = 0;
    int next_op = -1;
    bool terminal = true;
};

// Fixed-capacity FIFO of transitions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 24) : capacity_(capacity) {
        if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
        items_.reserve(capacity);
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    void push(Transition t) {
        if (!std::isfinite(t.reward)) throw ConfigError("transition reward must be finite");
        if (items_.size() < capacity_) {
            items_.push_back(std::move(t));
        } else {
            items_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
    }

    // i = 0 is the oldest stored transition.
    const Transition& at(std::size_t i) const { return items_.at((head_ + i) % items_.size()); }

    // Uniform sample without replacement.
    std::vector<Transition> sample(std::size_t batch, std::mt19937_64& rng) const {
        if (items_.empty()) throw ConfigError("cannot sample from an empty replay buffer");
        if (batch > items_.size()) throw ConfigError("batch larger than replay buffer contents");
        std::vector<std::size_t> idx(items_.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < batch; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        std::vector<Transition> out;
        out.reserve(batch);
        for (std::size_t i = 0; i < batch; ++i) out.push_back(items_[idx[i]]);
        return out;
    }

private:
    std::size_t capacity_;
    std::size_t head_ = 0;
    std::vector<Transition> items_;
};

// Exponential decay from `start` reaching `end` at `reach_fraction` of the
// epochs, then held at `end`.
struct EpsilonSchedule {
    double start = 0.9;
    double end = 0.1;
    double reach_fraction = 0.8;

    double at(std::size_t epoch, std::size_t total_epochs) const {
        const double horizon = std::max(1e-9, reach_fraction * static_cast<double>(total_epochs));
        const double rate = std::pow(end / start, 1.0 / horizon);
        return std::max(end, start * std::pow(rate, static_cast<double>(epoch)));
    }
};

struct AgentConfig {
    EncodingConfig encoding;
    std::size_t hidden = 128;
    std::vector<std::size_t> heads;
    bool op_embedding = false; // append a learned operator embedding to each token
    std::size_t op_dim = 8;
    nn::AdamConfig adam;
    std::size_t target_sync = 0; // 0: bootstrap from the live network

    static AgentConfig generation(const EncodingConfig& enc) {
        AgentConfig c;
        c.encoding = enc;
        c.heads = {kContinuousOps, kDiscreteOps};
        return c;
    }

    static AgentConfig discrimination(const EncodingConfig& enc) {
        AgentConfig c;
        c.encoding = enc;
        c.heads = {kDiscActions};
        c.op_embedding = true;
        return c;
    }
};

// Encoder + (optional) operator embedding table + multi-head Q network.
struct QNetwork {
    Encoder encoder;
    nn::Mlp mlp;
    std::optional<nn::Param> op_table;

    QNetwork() = default;
    QNetwork(const AgentConfig& cfg, std::mt19937_64& rng) : encoder(cfg.encoding, rng) {
        std::size_t in = cfg.encoding.d_model;
        if (cfg.op_embedding) {
            op_table.emplace(kOperatorCount, cfg.op_dim);
            nn::glorot_uniform(op_table->value, kOperatorCount, cfg.op_dim, rng);
            in += cfg.op_dim;
        }
        mlp = nn::Mlp(in, cfg.hidden, cfg.heads, rng);
    }

    std::vector<double> input_for(std::span<const double> token, int op) const {
        std::vector<double> x(token.begin(), token.end());
        if (op_table) {
            if (op < 0 || static_cast<std::size_t>(op) >= kOperatorCount) throw ConfigError("operator id out of range");
            auto e = op_table->value.row(static_cast<std::size_t>(op));
            x.insert(x.end(), e.begin(), e.end());
        }
        return x;
    }

    std::vector<double> q_from_token(std::span<const double> token, std::size_t head, int op) const {
        return mlp.forward(input_for(token, op), head);
    }

    std::vector<double> q_values(const StateInput& s, std::size_t row, std::size_t head, int op) const {
        nn::Matrix tokens = encoder.forward(s);
        return q_from_token(tokens.row(row), head, op);
    }

    void collect(nn::ParamList& out) {
        encoder.collect(out, "encoder");
        if (op_table) out.push_back({"op_table", &*op_table});
        mlp.collect(out, "qnet");
    }
};

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

class QAgent {
public:
    QAgent() = default;
    QAgent(const AgentConfig& cfg, std::uint64_t seed) : cfg_(cfg), adam_(cfg.adam) {
        std::mt19937_64 rng(seed);
        net_ = QNetwork(cfg, rng);
        if (cfg.target_sync > 0) target_ = net_;
    }

    const AgentConfig& config() const { return cfg_; }
    const QNetwork& network() const { return net_; }
    QNetwork& network() { return net_; }
    std::uint64_t updates() const { return updates_; }

    nn::Matrix encode(const StateInput& s) const { return net_.encoder.forward(s); }

    std::vector<double> q_values(const StateInput& s, std::size_t row, std::size_t head, int op = -1) const {
        return net_.q_values(s, row, head, op);
    }

    // Mean squared TD error over the batch, followed by one Adam step.
    // Targets bootstrap from max_a' Q(s', a') held constant.
    double td_update(std::span<const Transition> batch, double discount) {
        if (batch.empty()) throw ConfigError("td_update: empty batch");
        const QNetwork& boot = target_ ? *target_ : net_;
        std::vector<double> targets;
        targets.reserve(batch.size());
        for (const auto& t : batch) {
            double y = t.reward;
            if (!t.terminal) {
                auto q_next = boot.q_values(*t.next_state, t.next_row, t.next_head, t.next_op);
                y += discount * *std::max_element(q_next.begin(), q_next.end());
            }
            targets.push_back(y);
        }

        nn::ParamList params;
        net_.collect(params);
        nn::zero_grads(params);
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        double loss = 0;
        const std::size_t d = cfg_.encoding.d_model;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Transition& t = batch[b];
            Encoder::Cache ecache;
            nn::Matrix tokens = net_.encoder.forward(*t.state, &ecache);
            nn::Mlp::Cache mcache;
            nn::Matrix x = nn::Matrix::row_vector(net_.input_for(tokens.row(t.row), t.op));
            nn::Matrix q = net_.mlp.forward(x, t.head, &mcache);
            if (t.action >= q.cols) throw ConfigError("transition action outside the head's action space");
            const double diff = q(0, t.action) - targets[b];
            loss += diff * diff * inv_b;
            nn::Matrix dq(1, q.cols);
            dq(0, t.action) = 2.0 * diff * inv_b;
            nn::Matrix dx = net_.mlp.backward(mcache, t.head, dq);
            nn::Matrix dtokens(tokens.rows, tokens.cols);
            for (std::size_t c = 0; c < d; ++c) dtokens(t.row, c) = dx(0, c);
            if (net_.op_table)
                for (std::size_t c = d; c < dx.cols; ++c)
                    net_.op_table->grad(static_cast<std::size_t>(t.op), c - d) += dx(0, c);
            net_.encoder.backward(*t.state, ecache, std::move(dtokens));
        }
        adam_.step(params);
        ++updates_;
        if (target_ && updates_ % cfg_.target_sync == 0) target_ = net_;
        return loss;
    }

    nn::ParamList params() {
        nn::ParamList out;
        net_.collect(out);
        return out;
    }

private:
    AgentConfig cfg_;
    QNetwork net_;
    std::optional<QNetwork> target_;
    nn::Adam adam_;
    std::uint64_t updates_ = 0;
};

namespace detail {

inline std::size_t epsilon_greedy(std::span<const double> q, double eps, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (eps > 0 && coin(rng) < eps) {
        std::uniform_int_distribution<std::size_t> pick(0, q.size() - 1);
        return pick(rng);
    }
    return argmax(q);
}

} // namespace detail

// One operator per feature of `d`, epsilon-greedy within the head that
// matches the feature's kind. Two-operand operators get a partner from
// `partners`; without one they degrade to the identity of their head.
inline OperatorSequence act_generation(const QAgent& agent, const StateInput& s, const Dataset& d,
                                       PartnerSelector& partners, double eps, std::mt19937_64& rng) {
    if (eps < 0 || eps > 1) throw ConfigError("epsilon must lie in [0, 1]");
    nn::Matrix tokens = agent.encode(s);
    OperatorSequence seq(d.feature_count());
    for (std::size_t i = 0; i < d.feature_count(); ++i) {
        const ColumnKind kind = d.feature(i).kind;
        const std::size_t head = head_for(kind);
        auto q = agent.network().q_from_token(tokens.row(i), head, -1);
        const std::size_t a = detail::epsilon_greedy(q, eps, rng);
        GenAction act;
        act.op = head == kDiscreteHead ? discrete_op(a) : continuous_op(a);
        if (needs_partner(act.op)) {
            act.partner = partners.select(i, act.op == OperatorId::Cross ? ColumnKind::Discrete : ColumnKind::Continuous);
            if (!act.partner) act.op = head == kDiscreteHead ? OperatorId::AddD : OperatorId::None;
        }
        seq[i] = act;
    }
    return seq;
}

// One keep/replace/add decision per feature; each token is paired with the
// embedding of the operator chosen for that feature.
inline DiscriminatorSequence act_discrimination(const QAgent& agent, const StateInput& s, const OperatorSequence& t1,
                                                double eps, std::mt19937_64& rng) {
    if (eps < 0 || eps > 1) throw ConfigError("epsilon must lie in [0, 1]");
    if (t1.size() + 1 != s.tokens()) throw ConfigError("operator sequence length must equal the feature count");
    nn::Matrix tokens = agent.encode(s);
    DiscriminatorSequence seq(t1.size());
    for (std::size_t i = 0; i < t1.size(); ++i) {
        auto q = agent.network().q_from_token(tokens.row(i), 0, static_cast<int>(t1[i].op));
        seq[i] = static_cast<DiscAction>(detail::epsilon_greedy(q, eps, rng));
    }
    return seq;
}

} // namespace featrl
