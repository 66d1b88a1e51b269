#pragma once

// Random-BadNet: every attacker owns a random pixel mask z ~ Bernoulli(eps)
// and random fill values m ~ U[0, 1]; a poisoned input is x*(1-z) + m*z.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "backfire/datasets.hpp"
#include "backfire/error.hpp"
#include "backfire/random.hpp"

namespace backfire::attack {

using data::Dims;
using data::Image;

struct TriggerPattern {
    Dims dims;
    std::vector<double> mask_values;     // m
    std::vector<std::uint8_t> binary_mask; // z, entries 0 or 1
    double epsilon = 0.0;
    std::uint64_t attacker_seed = 0;

    double density() const {
        if (binary_mask.empty())
            return 0.0;
        return static_cast<double>(std::accumulate(binary_mask.begin(), binary_mask.end(), std::size_t{0})) /
               static_cast<double>(binary_mask.size());
    }
};

struct AttackerConfig {
    int attacker_id = 1;
    double epsilon = 0.4;
    double poison_rate = 0.4;
    int target_label = 0;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(epsilon >= 0.0 && epsilon <= 1.0))
            throw ConfigError("attacker: epsilon must be in [0, 1]");
        if (!(poison_rate >= 0.0 && poison_rate <= 1.0))
            throw ConfigError("attacker: poison rate must be in [0, 1]");
        if (target_label < 0)
            throw ConfigError("attacker: target label must be non-negative");
    }
};

namespace stream {
inline constexpr std::uint64_t trigger = 0x7419;
inline constexpr std::uint64_t target = 0x7a29;
inline constexpr std::uint64_t selection = 0x5e1c;
}  // namespace stream

/// Target label drawn uniformly over the k classes from the attacker's seed.
inline int sample_target_label(int num_classes, std::uint64_t attacker_seed) {
    Rng rng(derive_seed(attacker_seed, stream::target));
    return static_cast<int>(rng.index(static_cast<std::uint64_t>(num_classes)));
}

/// Convenience: the standard config for attacker `id` (seed = attacker index).
inline AttackerConfig make_attacker(int id, double epsilon, double poison_rate, int num_classes) {
    AttackerConfig cfg{id, epsilon, poison_rate, 0, static_cast<std::uint64_t>(id)};
    cfg.target_label = sample_target_label(num_classes, cfg.seed);
    return cfg;
}

inline TriggerPattern generate_trigger(const AttackerConfig& cfg, Dims dims) {
    cfg.validate();
    if (dims.size() == 0)
        throw ConfigError("generate_trigger: empty dims");
    TriggerPattern t;
    t.dims = dims;
    t.epsilon = cfg.epsilon;
    t.attacker_seed = cfg.seed;
    t.mask_values.resize(dims.size());
    t.binary_mask.resize(dims.size());
    Rng rng(derive_seed(cfg.seed, stream::trigger));
    for (std::size_t i = 0; i < dims.size(); ++i) {
        t.binary_mask[i] = rng.bernoulli(cfg.epsilon) ? 1 : 0;
        t.mask_values[i] = rng.uniform();
    }
    return t;
}

inline void apply_trigger_inplace(Image& x, const TriggerPattern& t) {
    if (x.size() != t.binary_mask.size())
        throw ConfigError("apply_trigger: image and trigger shapes differ");
    for (std::size_t i = 0; i < x.size(); ++i)
        if (t.binary_mask[i])
            x[i] = t.mask_values[i];
}

inline Image apply_trigger(Image x, const TriggerPattern& t) {
    apply_trigger_inplace(x, t);
    return x;
}

/// floor(p * n), tolerant of representation error in p * n.
inline std::size_t poison_count(double poison_rate, std::size_t n) {
    return static_cast<std::size_t>(std::floor(poison_rate * static_cast<double>(n) + 1e-9));
}

namespace detail {

inline void poison_split(std::vector<data::LabeledExample>& split, const AttackerConfig& cfg, const TriggerPattern& t,
                         Rng& rng) {
    std::vector<std::size_t> order(split.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const std::size_t count = poison_count(cfg.poison_rate, split.size());
    for (std::size_t i = 0; i < count; ++i) {
        auto& e = split[order[i]];
        apply_trigger_inplace(e.image, t);
        e.poison_label = cfg.target_label;
        e.trigger_id = cfg.attacker_id;
    }
}

}  // namespace detail

/// Poisons floor(p * |split|) uniformly chosen examples of the train split and,
/// when requested, of the test split.
inline data::AgentDataset poison_dataset(data::AgentDataset d, const AttackerConfig& cfg, const TriggerPattern& t,
                                         bool include_test = true) {
    cfg.validate();
    if (d.agent_id != cfg.attacker_id)
        throw ConfigError("poison_dataset: dataset belongs to agent " + std::to_string(d.agent_id) + ", not attacker " +
                          std::to_string(cfg.attacker_id));
    Rng rng(derive_seed(cfg.seed, stream::selection));
    detail::poison_split(d.train_examples, cfg, t, rng);
    if (include_test)
        detail::poison_split(d.test_examples, cfg, t, rng);
    return d;
}

/// Share of the whole joint dataset backdoored by one attacker: (1 - V_d) / N * p.
inline double real_poison_rate(int num_attackers, double defender_fraction, double poison_rate) {
    if (num_attackers < 1)
        throw ConfigError("real_poison_rate: need at least one attacker");
    return (1.0 - defender_fraction) / static_cast<double>(num_attackers) * poison_rate;
}

}  // namespace backfire::attack
