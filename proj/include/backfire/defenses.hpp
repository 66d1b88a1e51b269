#pragma once

// Defender strategies. The centrepiece is the agent subspace: N endpoints,
// endpoint i trained on every agent's data except attacker i, with a cosine
// regularizer pulling the endpoints together so that the whole simplex of
// convex combinations stays low-loss. Inference uses the simplex centre or an
// average over sampled points.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "backfire/attack.hpp"
#include "backfire/datasets.hpp"
#include "backfire/nn_core.hpp"
#include "backfire/random.hpp"
#include "backfire/training.hpp"

namespace backfire::defense {

using data::JointDataset;
using data::LabeledExample;
using nn::ModelSpec;
using nn::ParamVector;
using train::TrainOptions;

namespace stream {
inline constexpr std::uint64_t plain_shuffle = 0x91a1;
inline constexpr std::uint64_t endpoint_shuffle = 0x3e9d;
inline constexpr std::uint64_t endpoint_init = 0x1417;
inline constexpr std::uint64_t ensemble_alpha = 0xa1fa;
inline constexpr std::uint64_t augment = 0xa6e7;
}  // namespace stream

inline std::uint64_t endpoint_shuffle_seed(std::uint64_t seed, int endpoint) {
    return derive_seed(seed, stream::endpoint_shuffle + static_cast<std::uint64_t>(endpoint));
}

// ---------------------------------------------------------------------------
// No defense

inline train::FitResult fit_plain(const ModelSpec& spec, std::span<const LabeledExample> train_set,
                                  std::span<const LabeledExample> validation, std::uint64_t seed,
                                  const TrainOptions& opts) {
    return train::fit(spec, nn::init_params(spec, seed, opts.init_mode), train_set, validation, opts,
                      derive_seed(seed, stream::plain_shuffle));
}

/// Trains on the union of every agent's train split (poison labels as
/// targets), early-stopping on the defender's validation split.
inline ParamVector train_plain(const ModelSpec& spec, const JointDataset& joint, std::uint64_t seed,
                               const TrainOptions& opts = {}) {
    const auto train_set = joint.all_train();
    if (train_set.empty())
        throw ConfigError("train_plain: joint dataset has no training examples");
    return fit_plain(spec, train_set, joint.defender().test_examples, seed, opts).params;
}

// ---------------------------------------------------------------------------
// Agent indexing

/// S_i: train examples of every agent except attacker i (defender included).
inline std::vector<LabeledExample> agent_indexed_set(const JointDataset& joint, int attacker) {
    std::vector<LabeledExample> out;
    for (const auto& agent : joint.agents)
        if (agent.agent_id != attacker)
            out.insert(out.end(), agent.train_examples.begin(), agent.train_examples.end());
    return out;
}

inline std::map<int, std::vector<LabeledExample>> agent_indexed_sets(const JointDataset& joint) {
    if (joint.num_attackers() < 2)
        throw ConfigError("agent-indexed sets need at least 2 attackers");
    std::map<int, std::vector<LabeledExample>> sets;
    for (int i = 1; i <= joint.num_attackers(); ++i)
        sets.emplace(i, agent_indexed_set(joint, i));
    return sets;
}

struct IndexedModels {
    ModelSpec spec;
    std::map<int, ParamVector> per_agent;

    /// Routes a query from agent `agent_id` to that agent's model.
    const ParamVector& route(int agent_id) const {
        auto it = per_agent.find(agent_id);
        if (it == per_agent.end())
            throw ConfigError("agent indexing: no model for agent " + std::to_string(agent_id));
        return it->second;
    }
};

/// Model i is trained on S_i from a shared initial point; its shuffle stream
/// matches subspace endpoint i so the two coincide when the regularizer is off.
inline IndexedModels train_agent_indexing(const ModelSpec& spec, const JointDataset& joint, std::uint64_t seed,
                                          const TrainOptions& opts = {}) {
    const auto sets = agent_indexed_sets(joint);
    IndexedModels models{spec, {}};
    const auto init = nn::init_params(spec, seed, opts.init_mode);
    for (const auto& [i, set] : sets)
        models.per_agent.emplace(
            i, train::fit(spec, init, set, joint.defender().test_examples, opts, endpoint_shuffle_seed(seed, i - 1))
                   .params);
    return models;
}

// ---------------------------------------------------------------------------
// Agent subspace

enum class DataMode { agent_indexed, respective };
enum class Schedule { parallel, sequential };
enum class DistanceObjective { minimize, maximize };
enum class AlphaSampling { simplex, cone };

struct SubspaceConfig {
    double beta = 0.05;
    int epochs = 300;
    nn::InitMode init_mode = nn::InitMode::constant_shared;
    DataMode data_mode = DataMode::agent_indexed;
    Schedule schedule = Schedule::parallel;
    DistanceObjective distance_objective = DistanceObjective::minimize;
    int batch_size = 128;
    double learning_rate = 0.001;
    double momentum = 0.9;
    /// Average cosine over layers instead of one cosine over the flat vector.
    bool per_layer_cosine = false;

    void validate() const {
        if (beta < 0.0)
            throw ConfigError("subspace: beta must be >= 0");
        if (epochs < 1)
            throw ConfigError("subspace: epochs must be >= 1");
        training_options().validate();
    }

    TrainOptions training_options() const {
        TrainOptions t;
        t.max_epochs = epochs;
        t.patience = 0;
        t.batch_size = batch_size;
        t.learning_rate = learning_rate;
        t.momentum = momentum;
        t.init_mode = init_mode;
        return t;
    }
};

struct TraceRow {
    int epoch = 0;
    int endpoint = 0;
    double task_loss = 0.0;
    /// Mean over endpoint pairs of 1 - cos, measured at the start of the epoch.
    double mean_pairwise_cosine_distance = 0.0;
};

struct SubspaceModel {
    ModelSpec spec;
    std::vector<ParamVector> endpoints;
    std::vector<TraceRow> trace;

    int epochs() const {
        return endpoints.empty() ? 0 : static_cast<int>(trace.size() / endpoints.size());
    }
};

/// Cosine similarity over the flat vector, or averaged over layer segments.
inline double subspace_cosine(const ModelSpec& spec, const ParamVector& a, const ParamVector& b, bool per_layer) {
    if (!per_layer)
        return nn::cosine_similarity(a, b);
    const auto layers = nn::layer_layout(spec);
    double total = 0.0;
    for (const auto& L : layers) {
        const std::size_t len = L.end() - L.weight_offset;
        total += nn::cosine_similarity(a.span().subspan(L.weight_offset, len), b.span().subspan(L.weight_offset, len));
    }
    return total / static_cast<double>(layers.size());
}

inline double mean_pairwise_cosine_distance(const ModelSpec& spec, std::span<const ParamVector> points,
                                            bool per_layer = false) {
    if (points.size() < 2)
        return 0.0;
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = i + 1; j < points.size(); ++j, ++pairs)
            total += 1.0 - subspace_cosine(spec, points[i], points[j], per_layer);
    return total / static_cast<double>(pairs);
}

namespace detail {

/// grad += scale * d cos(a, b) / da over [offset, offset + len).
inline void add_cosine_gradient(std::span<const double> a, std::span<const double> b, double scale,
                                std::span<double> grad) {
    const double aa = nn::dot(a, a);
    const double bb = nn::dot(b, b);
    const double ab = nn::dot(a, b);
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na == 0.0 || nb == 0.0)
        throw DegenerateVectorError("cosine regularizer: zero-norm endpoint");
    const double cos = ab / (na * nb);
    const double inv = 1.0 / (na * nb);
    const double self = cos / aa;
    for (std::size_t k = 0; k < a.size(); ++k)
        grad[k] += scale * (b[k] * inv - self * a[k]);
}

/// Gradient of weight * sum_j d(theta, partner_j), d = 1 - cos (minimize) or cos (maximize).
inline train::ExtraGradient distance_regularizer(const ModelSpec& spec, std::vector<ParamVector> partners,
                                                 double weight, DistanceObjective objective, bool per_layer) {
    const double sign = objective == DistanceObjective::minimize ? -1.0 : 1.0;
    std::vector<std::pair<std::size_t, std::size_t>> segments;
    if (per_layer)
        for (const auto& L : nn::layer_layout(spec))
            segments.emplace_back(L.weight_offset, L.end() - L.weight_offset);
    return [partners = std::move(partners), scale = sign * weight, segments](const ParamVector& params,
                                                                             std::span<double> grad) {
        for (const auto& other : partners) {
            if (segments.empty()) {
                add_cosine_gradient(params.span(), other.span(), scale, grad);
            } else {
                const double s = scale / static_cast<double>(segments.size());
                for (const auto& [off, len] : segments)
                    add_cosine_gradient(params.span().subspan(off, len), other.span().subspan(off, len), s,
                                        grad.subspan(off, len));
            }
        }
    };
}

template <typename F>
void for_each_endpoint(int count, int threads, F&& body) {
    if (threads <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i)
            body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
    for (int start = 0; start < count; start += threads) {
        std::vector<std::thread> pool;
        for (int i = start; i < std::min(count, start + threads); ++i)
            pool.emplace_back([&, i] {
                try {
                    body(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            });
        for (auto& t : pool)
            t.join();
    }
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

}  // namespace detail

/// Called after each completed epoch with the current endpoints.
using CheckpointFn = std::function<void(int epoch, const std::vector<ParamVector>& endpoints)>;

/// Training sets per endpoint: S_i (agent_indexed) or attacker i's own train split (respective).
inline std::vector<std::vector<LabeledExample>> endpoint_sets(const JointDataset& joint, DataMode mode) {
    std::vector<std::vector<LabeledExample>> sets;
    for (int i = 1; i <= joint.num_attackers(); ++i)
        sets.push_back(mode == DataMode::agent_indexed ? agent_indexed_set(joint, i)
                                                       : joint.attacker(i).train_examples);
    return sets;
}

/// Trains the N endpoints. In parallel mode every endpoint's regularizer reads
/// the other endpoints as they were at the start of the epoch, so the result is
/// identical for any thread count. In sequential mode endpoint 0 is trained
/// alone first, then frozen as the anchor for every other endpoint.
inline SubspaceModel train_subspace(const ModelSpec& spec, const JointDataset& joint, const SubspaceConfig& cfg,
                                    std::uint64_t seed, int threads = 1, const CheckpointFn& checkpoint = {}) {
    cfg.validate();
    const int n = joint.num_attackers();
    if (n < 2)
        throw ConfigError("agent subspace needs at least 2 attackers");
    const auto opts = cfg.training_options();

    std::vector<train::ExampleTable> tables;
    for (const auto& set : endpoint_sets(joint, cfg.data_mode))
        tables.emplace_back(set, spec.input_dims);

    std::vector<train::EpochRunner> runners;
    for (int i = 0; i < n; ++i) {
        auto init = cfg.init_mode == nn::InitMode::constant_shared
                        ? nn::init_params(spec, seed, nn::InitMode::constant_shared)
                        : nn::init_params(spec, derive_seed(seed, stream::endpoint_init + i), nn::InitMode::per_point_random);
        runners.emplace_back(spec, std::move(init), opts, endpoint_shuffle_seed(seed, i));
    }

    SubspaceModel model{spec, {}, {}};
    model.trace.resize(static_cast<std::size_t>(cfg.epochs) * n);
    auto trace_at = [&](int epoch, int i) -> TraceRow& {
        return model.trace[static_cast<std::size_t>(epoch) * n + i];
    };
    auto snapshot = [&] {
        std::vector<ParamVector> s;
        for (const auto& r : runners)
            s.push_back(r.params());
        return s;
    };
    auto epoch_step = [&](int i, int epoch, const train::ExtraGradient& reg) {
        try {
            return runners[static_cast<std::size_t>(i)].run_epoch(tables[static_cast<std::size_t>(i)], epoch, reg);
        } catch (const TrainingDivergenceError& e) {
            throw TrainingDivergenceError("subspace endpoint diverged", e.epoch(), i);
        }
    };

    if (cfg.schedule == Schedule::parallel) {
        const double weight = cfg.beta / static_cast<double>(n - 1);
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto snap = snapshot();
            const double dist = mean_pairwise_cosine_distance(spec, snap, cfg.per_layer_cosine);
            detail::for_each_endpoint(n, threads, [&](int i) {
                train::ExtraGradient reg;
                if (cfg.beta > 0.0) {
                    std::vector<ParamVector> partners;
                    for (int j = 0; j < n; ++j)
                        if (j != i)
                            partners.push_back(snap[static_cast<std::size_t>(j)]);
                    reg = detail::distance_regularizer(spec, std::move(partners), weight, cfg.distance_objective,
                                                       cfg.per_layer_cosine);
                }
                const double loss = epoch_step(i, epoch, reg);
                trace_at(epoch, i) = {epoch, i, loss, dist};
            });
            if (checkpoint)
                checkpoint(epoch, snapshot());
        }
    } else {
        // Phase 1: the anchor trains alone; its trace rows carry its own losses.
        std::vector<double> anchor_loss(static_cast<std::size_t>(cfg.epochs));
        for (int epoch = 0; epoch < cfg.epochs; ++epoch)
            anchor_loss[static_cast<std::size_t>(epoch)] = epoch_step(0, epoch, {});
        const ParamVector anchor = runners[0].params();
        // Phase 2: every other endpoint regularized against the frozen anchor.
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const auto snap = snapshot();
            const double dist = mean_pairwise_cosine_distance(spec, snap, cfg.per_layer_cosine);
            trace_at(epoch, 0) = {epoch, 0, anchor_loss[static_cast<std::size_t>(epoch)], dist};
            detail::for_each_endpoint(n - 1, threads, [&](int k) {
                const int i = k + 1;
                train::ExtraGradient reg;
                if (cfg.beta > 0.0)
                    reg = detail::distance_regularizer(spec, {anchor}, cfg.beta, cfg.distance_objective,
                                                       cfg.per_layer_cosine);
                const double loss = epoch_step(i, epoch, reg);
                trace_at(epoch, i) = {epoch, i, loss, dist};
            });
            if (checkpoint)
                checkpoint(epoch, snapshot());
        }
    }
    model.endpoints = snapshot();
    return model;
}

inline ParamVector subspace_centre(const SubspaceModel& model) {
    const std::vector<double> alphas(model.endpoints.size(), 1.0 / static_cast<double>(model.endpoints.size()));
    return nn::interpolate(model.endpoints, alphas);
}

/// Forward pass at sum_i alphas[i] * endpoint_i.
inline nn::ProbMatrix eval_subspace(const SubspaceModel& model, const nn::Batch& x, std::span<const double> alphas) {
    return nn::forward(model.spec, nn::interpolate(model.endpoints, alphas), x);
}

inline std::vector<double> sample_alphas(Rng& rng, std::size_t n, AlphaSampling mode) {
    std::vector<double> a(n);
    if (mode == AlphaSampling::cone) {
        for (double& v : a)
            v = rng.uniform();
        return a;
    }
    // Uniform on the simplex: normalized unit exponentials (Dirichlet(1, ..., 1)).
    double total = 0.0;
    for (double& v : a) {
        double u = rng.uniform();
        while (u <= 0.0)
            u = rng.uniform();
        v = -std::log(u);
        total += v;
    }
    for (double& v : a)
        v /= total;
    return a;
}

inline void renormalize_rows(nn::ProbMatrix& p) {
    for (std::size_t r = 0; r < p.rows; ++r) {
        auto row = p.row(r);
        const double total = std::accumulate(row.begin(), row.end(), 0.0);
        for (double& v : row)
            v /= total;
    }
}

/// Mean softmax over the given coefficient vectors, renormalized.
inline nn::ProbMatrix subspace_ensemble_predict(const SubspaceModel& model, const nn::Batch& x,
                                                std::span<const std::vector<double>> alpha_sets) {
    if (alpha_sets.empty())
        throw ConfigError("subspace ensemble: need at least one sample");
    nn::ProbMatrix acc{x.size(), static_cast<std::size_t>(model.spec.num_classes), {}};
    acc.values.assign(acc.rows * acc.cols, 0.0);
    for (const auto& alphas : alpha_sets) {
        const auto p = eval_subspace(model, x, alphas);
        for (std::size_t i = 0; i < acc.values.size(); ++i)
            acc.values[i] += p.values[i];
    }
    for (double& v : acc.values)
        v /= static_cast<double>(alpha_sets.size());
    renormalize_rows(acc);
    return acc;
}

/// Draws the coefficient vectors for a sampled ensemble.
inline std::vector<std::vector<double>> draw_alpha_sets(std::size_t endpoints, int num_samples, std::uint64_t seed,
                                                        AlphaSampling mode = AlphaSampling::simplex) {
    if (num_samples < 1)
        throw ConfigError("subspace ensemble: num_samples must be >= 1");
    Rng rng(derive_seed(seed, stream::ensemble_alpha));
    std::vector<std::vector<double>> sets;
    sets.reserve(static_cast<std::size_t>(num_samples));
    for (int s = 0; s < num_samples; ++s)
        sets.push_back(sample_alphas(rng, endpoints, mode));
    return sets;
}

inline nn::ProbMatrix subspace_ensemble_predict(const SubspaceModel& model, const nn::Batch& x, int num_samples,
                                                std::uint64_t seed, AlphaSampling mode = AlphaSampling::simplex) {
    const auto sets = draw_alpha_sets(model.endpoints.size(), num_samples, seed, mode);
    return subspace_ensemble_predict(model, x, sets);
}

// ---------------------------------------------------------------------------
// Agent augmentation / backdoor adversarial training

enum class AugmentLabels {
    /// Simulated attackers relabel to a random target (agent augmentation).
    random_target,
    /// Triggered copies keep their clean label (backdoor adversarial training).
    keep_clean,
};

struct AugmentResult {
    std::vector<LabeledExample> examples;
    std::size_t clean_count = 0;
    std::size_t share_size = 0;
    std::size_t poisoned_count = 0;
    int skipped_attackers = 0;
    std::vector<attack::TriggerPattern> triggers;
};

/// First 40% (after a seeded shuffle) stays clean; the remaining 60% is split
/// into n_simulated equal shares, each poisoned at rate p_sim by its own
/// fresh trigger. Simulated attackers get ids starting at `first_sim_id`.
inline AugmentResult agent_augment(std::vector<LabeledExample> defender_data, int n_simulated, double p_sim,
                                   double eps_sim, std::uint64_t seed, int num_classes, nn::Dims dims,
                                   AugmentLabels labels = AugmentLabels::random_target, int first_sim_id = 1000) {
    if (defender_data.empty())
        throw ConfigError("agent_augment: defender data is empty");
    if (n_simulated < 1)
        throw ConfigError("agent_augment: need at least one simulated attacker");

    Rng rng(derive_seed(seed, stream::augment));
    rng.shuffle(defender_data);
    AugmentResult out;
    const std::size_t n = defender_data.size();
    out.clean_count = n - static_cast<std::size_t>(std::floor(0.6 * static_cast<double>(n) + 1e-9));
    out.share_size = (n - out.clean_count) / static_cast<std::size_t>(n_simulated);

    std::size_t pos = out.clean_count;
    for (int s = 0; s < n_simulated; ++s) {
        if (out.share_size < 1) {
            ++out.skipped_attackers;
            continue;
        }
        attack::AttackerConfig cfg;
        cfg.attacker_id = first_sim_id + s;
        cfg.epsilon = eps_sim;
        cfg.poison_rate = p_sim;
        cfg.seed = derive_seed(seed, stream::augment + 1 + static_cast<std::uint64_t>(s));
        cfg.target_label = attack::sample_target_label(num_classes, cfg.seed);
        const auto t = attack::generate_trigger(cfg, dims);
        const std::size_t count = attack::poison_count(p_sim, out.share_size);
        for (std::size_t k = 0; k < count; ++k) {
            auto& e = defender_data[pos + k];
            attack::apply_trigger_inplace(e.image, t);
            e.poison_label = labels == AugmentLabels::random_target ? cfg.target_label : e.clean_label;
            e.trigger_id = cfg.attacker_id;
            ++out.poisoned_count;
        }
        out.triggers.push_back(t);
        pos += out.share_size;
    }
    out.examples = std::move(defender_data);
    return out;
}

// ---------------------------------------------------------------------------
// Spectral signatures

struct SpectralFilterResult {
    JointDataset filtered;
    std::vector<std::size_t> removed_per_class;
    std::size_t removed_poisoned = 0;
    std::vector<std::string> warnings;
};

/// Outlier scores: squared projection of each centred representation onto the
/// top right singular vector of the class's representation matrix.
inline std::vector<double> spectral_scores(std::span<const double> reps, std::size_t rows, std::size_t width) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(reps.data(),
                                                                                               static_cast<Eigen::Index>(rows),
                                                                                               static_cast<Eigen::Index>(width));
    const Eigen::MatrixXd centred = m.rowwise() - m.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centred.transpose() * centred);
    const Eigen::VectorXd top = eig.eigenvectors().col(eig.eigenvectors().cols() - 1);
    const Eigen::VectorXd proj = centred * top;
    std::vector<double> scores(rows);
    for (std::size_t i = 0; i < rows; ++i)
        scores[i] = proj[static_cast<Eigen::Index>(i)] * proj[static_cast<Eigen::Index>(i)];
    return scores;
}

/// Removes the top (top_k_per_attacker * N) scores per training label using
/// the representations of `model`.
inline SpectralFilterResult spectral_signature_filter(const ModelSpec& spec, const JointDataset& joint,
                                                      const ParamVector& model, int top_k_per_attacker) {
    if (top_k_per_attacker < 0)
        throw ConfigError("spectral signatures: top_k must be >= 0");
    SpectralFilterResult out;
    out.filtered = joint;
    out.removed_per_class.assign(static_cast<std::size_t>(joint.num_classes), 0);
    const std::size_t removals = static_cast<std::size_t>(top_k_per_attacker) * joint.num_attackers();
    if (removals == 0)
        return out;

    struct Ref {
        std::size_t agent, index;
    };
    std::vector<std::vector<Ref>> by_class(static_cast<std::size_t>(joint.num_classes));
    for (std::size_t a = 0; a < joint.agents.size(); ++a)
        for (std::size_t i = 0; i < joint.agents[a].train_examples.size(); ++i)
            by_class[static_cast<std::size_t>(joint.agents[a].train_examples[i].target())].push_back({a, i});

    const auto width = static_cast<std::size_t>(nn::feature_width(spec));
    std::vector<std::vector<bool>> drop(joint.agents.size());
    for (std::size_t a = 0; a < joint.agents.size(); ++a)
        drop[a].assign(joint.agents[a].train_examples.size(), false);

    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const auto& refs = by_class[c];
        if (refs.empty())
            continue;
        std::size_t remove = removals;
        if (refs.size() <= remove) {
            remove = refs.size() - 1;
            out.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(refs.size()) +
                                   " examples; removing all but one");
        }
        if (remove == 0)
            continue;
        std::vector<data::LabeledExample> members;
        members.reserve(refs.size());
        for (const auto& r : refs)
            members.push_back(joint.agents[r.agent].train_examples[r.index]);
        const auto reps = nn::features(spec, model, data::make_batch(members, joint.dims));
        const auto scores = spectral_scores(reps, refs.size(), width);
        std::vector<std::size_t> order(refs.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
        for (std::size_t k = 0; k < remove; ++k) {
            const auto& r = refs[order[k]];
            drop[r.agent][r.index] = true;
            if (joint.agents[r.agent].train_examples[r.index].poisoned())
                ++out.removed_poisoned;
        }
        out.removed_per_class[c] = remove;
    }

    for (std::size_t a = 0; a < joint.agents.size(); ++a) {
        auto& kept = out.filtered.agents[a].train_examples;
        kept.clear();
        for (std::size_t i = 0; i < joint.agents[a].train_examples.size(); ++i)
            if (!drop[a][i])
                kept.push_back(joint.agents[a].train_examples[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deep ensembles

struct EnsembleModel {
    ModelSpec spec;
    std::vector<ParamVector> members;

    nn::ProbMatrix predict(const nn::Batch& x) const {
        if (members.empty())
            throw ConfigError("ensemble has no members");
        auto acc = nn::forward(spec, members.front(), x);
        for (std::size_t m = 1; m < members.size(); ++m) {
            const auto p = nn::forward(spec, members[m], x);
            for (std::size_t i = 0; i < acc.values.size(); ++i)
                acc.values[i] += p.values[i];
        }
        for (double& v : acc.values)
            v /= static_cast<double>(members.size());
        return acc;
    }
};

inline std::uint64_t ensemble_member_seed(std::uint64_t seed, int member) {
    return seed + static_cast<std::uint64_t>(member);
}

/// Independent plain runs from per-point random initializations.
inline EnsembleModel train_deep_ensemble(const ModelSpec& spec, const JointDataset& joint, int members,
                                         std::uint64_t seed, TrainOptions opts = {}, int threads = 1) {
    if (members < 1)
        throw ConfigError("deep ensemble: members must be >= 1");
    opts.init_mode = nn::InitMode::per_point_random;
    EnsembleModel model{spec, std::vector<ParamVector>(static_cast<std::size_t>(members))};
    detail::for_each_endpoint(members, threads, [&](int m) {
        model.members[static_cast<std::size_t>(m)] = train_plain(spec, joint, ensemble_member_seed(seed, m), opts);
    });
    return model;
}

}  // namespace backfire::defense
