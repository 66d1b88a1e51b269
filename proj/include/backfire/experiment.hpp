#pragma once

// End-to-end runs: build data, poison it, train one defense, evaluate, and
// write metrics.json / metrics.csv (plus traces for the subspace defense).

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "backfire/attack.hpp"
#include "backfire/datasets.hpp"
#include "backfire/defenses.hpp"
#include "backfire/error.hpp"
#include "backfire/game_metrics.hpp"
#include "backfire/io.hpp"

namespace backfire::experiment {

using nlohmann::json;

enum class Defense {
    none,
    agent_subspace,
    agent_indexing,
    agent_augmentation,
    backdoor_adv_training,
    spectral_signatures,
    deep_ensembles,
};

enum class SubspaceInference { centre, ensemble };

/// Flat key schema; every key is optional and `to_json` emits all of them.
struct ExperimentConfig {
    // data
    std::string dataset = "synthetic";  // synthetic | idx | cifar10 | sbd
    std::string dataset_path;
    std::string labels_path;  // idx only
    int num_classes = 10;
    int per_class = 200;
    nn::Dims dims{16, 16, 1};
    // game
    int num_attackers = 2;
    double defender_fraction = 0.1;
    double poison_rate = 0.4;
    double epsilon = 0.4;
    std::uint64_t seed = 3407;
    bool exclude_collisions = true;
    // model and plain training
    nn::ModelSpec model;
    train::TrainOptions training;
    // defense
    Defense defense = Defense::none;
    defense::SubspaceConfig subspace;
    SubspaceInference subspace_inference = SubspaceInference::centre;
    int ensemble_samples = 1000;
    defense::AlphaSampling alpha_sampling = defense::AlphaSampling::simplex;
    int checkpoint_every = 0;
    int checkpoint_samples = 100;
    int augment_attackers = 200;
    double augment_poison_rate = 0.2;
    double augment_epsilon = 0.2;
    int adv_attackers = 20;
    double adv_poison_rate = 0.4;
    double adv_epsilon = 0.4;
    int spectral_top_k = 5;
    /// 0 means one member per attacker.
    int ensemble_members = 0;
    // output
    std::string output_dir;

    void validate() const;
};

namespace detail {

template <typename E>
struct EnumNames {
    std::vector<std::pair<E, const char*>> names;

    const char* name(E e) const {
        for (const auto& [v, n] : names)
            if (v == e)
                return n;
        throw ConfigError("unnamed enum value");
    }
    E parse(const std::string& key, const std::string& s) const {
        for (const auto& [v, n] : names)
            if (s == n)
                return v;
        std::string options;
        for (const auto& [v, n] : names)
            options += (options.empty() ? "" : ", ") + std::string(n);
        throw ConfigError("config key '" + key + "': unknown value '" + s + "' (expected one of: " + options + ")");
    }
};

inline const EnumNames<Defense> defense_names{{{Defense::none, "none"},
                                               {Defense::agent_subspace, "agent_subspace"},
                                               {Defense::agent_indexing, "agent_indexing"},
                                               {Defense::agent_augmentation, "agent_augmentation"},
                                               {Defense::backdoor_adv_training, "backdoor_adv_training"},
                                               {Defense::spectral_signatures, "spectral_signatures"},
                                               {Defense::deep_ensembles, "deep_ensembles"}}};
inline const EnumNames<nn::Architecture> arch_names{{{nn::Architecture::dense, "dense"}, {nn::Architecture::conv, "conv"}}};
inline const EnumNames<nn::LossKind> loss_names{
    {{nn::LossKind::cross_entropy, "cross_entropy"}, {nn::LossKind::mean_squared_error, "mean_squared_error"}}};
inline const EnumNames<nn::InitMode> init_names{
    {{nn::InitMode::constant_shared, "constant_shared"}, {nn::InitMode::per_point_random, "per_point_random"}}};
inline const EnumNames<defense::DataMode> data_mode_names{
    {{defense::DataMode::agent_indexed, "agent_indexed"}, {defense::DataMode::respective, "respective"}}};
inline const EnumNames<defense::Schedule> schedule_names{
    {{defense::Schedule::parallel, "parallel"}, {defense::Schedule::sequential, "sequential"}}};
inline const EnumNames<defense::DistanceObjective> objective_names{
    {{defense::DistanceObjective::minimize, "minimize"}, {defense::DistanceObjective::maximize, "maximize"}}};
inline const EnumNames<SubspaceInference> inference_names{
    {{SubspaceInference::centre, "centre"}, {SubspaceInference::ensemble, "ensemble"}}};
inline const EnumNames<defense::AlphaSampling> alpha_names{
    {{defense::AlphaSampling::simplex, "simplex"}, {defense::AlphaSampling::cone, "cone"}}};

}  // namespace detail

inline std::string defense_name(Defense d) { return detail::defense_names.name(d); }
inline Defense parse_defense(const std::string& s) { return detail::defense_names.parse("defense", s); }

inline json to_json(const ExperimentConfig& c) {
    using namespace detail;
    return {{"dataset", c.dataset},
            {"dataset_path", c.dataset_path},
            {"labels_path", c.labels_path},
            {"num_classes", c.num_classes},
            {"per_class", c.per_class},
            {"dims", {c.dims.length, c.dims.width, c.dims.channels}},
            {"num_attackers", c.num_attackers},
            {"defender_fraction", c.defender_fraction},
            {"poison_rate", c.poison_rate},
            {"epsilon", c.epsilon},
            {"seed", c.seed},
            {"exclude_collisions", c.exclude_collisions},
            {"architecture", arch_names.name(c.model.architecture)},
            {"hidden_layers", c.model.hidden_layers},
            {"loss", loss_names.name(c.model.loss_kind)},
            {"max_epochs", c.training.max_epochs},
            {"patience", c.training.patience},
            {"batch_size", c.training.batch_size},
            {"learning_rate", c.training.learning_rate},
            {"momentum", c.training.momentum},
            {"defense", defense_names.name(c.defense)},
            {"subspace_beta", c.subspace.beta},
            {"subspace_epochs", c.subspace.epochs},
            {"subspace_init", init_names.name(c.subspace.init_mode)},
            {"subspace_data_mode", data_mode_names.name(c.subspace.data_mode)},
            {"subspace_schedule", schedule_names.name(c.subspace.schedule)},
            {"subspace_objective", objective_names.name(c.subspace.distance_objective)},
            {"subspace_per_layer_cosine", c.subspace.per_layer_cosine},
            {"subspace_inference", inference_names.name(c.subspace_inference)},
            {"ensemble_samples", c.ensemble_samples},
            {"alpha_sampling", alpha_names.name(c.alpha_sampling)},
            {"checkpoint_every", c.checkpoint_every},
            {"checkpoint_samples", c.checkpoint_samples},
            {"augment_attackers", c.augment_attackers},
            {"augment_poison_rate", c.augment_poison_rate},
            {"augment_epsilon", c.augment_epsilon},
            {"adv_attackers", c.adv_attackers},
            {"adv_poison_rate", c.adv_poison_rate},
            {"adv_epsilon", c.adv_epsilon},
            {"spectral_top_k", c.spectral_top_k},
            {"ensemble_members", c.ensemble_members},
            {"output_dir", c.output_dir}};
}

/// Keys absent from `j` keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j) {
    using namespace detail;
    if (!j.is_object())
        throw ConfigError("config must be a JSON object");
    ExperimentConfig c;
    const json known = to_json(c);
    for (const auto& [key, value] : j.items())
        if (!known.contains(key))
            throw ConfigError("config: unknown key '" + key + "'");

    auto get = [&](const char* key, auto& out) {
        if (!j.contains(key))
            return;
        try {
            j.at(key).get_to(out);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config key '") + key + "': " + e.what());
        }
    };
    auto get_enum = [&](const char* key, const auto& names, auto& out) {
        std::string s;
        get(key, s);
        if (!s.empty())
            out = names.parse(key, s);
    };

    get("dataset", c.dataset);
    get("dataset_path", c.dataset_path);
    get("labels_path", c.labels_path);
    get("num_classes", c.num_classes);
    get("per_class", c.per_class);
    if (j.contains("dims")) {
        std::vector<int> d;
        get("dims", d);
        if (d.size() != 3)
            throw ConfigError("config key 'dims': expected [length, width, channels]");
        c.dims = {d[0], d[1], d[2]};
    }
    get("num_attackers", c.num_attackers);
    get("defender_fraction", c.defender_fraction);
    get("poison_rate", c.poison_rate);
    get("epsilon", c.epsilon);
    get("seed", c.seed);
    get("exclude_collisions", c.exclude_collisions);
    get_enum("architecture", arch_names, c.model.architecture);
    get("hidden_layers", c.model.hidden_layers);
    get_enum("loss", loss_names, c.model.loss_kind);
    get("max_epochs", c.training.max_epochs);
    get("patience", c.training.patience);
    get("batch_size", c.training.batch_size);
    get("learning_rate", c.training.learning_rate);
    get("momentum", c.training.momentum);
    get_enum("defense", defense_names, c.defense);
    get("subspace_beta", c.subspace.beta);
    get("subspace_epochs", c.subspace.epochs);
    get_enum("subspace_init", init_names, c.subspace.init_mode);
    get_enum("subspace_data_mode", data_mode_names, c.subspace.data_mode);
    get_enum("subspace_schedule", schedule_names, c.subspace.schedule);
    get_enum("subspace_objective", objective_names, c.subspace.distance_objective);
    get("subspace_per_layer_cosine", c.subspace.per_layer_cosine);
    get_enum("subspace_inference", inference_names, c.subspace_inference);
    get("ensemble_samples", c.ensemble_samples);
    get_enum("alpha_sampling", alpha_names, c.alpha_sampling);
    get("checkpoint_every", c.checkpoint_every);
    get("checkpoint_samples", c.checkpoint_samples);
    get("augment_attackers", c.augment_attackers);
    get("augment_poison_rate", c.augment_poison_rate);
    get("augment_epsilon", c.augment_epsilon);
    get("adv_attackers", c.adv_attackers);
    get("adv_poison_rate", c.adv_poison_rate);
    get("adv_epsilon", c.adv_epsilon);
    get("spectral_top_k", c.spectral_top_k);
    get("ensemble_members", c.ensemble_members);
    get("output_dir", c.output_dir);

    // The subspace shares the plain optimizer settings.
    c.subspace.batch_size = c.training.batch_size;
    c.subspace.learning_rate = c.training.learning_rate;
    c.subspace.momentum = c.training.momentum;
    c.model.input_dims = c.dims;
    c.model.num_classes = c.num_classes;
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

inline void ExperimentConfig::validate() const {
    if (dataset != "synthetic" && dataset != "idx" && dataset != "cifar10" && dataset != "sbd")
        throw ConfigError("config key 'dataset': expected synthetic, idx, cifar10 or sbd");
    if (dataset != "synthetic" && dataset_path.empty())
        throw ConfigError("config key 'dataset_path' is required for dataset " + dataset);
    if (dataset == "idx" && labels_path.empty())
        throw ConfigError("config key 'labels_path' is required for idx data");
    if (num_classes < 2 || per_class < 1)
        throw ConfigError("config: need num_classes >= 2 and per_class >= 1");
    if (num_attackers < 1)
        throw ConfigError("config: num_attackers must be >= 1");
    if ((defense == Defense::agent_subspace || defense == Defense::agent_indexing) && num_attackers < 2)
        throw ConfigError("config: " + defense_name(defense) + " needs num_attackers >= 2");
    if (!(defender_fraction > 0.0 && defender_fraction < 1.0))
        throw ConfigError("config: defender_fraction must be in (0, 1)");
    attack::AttackerConfig{1, epsilon, poison_rate, 0, 1}.validate();
    model.validate();
    training.validate();
    subspace.validate();
    if (ensemble_samples < 1 || checkpoint_samples < 1 || checkpoint_every < 0)
        throw ConfigError("config: ensemble/checkpoint sample counts must be >= 1 and checkpoint_every >= 0");
    if (augment_attackers < 1 || adv_attackers < 1)
        throw ConfigError("config: simulated attacker counts must be >= 1");
    attack::AttackerConfig{1, augment_epsilon, augment_poison_rate, 0, 1}.validate();
    attack::AttackerConfig{1, adv_epsilon, adv_poison_rate, 0, 1}.validate();
    if (spectral_top_k < 0 || ensemble_members < 0)
        throw ConfigError("config: spectral_top_k and ensemble_members must be >= 0");
}

/// FNV-1a over the canonical dump (sorted keys, defaults filled in).
inline std::string config_hash(const ExperimentConfig& c) {
    auto canonical = to_json(c);
    canonical.erase("output_dir");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << h;
    return out.str();
}

/// Worker cap from SB_THREADS; unset means the single-threaded reference mode.
inline int threads_from_env() {
    const char* v = std::getenv("SB_THREADS");
    if (v == nullptr || *v == '\0')
        return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1 || n > 1024)
        throw ConfigError(std::string("SB_THREADS must be a positive integer, got '") + v + "'");
    return static_cast<int>(n);
}

/// Module error tagged with the pipeline stage it came from.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what, bool config_error)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)), config_error_(config_error) {}
    const std::string& stage() const noexcept { return stage_; }
    bool config_error() const noexcept { return config_error_; }

private:
    std::string stage_;
    bool config_error_;
};

template <typename F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError& e) {
        throw StageError(stage, e.what(), true);
    } catch (const std::exception& e) {
        throw StageError(stage, e.what(), false);
    }
}

// ---------------------------------------------------------------------------
// Subspace model file: "SBS1", N (u32), M (u64), then N*M float64, all LE.

inline std::string encode_subspace(const defense::SubspaceModel& m) {
    io::ByteWriter w;
    w.put_bytes("SBS1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.endpoints.size()));
    w.put<std::uint64_t>(m.endpoints.empty() ? 0 : m.endpoints.front().size());
    for (const auto& p : m.endpoints)
        for (double v : p.values())
            w.put<double>(v);
    return w.bytes();
}

inline std::vector<nn::ParamVector> decode_subspace(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader r(bytes);
    r.need(4);
    if (std::string(reinterpret_cast<const char*>(r.cursor()), 4) != "SBS1")
        throw FormatError("SBS1: bad magic", 0);
    r.skip(4);
    const auto n = r.get<std::uint32_t>();
    const auto m = r.get<std::uint64_t>();
    if (r.remaining() != static_cast<std::size_t>(n) * m * sizeof(double))
        throw FormatError("SBS1: expected " + std::to_string(n * m * sizeof(double)) + " parameter bytes, actual " +
                              std::to_string(r.remaining()),
                          r.position());
    std::vector<nn::ParamVector> out;
    for (std::uint32_t i = 0; i < n; ++i) {
        nn::ParamVector p(m, 0.0);
        for (std::size_t k = 0; k < m; ++k)
            p[k] = r.get<double>();
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct CheckpointRow {
    int epoch = 0;
    double centre_clean_acc_backdoored = 0.0;
    double ensemble_clean_acc_backdoored = 0.0;
};

struct RunRecord {
    std::string config_hash;
    metrics::MetricsReport report;
    double wall_seconds = 0.0;
    json metadata;
    std::optional<defense::SubspaceModel> subspace;
    std::vector<CheckpointRow> checkpoints;
    std::vector<std::filesystem::path> files;
};

/// Data and attack stages, exposed for tools and tests.
struct PreparedGame {
    data::JointDataset clean;
    data::JointDataset poisoned;
    std::map<int, attack::AttackerConfig> attackers;
    std::map<int, attack::TriggerPattern> triggers;
    metrics::EvalSet eval;
};

inline std::vector<data::LabeledExample> load_examples(const ExperimentConfig& c) {
    if (c.dataset == "synthetic")
        return data::generate_synthetic(c.num_classes, c.per_class, c.dims, c.seed);
    if (c.dataset == "idx")
        return data::load_idx_images(c.dataset_path, c.labels_path, c.num_classes);
    if (c.dataset == "cifar10")
        return data::load_cifar10_binary(c.dataset_path);
    auto file = data::read_sbd(c.dataset_path);
    if (file.num_classes != c.num_classes || file.dims != c.dims)
        throw ConfigError("sbd file shape does not match num_classes/dims in the config");
    return std::move(file.examples);
}

inline PreparedGame prepare(const ExperimentConfig& c) {
    PreparedGame g;
    in_stage("data", [&] {
        const auto examples = load_examples(c);
        data::SplitConfig split;
        split.seed = c.seed;
        g.clean = data::partition(examples, c.num_attackers, c.defender_fraction, split, c.num_classes, c.dims);
    });
    in_stage("attack", [&] {
        g.poisoned = g.clean;
        for (int i = 1; i <= c.num_attackers; ++i) {
            const auto cfg = attack::make_attacker(i, c.epsilon, c.poison_rate, c.num_classes);
            g.attackers[i] = cfg;
            g.triggers[i] = attack::generate_trigger(cfg, c.dims);
            g.poisoned.attacker(i) = attack::poison_dataset(g.clean.attacker(i), cfg, g.triggers[i]);
        }
        g.eval = metrics::build_eval_set(g.clean, g.triggers, g.attackers);
    });
    return g;
}

namespace detail {

inline metrics::PredictFn params_predictor(const nn::ModelSpec& spec, nn::ParamVector p) {
    return [spec, p = std::move(p)](const nn::Batch& b, int) { return nn::forward(spec, p, b); };
}

inline json fit_metadata(const train::FitResult& r) {
    return {{"epochs_run", r.epochs_run}, {"best_epoch", r.best_epoch}};
}

inline metrics::PredictFn train_plain_with_meta(const ExperimentConfig& c, const data::JointDataset& joint,
                                                json& meta) {
    const auto fr =
        defense::fit_plain(c.model, joint.all_train(), joint.defender().test_examples, c.seed, c.training);
    meta["plain_training"] = fit_metadata(fr);
    return params_predictor(c.model, fr.params);
}

inline metrics::PredictFn augmented(const ExperimentConfig& c, const PreparedGame& g, int n, double p, double eps,
                                    defense::AugmentLabels labels, json& meta) {
    auto joint = g.poisoned;
    auto aug = defense::agent_augment(joint.defender().train_examples, n, p, eps, c.seed, c.num_classes, c.dims, labels);
    if (aug.skipped_attackers > 0)
        std::cerr << "warning: " << aug.skipped_attackers << " simulated attackers had an empty share and were skipped\n";
    meta["augmentation"] = {{"clean_count", aug.clean_count},
                            {"share_size", aug.share_size},
                            {"poisoned_count", aug.poisoned_count},
                            {"skipped_attackers", aug.skipped_attackers}};
    joint.defender().train_examples = std::move(aug.examples);
    return train_plain_with_meta(c, joint, meta);
}

inline double clean_acc_backdoored(const metrics::PredictFn& f, const metrics::EvalSet& eval) {
    std::vector<double> per;
    for (const auto& [id, inputs] : eval.backdoored) {
        std::vector<data::Image> images;
        std::vector<int> labels;
        for (const auto& x : inputs) {
            images.push_back(x.image);
            labels.push_back(x.clean_label);
        }
        per.push_back(metrics::clean_accuracy(f, images, labels, eval.dims, id));
    }
    return metrics::mean_std(per).mean;
}

}  // namespace detail

inline std::string trace_csv(const defense::SubspaceModel& m) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,endpoint,task_loss,mean_pairwise_cos_distance\n";
    for (const auto& r : m.trace)
        out << r.epoch << ',' << r.endpoint << ',' << r.task_loss << ',' << r.mean_pairwise_cosine_distance << '\n';
    return out.str();
}

inline std::string checkpoints_csv(const std::vector<CheckpointRow>& rows) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,centre_clean_acc_backdoored,ensemble_clean_acc_backdoored\n";
    for (const auto& r : rows)
        out << r.epoch << ',' << r.centre_clean_acc_backdoored << ',' << r.ensemble_clean_acc_backdoored << '\n';
    return out.str();
}

/// Writes the trace CSVs into `dir`. Runs without a trace are a no-op with a notice.
inline std::vector<std::filesystem::path> emit_traces(const RunRecord& record, const std::filesystem::path& dir) {
    if (!record.subspace) {
        std::cerr << "notice: run has no subspace trace; nothing to emit\n";
        return {};
    }
    std::vector<std::filesystem::path> files{dir / "trace.csv"};
    io::write_file_atomic(files.back(), trace_csv(*record.subspace));
    if (!record.checkpoints.empty()) {
        files.push_back(dir / "checkpoints.csv");
        io::write_file_atomic(files.back(), checkpoints_csv(record.checkpoints));
    }
    return files;
}

/// Deterministic document: identical configs give identical bytes.
inline std::string metrics_document(const ExperimentConfig& c, const RunRecord& r) {
    json doc;
    doc["config_hash"] = r.config_hash;
    doc["config"] = to_json(c);
    doc["config"].erase("output_dir");
    doc["metrics"] = metrics::to_json(r.report);
    doc["metadata"] = r.metadata;
    return doc.dump(2) + "\n";
}

inline std::string metrics_csv(const ExperimentConfig& c, const RunRecord& r) {
    const metrics::RunLabels labels{r.config_hash, defense_name(c.defense), c.num_attackers, c.poison_rate, c.epsilon,
                                    c.seed};
    return std::string(metrics::kCsvHeader) + "\n" + metrics::to_csv_row(labels, r.report) + "\n";
}

inline RunRecord run(const ExperimentConfig& c, int threads = 1) {
    const auto t0 = std::chrono::steady_clock::now();
    in_stage("config", [&] { c.validate(); });
    RunRecord rec;
    rec.config_hash = config_hash(c);
    rec.metadata["early_stopping"] =
        c.training.patience > 0
            ? "validation loss on the defender split, patience " + std::to_string(c.training.patience) + " epochs"
            : std::string("disabled");
    rec.metadata["subspace_early_stopping"] = "none; endpoints always run the configured epochs";

    const auto g = prepare(c);
    rec.metadata["real_poison_rate"] = attack::real_poison_rate(c.num_attackers, c.defender_fraction, c.poison_rate);
    json targets = json::object();
    for (const auto& [i, a] : g.attackers)
        targets[std::to_string(i)] = a.target_label;
    rec.metadata["target_labels"] = targets;

    const metrics::PredictFn predict = in_stage("train", [&]() -> metrics::PredictFn {
        json& meta = rec.metadata;
        switch (c.defense) {
        case Defense::none:
            return detail::train_plain_with_meta(c, g.poisoned, meta);
        case Defense::agent_indexing: {
            auto models = std::make_shared<defense::IndexedModels>(
                defense::train_agent_indexing(c.model, g.poisoned, c.seed, c.training));
            return [models](const nn::Batch& b, int agent) {
                return nn::forward(models->spec, models->route(agent), b);
            };
        }
        case Defense::agent_subspace: {
            defense::CheckpointFn checkpoint;
            if (c.checkpoint_every > 0) {
                checkpoint = [&](int epoch, const std::vector<nn::ParamVector>& endpoints) {
                    if ((epoch + 1) % c.checkpoint_every != 0)
                        return;
                    const defense::SubspaceModel snap{c.model, endpoints, {}};
                    const auto sets = defense::draw_alpha_sets(endpoints.size(), c.checkpoint_samples, c.seed,
                                                               c.alpha_sampling);
                    const metrics::PredictFn centre = detail::params_predictor(c.model, defense::subspace_centre(snap));
                    const metrics::PredictFn ens = [&](const nn::Batch& b, int) {
                        return defense::subspace_ensemble_predict(snap, b, sets);
                    };
                    rec.checkpoints.push_back({epoch + 1, detail::clean_acc_backdoored(centre, g.eval),
                                               detail::clean_acc_backdoored(ens, g.eval)});
                };
            }
            rec.subspace = defense::train_subspace(c.model, g.poisoned, c.subspace, c.seed, threads, checkpoint);
            const auto model = std::make_shared<defense::SubspaceModel>(*rec.subspace);
            meta["subspace_terminal_cos_distance"] = model->trace.back().mean_pairwise_cosine_distance;
            if (c.subspace_inference == SubspaceInference::centre)
                return detail::params_predictor(c.model, defense::subspace_centre(*model));
            auto sets = std::make_shared<std::vector<std::vector<double>>>(
                defense::draw_alpha_sets(model->endpoints.size(), c.ensemble_samples, c.seed, c.alpha_sampling));
            return [model, sets](const nn::Batch& b, int) {
                return defense::subspace_ensemble_predict(*model, b, *sets);
            };
        }
        case Defense::agent_augmentation:
            return detail::augmented(c, g, c.augment_attackers, c.augment_poison_rate, c.augment_epsilon,
                                     defense::AugmentLabels::random_target, meta);
        case Defense::backdoor_adv_training:
            return detail::augmented(c, g, c.adv_attackers, c.adv_poison_rate, c.adv_epsilon,
                                     defense::AugmentLabels::keep_clean, meta);
        case Defense::spectral_signatures: {
            const auto base = defense::train_plain(c.model, g.poisoned, c.seed, c.training);
            auto filtered = defense::spectral_signature_filter(c.model, g.poisoned, base, c.spectral_top_k);
            meta["spectral"] = {{"removed_per_class", filtered.removed_per_class},
                                {"removed_poisoned", filtered.removed_poisoned}};
            return detail::train_plain_with_meta(c, filtered.filtered, meta);
        }
        case Defense::deep_ensembles: {
            const int members = c.ensemble_members > 0 ? c.ensemble_members : c.num_attackers;
            meta["ensemble_members"] = members;
            auto model = std::make_shared<defense::EnsembleModel>(
                defense::train_deep_ensemble(c.model, g.poisoned, members, c.seed, c.training, threads));
            return [model](const nn::Batch& b, int) { return model->predict(b); };
        }
        }
        throw ConfigError("unhandled defense");
    });

    rec.report = in_stage("eval", [&] { return metrics::evaluate(predict, g.eval, c.exclude_collisions); });
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!c.output_dir.empty()) {
        in_stage("output", [&] {
            const std::filesystem::path dir(c.output_dir);
            rec.files.push_back(dir / "metrics.json");
            io::write_file_atomic(rec.files.back(), metrics_document(c, rec));
            rec.files.push_back(dir / "metrics.csv");
            io::write_file_atomic(rec.files.back(), metrics_csv(c, rec));
            if (rec.subspace) {
                rec.files.push_back(dir / "subspace.bin");
                io::write_file_atomic(rec.files.back(), encode_subspace(*rec.subspace));
                for (auto& f : emit_traces(rec, dir))
                    rec.files.push_back(f);
            }
            json info{{"config_hash", rec.config_hash}, {"wall_seconds", rec.wall_seconds}, {"threads", threads}};
            for (const auto& f : rec.files)
                info["files"].push_back(f.filename().string());
            io::write_file_atomic(dir / "run.json", info.dump(2) + "\n");
        });
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { num_attackers, p_epsilon, defense };

inline SweepAxis parse_axis(const std::string& s) {
    if (s == "N" || s == "num_attackers")
        return SweepAxis::num_attackers;
    if (s == "p_epsilon")
        return SweepAxis::p_epsilon;
    if (s == "defense")
        return SweepAxis::defense;
    throw ConfigError("sweep axis must be N, p_epsilon or defense, got '" + s + "'");
}

struct SweepEntry {
    std::string value;
    std::optional<RunRecord> record;
    std::string error;
    bool config_error = false;
};

/// Config for one sweep point: base with the axis value applied and seed
/// base_seed + index.
inline ExperimentConfig sweep_point(const ExperimentConfig& base, SweepAxis axis, const std::string& value,
                                    std::size_t index) {
    ExperimentConfig c = base;
    try {
        switch (axis) {
        case SweepAxis::num_attackers: {
            std::size_t used = 0;
            c.num_attackers = std::stoi(value, &used);
            if (used != value.size())
                throw std::invalid_argument(value);
            break;
        }
        case SweepAxis::p_epsilon: {
            std::size_t used = 0;
            c.poison_rate = c.epsilon = std::stod(value, &used);
            if (used != value.size())
                throw std::invalid_argument(value);
            break;
        }
        case SweepAxis::defense:
            c.defense = parse_defense(value);
            break;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("sweep value '" + value + "' is not valid for this axis");
    }
    c.seed = base.seed + index;
    if (!base.output_dir.empty())
        c.output_dir = (std::filesystem::path(base.output_dir) / ("run_" + std::to_string(index) + "_" + value)).string();
    c.validate();
    return c;
}

/// One run per value; a failing run is recorded and the sweep moves on.
inline std::vector<SweepEntry> sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                                     int threads = 1) {
    std::vector<SweepEntry> out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        SweepEntry e{values[i], std::nullopt, {}, false};
        try {
            const auto c = sweep_point(base, axis, values[i], i);
            e.record = run(c, threads);
        } catch (const StageError& err) {
            e.error = err.what();
            e.config_error = err.config_error();
        } catch (const ConfigError& err) {
            e.error = err.what();
            e.config_error = true;
        } catch (const std::exception& err) {
            e.error = err.what();
        }
        out.push_back(std::move(e));
    }
    return out;
}

inline std::string sweep_csv(const ExperimentConfig& base, SweepAxis axis, const std::vector<SweepEntry>& entries) {
    std::ostringstream out;
    out << "axis_value,status," << metrics::kCsvHeader << ",error\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        out << e.value << ',' << (e.record ? "ok" : "error") << ',';
        if (e.record) {
            const auto c = sweep_point(base, axis, e.value, i);
            const metrics::RunLabels labels{e.record->config_hash, defense_name(c.defense), c.num_attackers,
                                            c.poison_rate, c.epsilon, c.seed};
            out << metrics::to_csv_row(labels, e.record->report) << ',';
        } else {
            // Keep the column count fixed for failed runs.
            out << std::string(10, ',') << ',';
            std::string msg = e.error;
            for (char& ch : msg)
                if (ch == ',' || ch == '\n')
                    ch = ';';
            out << msg;
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace backfire::experiment
