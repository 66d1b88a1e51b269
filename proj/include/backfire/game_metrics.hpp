#pragma once

// The three accuracy metrics of the backdoor game and the payoffs built on
// them:
//   (1) attack success rate: backdoored inputs predicted as the poison label
//   (2) clean-label accuracy on clean inputs
//   (3) clean-label accuracy on backdoored inputs
// Attacker payoff is mean +- std of (1) across attackers; defender payoff is
// (1 - mean) +- the same std.

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "backfire/attack.hpp"
#include "backfire/datasets.hpp"
#include "backfire/error.hpp"
#include "backfire/nn_core.hpp"

namespace backfire::metrics {

using data::Image;

struct BackdooredInput {
    Image image;
    int clean_label = 0;
    int poison_label = 0;
};

struct CleanInput {
    Image image;
    int clean_label = 0;
    /// Agent that would submit this query; used by routing predictors.
    int agent_id = 0;
};

struct EvalSet {
    nn::Dims dims;
    std::map<int, std::vector<BackdooredInput>> backdoored;
    std::vector<CleanInput> clean;
};

/// Class probabilities for a batch of queries submitted by `agent_id`.
using PredictFn = std::function<nn::ProbMatrix(const nn::Batch& batch, int agent_id)>;

struct Payoff {
    double mean = 0.0;
    double std = 0.0;
};

struct MetricsReport {
    std::map<int, double> per_attacker_asr;
    double clean_acc_clean_inputs = 0.0;
    std::map<int, double> per_attacker_clean_acc_backdoored;
    Payoff attacker_payoff;
    Payoff defender_payoff;
    Payoff clean_acc_backdoored;
};

/// Backdoored set for attacker i: its trigger applied to every example of its
/// reserved test split. Clean set: the untouched test splits of all attackers.
inline EvalSet build_eval_set(const data::JointDataset& clean_joint, const std::map<int, attack::TriggerPattern>& triggers,
                              const std::map<int, attack::AttackerConfig>& attackers) {
    EvalSet set;
    set.dims = clean_joint.dims;
    for (int i = 1; i <= clean_joint.num_attackers(); ++i) {
        const auto& trigger = triggers.at(i);
        const auto& cfg = attackers.at(i);
        auto& bd = set.backdoored[i];
        for (const auto& e : clean_joint.attacker(i).test_examples) {
            bd.push_back({attack::apply_trigger(e.image, trigger), e.clean_label, cfg.target_label});
            set.clean.push_back({e.image, e.clean_label, i});
        }
    }
    return set;
}

namespace detail {

inline std::vector<int> predict_labels(const PredictFn& predict, const std::vector<Image>& images, nn::Dims dims,
                                       int agent_id) {
    std::vector<int> out;
    out.reserve(images.size());
    constexpr std::size_t chunk = 1024;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t len = std::min(chunk, images.size() - start);
        const auto batch = data::make_image_batch(std::span<const Image>(images).subspan(start, len), dims);
        const auto labels = predict(batch, agent_id).argmax();
        out.insert(out.end(), labels.begin(), labels.end());
    }
    return out;
}

}  // namespace detail

/// Fraction of attacker's backdoored inputs predicted as its poison label.
/// With `exclude_collisions`, inputs whose clean label equals the poison label
/// are left out of the denominator.
inline double attack_success_rate(const PredictFn& predict, const EvalSet& evalset, int attacker_id,
                                  bool exclude_collisions = true) {
    auto it = evalset.backdoored.find(attacker_id);
    if (it == evalset.backdoored.end())
        throw UndefinedMetricError("attack success rate: attacker " + std::to_string(attacker_id) + " not in evaluation set");
    std::vector<Image> images;
    std::vector<int> poison;
    for (const auto& x : it->second) {
        if (exclude_collisions && x.clean_label == x.poison_label)
            continue;
        images.push_back(x.image);
        poison.push_back(x.poison_label);
    }
    if (images.empty())
        throw UndefinedMetricError("attack success rate: empty evaluation set for attacker " + std::to_string(attacker_id));
    const auto pred = detail::predict_labels(predict, images, evalset.dims, attacker_id);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        hits += pred[i] == poison[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double clean_accuracy(const PredictFn& predict, const std::vector<Image>& inputs,
                             const std::vector<int>& clean_labels, nn::Dims dims, int agent_id = 0) {
    if (inputs.empty() || inputs.size() != clean_labels.size())
        throw UndefinedMetricError("clean accuracy: empty or mismatched evaluation set");
    const auto pred = detail::predict_labels(predict, inputs, dims, agent_id);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        hits += pred[i] == clean_labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Population mean and std.
inline Payoff mean_std(const std::vector<double>& values) {
    if (values.empty())
        throw UndefinedMetricError("mean/std of an empty set");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : values)
        var += (v - mean) * (v - mean);
    return {mean, std::sqrt(var / n)};
}

inline std::pair<Payoff, Payoff> payoffs(const std::map<int, double>& per_attacker_asr) {
    if (per_attacker_asr.empty())
        throw UndefinedMetricError("payoffs: need at least one attacker");
    std::vector<double> v;
    for (const auto& [id, asr] : per_attacker_asr)
        v.push_back(asr);
    const Payoff attacker = mean_std(v);
    return {attacker, {1.0 - attacker.mean, attacker.std}};
}

/// Per attacker: clean-label accuracy on backdoored inputs minus chance (1/k).
inline std::map<int, double> backfire_gap(const MetricsReport& report, int num_classes) {
    std::map<int, double> out;
    for (const auto& [id, acc] : report.per_attacker_clean_acc_backdoored)
        out[id] = acc - 1.0 / static_cast<double>(num_classes);
    return out;
}

inline MetricsReport evaluate(const PredictFn& predict, const EvalSet& evalset, bool exclude_collisions = true) {
    MetricsReport report;
    std::vector<double> clean_bd;
    for (const auto& [id, inputs] : evalset.backdoored) {
        report.per_attacker_asr[id] = attack_success_rate(predict, evalset, id, exclude_collisions);
        std::vector<Image> images;
        std::vector<int> labels;
        for (const auto& x : inputs) {
            images.push_back(x.image);
            labels.push_back(x.clean_label);
        }
        const double acc = clean_accuracy(predict, images, labels, evalset.dims, id);
        report.per_attacker_clean_acc_backdoored[id] = acc;
        clean_bd.push_back(acc);
    }

    // Clean inputs are grouped by submitting agent so routing predictors see the right id.
    std::map<int, std::pair<std::vector<Image>, std::vector<int>>> by_agent;
    for (const auto& x : evalset.clean) {
        by_agent[x.agent_id].first.push_back(x.image);
        by_agent[x.agent_id].second.push_back(x.clean_label);
    }
    std::size_t hits = 0, total = 0;
    for (const auto& [agent, group] : by_agent) {
        const double acc = clean_accuracy(predict, group.first, group.second, evalset.dims, agent);
        hits += static_cast<std::size_t>(std::llround(acc * static_cast<double>(group.first.size())));
        total += group.first.size();
    }
    if (total == 0)
        throw UndefinedMetricError("evaluate: no clean inputs");
    report.clean_acc_clean_inputs = static_cast<double>(hits) / static_cast<double>(total);

    std::tie(report.attacker_payoff, report.defender_payoff) = payoffs(report.per_attacker_asr);
    report.clean_acc_backdoored = mean_std(clean_bd);
    return report;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    auto per = [](const std::map<int, double>& m) {
        nlohmann::json o = nlohmann::json::object();
        for (const auto& [id, v] : m)
            o[std::to_string(id)] = v;
        return o;
    };
    j["per_attacker_asr"] = per(r.per_attacker_asr);
    j["clean_acc_clean_inputs"] = r.clean_acc_clean_inputs;
    j["per_attacker_clean_acc_backdoored"] = per(r.per_attacker_clean_acc_backdoored);
    j["attacker_payoff"] = {{"mean", r.attacker_payoff.mean}, {"std", r.attacker_payoff.std}};
    j["defender_payoff"] = {{"mean", r.defender_payoff.mean}, {"std", r.defender_payoff.std}};
    j["clean_acc_backdoored"] = {{"mean", r.clean_acc_backdoored.mean}, {"std", r.clean_acc_backdoored.std}};
    return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& [k, v] : j.at("per_attacker_asr").items())
        r.per_attacker_asr[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("per_attacker_clean_acc_backdoored").items())
        r.per_attacker_clean_acc_backdoored[std::stoi(k)] = v.get<double>();
    r.clean_acc_clean_inputs = j.at("clean_acc_clean_inputs").get<double>();
    r.attacker_payoff = {j.at("attacker_payoff").at("mean").get<double>(), j.at("attacker_payoff").at("std").get<double>()};
    r.defender_payoff = {j.at("defender_payoff").at("mean").get<double>(), j.at("defender_payoff").at("std").get<double>()};
    r.clean_acc_backdoored = {j.at("clean_acc_backdoored").at("mean").get<double>(),
                              j.at("clean_acc_backdoored").at("std").get<double>()};
    return r;
}

inline constexpr const char* kCsvHeader =
    "run_id,defense,N,p,epsilon,seed,asr_mean,asr_std,clean_acc_clean,clean_acc_backdoored_mean,"
    "clean_acc_backdoored_std";

struct RunLabels {
    std::string run_id;
    std::string defense;
    int num_attackers = 0;
    double poison_rate = 0.0;
    double epsilon = 0.0;
    std::uint64_t seed = 0;
};

inline std::string to_csv_row(const RunLabels& l, const MetricsReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << l.run_id << ',' << l.defense << ',' << l.num_attackers << ',' << l.poison_rate << ',' << l.epsilon << ','
        << l.seed << ',' << r.attacker_payoff.mean << ',' << r.attacker_payoff.std << ',' << r.clean_acc_clean_inputs
        << ',' << r.clean_acc_backdoored.mean << ',' << r.clean_acc_backdoored.std;
    return out.str();
}

}  // namespace backfire::metrics
