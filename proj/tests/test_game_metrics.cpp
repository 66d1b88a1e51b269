#include <gtest/gtest.h>

#include <cmath>

#include "backfire/game_metrics.hpp"
#include "backfire/random.hpp"

namespace metrics = backfire::metrics;
namespace nn = backfire::nn;

namespace {

const nn::Dims kDims{1, 1, 1};

/// One-hot predictor that always answers `label`.
metrics::PredictFn constant(int label, int k) {
    return [=](const nn::Batch& b, int) {
        nn::ProbMatrix p{b.size(), static_cast<std::size_t>(k), std::vector<double>(b.size() * k, 0.0)};
        for (std::size_t r = 0; r < p.rows; ++r)
            p.row(r)[static_cast<std::size_t>(label)] = 1.0;
        return p;
    };
}

/// Reads the label straight off the single pixel (pixel value = label / 10).
metrics::PredictFn oracle_predictor(int k) {
    return [=](const nn::Batch& b, int) {
        nn::ProbMatrix p{b.size(), static_cast<std::size_t>(k), std::vector<double>(b.size() * k, 0.0)};
        for (std::size_t r = 0; r < p.rows; ++r)
            p.row(r)[static_cast<std::size_t>(std::lround(b.inputs[r] * 10))] = 1.0;
        return p;
    };
}

metrics::EvalSet toy_eval() {
    metrics::EvalSet s;
    s.dims = kDims;
    // Attacker 1 targets 3; attacker 2 targets 5. Images encode the clean label.
    for (int y : {0, 1, 2, 3})
        s.backdoored[1].push_back({{y / 10.0}, y, 3});
    for (int y : {4, 5})
        s.backdoored[2].push_back({{y / 10.0}, y, 5});
    for (int y : {0, 1, 2, 3, 4, 5})
        s.clean.push_back({{y / 10.0}, y, y < 4 ? 1 : 2});
    return s;
}

}  // namespace

TEST(Payoffs, MeanAndPopulationStd) {
    const auto [att, def] = metrics::payoffs({{1, 0.2}, {2, 0.4}});
    EXPECT_NEAR(att.mean, 0.3, 1e-15);
    EXPECT_NEAR(att.std, 0.1, 1e-15);
    EXPECT_NEAR(def.mean, 0.7, 1e-15);
    EXPECT_NEAR(def.std, 0.1, 1e-15);
    EXPECT_THROW(metrics::payoffs({}), backfire::UndefinedMetricError);
}

TEST(BackfireGap, AccuracyMinusChance) {
    metrics::MetricsReport r;
    r.per_attacker_clean_acc_backdoored = {{1, 0.629}, {2, 0.115}};
    const auto gap = metrics::backfire_gap(r, 10);
    EXPECT_NEAR(gap.at(1), 0.529, 1e-12);
    EXPECT_NEAR(gap.at(2), 0.015, 1e-12);
}

TEST(Evaluate, CollisionsLeaveTheAsrDenominator) {
    const auto s = toy_eval();
    const auto always3 = constant(3, 10);
    EXPECT_DOUBLE_EQ(metrics::attack_success_rate(always3, s, 1, true), 1.0);
    EXPECT_DOUBLE_EQ(metrics::attack_success_rate(always3, s, 1, false), 1.0);
    const auto truthful = oracle_predictor(10);
    // Only the collision input (clean 3 = target 3) hits; it is excluded by default.
    EXPECT_DOUBLE_EQ(metrics::attack_success_rate(truthful, s, 1, true), 0.0);
    EXPECT_DOUBLE_EQ(metrics::attack_success_rate(truthful, s, 1, false), 0.25);
}

TEST(Evaluate, FullReport) {
    const auto r = metrics::evaluate(oracle_predictor(10), toy_eval());
    EXPECT_DOUBLE_EQ(r.clean_acc_clean_inputs, 1.0);
    EXPECT_DOUBLE_EQ(r.per_attacker_clean_acc_backdoored.at(1), 1.0);
    EXPECT_DOUBLE_EQ(r.attacker_payoff.mean, 0.0);
    EXPECT_DOUBLE_EQ(r.defender_payoff.mean, 1.0);

    const auto c = metrics::evaluate(constant(3, 10), toy_eval());
    EXPECT_DOUBLE_EQ(c.per_attacker_asr.at(1), 1.0);
    EXPECT_DOUBLE_EQ(c.per_attacker_asr.at(2), 0.0);
    EXPECT_DOUBLE_EQ(c.attacker_payoff.mean, 0.5);
    EXPECT_DOUBLE_EQ(c.attacker_payoff.std, 0.5);
    EXPECT_DOUBLE_EQ(c.clean_acc_clean_inputs, 1.0 / 6.0);
    EXPECT_DOUBLE_EQ(c.per_attacker_clean_acc_backdoored.at(1), 0.25);
}

TEST(Evaluate, QueriesCarryTheSubmittingAgent) {
    std::vector<int> seen;
    const metrics::PredictFn spy = [&](const nn::Batch& b, int agent) {
        seen.push_back(agent);
        return constant(0, 10)(b, agent);
    };
    metrics::evaluate(spy, toy_eval());
    EXPECT_EQ(seen, (std::vector<int>{1, 1, 2, 2, 1, 2}));
}

TEST(Evaluate, EmptySetsAreUndefined) {
    metrics::EvalSet s = toy_eval();
    s.backdoored[1] = {{{0.3}, 3, 3}};
    EXPECT_THROW(metrics::attack_success_rate(constant(0, 10), s, 1), backfire::UndefinedMetricError);
    EXPECT_THROW(metrics::attack_success_rate(constant(0, 10), s, 9), backfire::UndefinedMetricError);
    EXPECT_THROW(metrics::clean_accuracy(constant(0, 10), {}, {}, kDims), backfire::UndefinedMetricError);
}

TEST(Evaluate, UniformRandomPredictorScoresChance) {
    const int k = 10, n = 2000;
    metrics::EvalSet s;
    s.dims = kDims;
    backfire::Rng data_rng(1);
    for (int i = 0; i < n; ++i) {
        const int y = static_cast<int>(data_rng.index(k));
        s.backdoored[1].push_back({{y / 10.0}, y, 7});
        s.clean.push_back({{y / 10.0}, y, 1});
    }
    backfire::Rng rng(2);
    const metrics::PredictFn random = [&](const nn::Batch& b, int) {
        nn::ProbMatrix p{b.size(), static_cast<std::size_t>(k), std::vector<double>(b.size() * k, 0.0)};
        for (std::size_t r = 0; r < p.rows; ++r)
            p.row(r)[rng.index(k)] = 1.0;
        return p;
    };
    const auto r = metrics::evaluate(random, s, false);
    const double band = 3.0 * std::sqrt(0.1 * 0.9 / n);
    EXPECT_NEAR(r.per_attacker_asr.at(1), 0.1, band);
    EXPECT_NEAR(r.clean_acc_clean_inputs, 0.1, band);
    EXPECT_NEAR(r.clean_acc_backdoored.mean, 0.1, band);
}

TEST(Serialization, JsonRoundTripAndCsvRow) {
    const auto r = metrics::evaluate(constant(3, 10), toy_eval());
    const auto back = metrics::report_from_json(nlohmann::json::parse(metrics::to_json(r).dump()));
    EXPECT_EQ(back.per_attacker_asr, r.per_attacker_asr);
    EXPECT_EQ(back.per_attacker_clean_acc_backdoored, r.per_attacker_clean_acc_backdoored);
    EXPECT_EQ(back.clean_acc_clean_inputs, r.clean_acc_clean_inputs);
    EXPECT_EQ(back.attacker_payoff.std, r.attacker_payoff.std);

    const auto row = metrics::to_csv_row({"r0", "none", 2, 0.4, 0.4, 3407}, r);
    EXPECT_EQ(row.rfind("r0,none,2,0.40000000000000002,0.40000000000000002,3407,0.5,0.5,", 0), 0u) << row;
    EXPECT_EQ(std::count(row.begin(), row.end(), ','),
              std::count(metrics::kCsvHeader, metrics::kCsvHeader + std::strlen(metrics::kCsvHeader), ','));
}
