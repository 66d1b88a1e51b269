#include <gtest/gtest.h>

#include <cmath>

#include "backfire/attack.hpp"

namespace attack = backfire::attack;
namespace data = backfire::data;

namespace {

const data::Dims kDims{16, 16, 1};

data::Image ramp() {
    data::Image x(kDims.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] = static_cast<double>(i) / static_cast<double>(x.size());
    return x;
}

data::AgentDataset agent_with(int id, std::size_t train, std::size_t test) {
    data::AgentDataset d;
    d.agent_id = id;
    for (std::size_t i = 0; i < train; ++i)
        d.train_examples.push_back({ramp(), static_cast<int>(i % 10), std::nullopt, std::nullopt});
    for (std::size_t i = 0; i < test; ++i)
        d.test_examples.push_back({ramp(), static_cast<int>(i % 10), std::nullopt, std::nullopt});
    return d;
}

}  // namespace

TEST(Trigger, ZeroRateIsIdentity) {
    const auto t = attack::generate_trigger(attack::make_attacker(1, 0.0, 0.4, 10), kDims);
    EXPECT_EQ(attack::apply_trigger(ramp(), t), ramp());
}

TEST(Trigger, FullRateWritesTheMask) {
    const auto t = attack::generate_trigger(attack::make_attacker(1, 1.0, 0.4, 10), kDims);
    EXPECT_EQ(attack::apply_trigger(ramp(), t), t.mask_values);
}

TEST(Trigger, ApplyingTwiceEqualsApplyingOnce) {
    const auto t = attack::generate_trigger(attack::make_attacker(3, 0.4, 0.4, 10), kDims);
    const auto once = attack::apply_trigger(ramp(), t);
    EXPECT_EQ(attack::apply_trigger(once, t), once);
}

TEST(Trigger, BlendFormulaPerPixel) {
    const auto t = attack::generate_trigger(attack::make_attacker(2, 0.4, 0.4, 10), kDims);
    const auto x = ramp();
    const auto y = attack::apply_trigger(x, t);
    for (std::size_t i = 0; i < x.size(); ++i)
        EXPECT_DOUBLE_EQ(y[i], x[i] * (1 - t.binary_mask[i]) + t.mask_values[i] * t.binary_mask[i]);
}

TEST(Trigger, DensityTracksEpsilon) {
    // i.i.d. pixels: at 256 pixels one sd is 0.031, so hold 3 sd there and 0.05 at 3072 pixels.
    const double sd256 = std::sqrt(0.4 * 0.6 / 256.0);
    for (int id = 1; id <= 20; ++id) {
        const auto t = attack::generate_trigger(attack::make_attacker(id, 0.4, 0.4, 10), kDims);
        EXPECT_NEAR(t.density(), 0.4, 3 * sd256) << "attacker " << id;
        EXPECT_NEAR(attack::generate_trigger(attack::make_attacker(id, 0.4, 0.4, 10), {32, 32, 3}).density(), 0.4, 0.05);
        for (auto z : t.binary_mask)
            EXPECT_TRUE(z == 0 || z == 1);
        for (double m : t.mask_values) {
            EXPECT_GE(m, 0.0);
            EXPECT_LT(m, 1.0);
        }
    }
}

TEST(Trigger, DeterministicPerAttackerAndDistinctAcrossAttackers) {
    const auto a = attack::generate_trigger(attack::make_attacker(1, 0.4, 0.4, 10), kDims);
    const auto b = attack::generate_trigger(attack::make_attacker(1, 0.4, 0.4, 10), kDims);
    const auto c = attack::generate_trigger(attack::make_attacker(2, 0.4, 0.4, 10), kDims);
    EXPECT_EQ(a.binary_mask, b.binary_mask);
    EXPECT_EQ(a.mask_values, b.mask_values);
    EXPECT_NE(a.binary_mask, c.binary_mask);
}

TEST(Trigger, RejectsShapeMismatchAndBadConfig) {
    const auto t = attack::generate_trigger(attack::make_attacker(1, 0.4, 0.4, 10), kDims);
    data::Image small(10, 0.0);
    EXPECT_THROW(attack::apply_trigger_inplace(small, t), backfire::ConfigError);
    EXPECT_THROW(attack::generate_trigger(attack::AttackerConfig{1, 1.5, 0.4, 0, 1}, kDims), backfire::ConfigError);
    EXPECT_THROW(attack::generate_trigger(attack::AttackerConfig{1, 0.4, -0.1, 0, 1}, kDims), backfire::ConfigError);
}

TEST(TargetLabel, InRangeAndSeeded) {
    for (int id = 1; id <= 50; ++id) {
        const auto cfg = attack::make_attacker(id, 0.4, 0.4, 10);
        EXPECT_GE(cfg.target_label, 0);
        EXPECT_LT(cfg.target_label, 10);
        EXPECT_EQ(cfg.seed, static_cast<std::uint64_t>(id));
        EXPECT_EQ(cfg.target_label, attack::sample_target_label(10, cfg.seed));
    }
}

TEST(PoisonCount, FloorOfRateTimesSize) {
    EXPECT_EQ(attack::poison_count(0.4, 360), 144u);
    EXPECT_EQ(attack::poison_count(0.4, 90), 36u);
    EXPECT_EQ(attack::poison_count(0.3, 10), 3u);
    EXPECT_EQ(attack::poison_count(0.29, 100), 29u);
    EXPECT_EQ(attack::poison_count(0.4, 7), 2u);
    EXPECT_EQ(attack::poison_count(0.0, 1000), 0u);
    EXPECT_EQ(attack::poison_count(1.0, 13), 13u);
}

TEST(PoisonDataset, PoisonsExactlyFloorPN) {
    const auto cfg = attack::make_attacker(1, 0.4, 0.4, 10);
    const auto t = attack::generate_trigger(cfg, kDims);
    const auto d = attack::poison_dataset(agent_with(1, 360, 90), cfg, t);
    std::size_t train_poisoned = 0, test_poisoned = 0;
    for (const auto& e : d.train_examples)
        if (e.poisoned()) {
            ++train_poisoned;
            EXPECT_EQ(e.poison_label, cfg.target_label);
            EXPECT_EQ(e.trigger_id, 1);
            EXPECT_EQ(e.image, attack::apply_trigger(ramp(), t));
        } else {
            EXPECT_EQ(e.image, ramp());
        }
    for (const auto& e : d.test_examples)
        test_poisoned += e.poisoned() ? 1 : 0;
    EXPECT_EQ(train_poisoned, 144u);
    EXPECT_EQ(test_poisoned, 36u);

    const auto train_only = attack::poison_dataset(agent_with(1, 360, 90), cfg, t, false);
    for (const auto& e : train_only.test_examples)
        EXPECT_FALSE(e.poisoned());
}

TEST(PoisonDataset, RejectsForeignDataset) {
    const auto cfg = attack::make_attacker(1, 0.4, 0.4, 10);
    EXPECT_THROW(attack::poison_dataset(agent_with(2, 10, 0), cfg, attack::generate_trigger(cfg, kDims)),
                 backfire::ConfigError);
}

TEST(RealPoisonRate, SharePerAttacker) {
    EXPECT_NEAR(attack::real_poison_rate(2, 0.1, 0.4), 0.18, 1e-15);
    EXPECT_NEAR(attack::real_poison_rate(1, 0.1, 0.4), 0.36, 1e-15);
    EXPECT_THROW(attack::real_poison_rate(0, 0.1, 0.4), backfire::ConfigError);
}
