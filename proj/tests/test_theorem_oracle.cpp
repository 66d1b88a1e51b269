#include <gtest/gtest.h>

#include <cmath>

#include "backfire/theorem_oracle.hpp"

namespace oracle = backfire::oracle;

TEST(Roots, DoubleRootAndComplexCase) {
    // theta^2 - theta (2 - 2) + (1 - 1) = theta^2: double root at 0.
    const auto r = oracle::roots_given(2.0, 1.0, 1.0);
    ASSERT_TRUE(r.has_value());
    EXPECT_DOUBLE_EQ(r->plus, 0.0);
    EXPECT_DOUBLE_EQ(r->minus, 0.0);
    // theta^2 + 1 = 0 has no real root.
    EXPECT_FALSE(oracle::roots_given(2.0, 1.0, 0.0).has_value());
}

TEST(Roots, BothRootsZeroTheLoss) {
    const auto r = oracle::roots_given(1.5, 0.3, 0.7);
    ASSERT_TRUE(r.has_value());
    EXPECT_NEAR(oracle::regularized_loss(r->plus, 0.3, 1.5, 0.7), 0.0, 1e-14);
    EXPECT_NEAR(oracle::regularized_loss(r->minus, 0.3, 1.5, 0.7), 0.0, 1e-14);
    EXPECT_GE(r->plus, r->minus);
}

TEST(JointRoots, ResidualAndClosedFormIdentity) {
    const oracle::ScalarInstance inst{1.0, 0.8, 0.0, 0.5, 0.2, 0};
    const auto r = oracle::regularized_roots(inst);
    ASSERT_TRUE(r.converged);
    EXPECT_LT(std::abs(oracle::regularized_loss(r.theta_i, r.theta_j, inst.x_i, inst.y_i_poison)), 1e-8);
    EXPECT_LT(std::abs(oracle::regularized_loss(r.theta_j, r.theta_i, inst.x_j, inst.y_j_poison)), 1e-8);
    // Both zero conditions give theta x - y = -delta^2, hence
    // delta = y_i/x_i - y_j/x_j - delta^2 (1/x_i - 1/x_j).
    const double d = r.theta_i - r.theta_j;
    EXPECT_NEAR(d, inst.y_i_poison / inst.x_i - inst.y_j_poison / inst.x_j - d * d * (1 / inst.x_i - 1 / inst.x_j),
                1e-9);
    EXPECT_TRUE(r.branch_i == 1 || r.branch_i == -1);
}

TEST(JointRoots, SymmetricInstanceGivesEqualParameters) {
    const oracle::ScalarInstance inst{1.0, 1.0, 0.0, 0.4, 0.4, 0};
    const auto r = oracle::regularized_roots(inst);
    ASSERT_TRUE(r.converged);
    EXPECT_NEAR(r.theta_i, r.theta_j, 1e-9);
    EXPECT_NEAR(r.theta_i, 0.4, 1e-9);
}

TEST(Interpolation, EndpointsMidpointAndLinearity) {
    const oracle::ScalarInstance inst{2.0, 1.0, 1.0, 5.0, 0.0, 0};
    EXPECT_DOUBLE_EQ(oracle::interpolated_losses(inst, 1.0, 3.0, 1.0).theta_alpha, 1.0);
    EXPECT_DOUBLE_EQ(oracle::interpolated_losses(inst, 1.0, 3.0, 0.0).theta_alpha, 3.0);
    const auto mid = oracle::interpolated_losses(inst, 1.0, 3.0, 0.5);
    EXPECT_DOUBLE_EQ(mid.theta_alpha, 2.0);
    EXPECT_DOUBLE_EQ(mid.loss_clean, 3.0);   // |2*2 - 1|
    EXPECT_DOUBLE_EQ(mid.loss_poison, 1.0);  // |2*2 - 5|
    // theta_alpha is affine in alpha.
    const double t25 = oracle::interpolated_losses(inst, 1.0, 3.0, 0.25).theta_alpha;
    const double t75 = oracle::interpolated_losses(inst, 1.0, 3.0, 0.75).theta_alpha;
    EXPECT_NEAR(t25 + t75, 2 * mid.theta_alpha, 1e-15);
    EXPECT_THROW(oracle::interpolated_losses(inst, 1.0, 3.0, 1.2), backfire::InvalidCoefficientError);
    EXPECT_THROW(oracle::interpolated_losses(inst, 1.0, 3.0, -0.1), backfire::InvalidCoefficientError);
}

TEST(Premises, OrderingChecks) {
    EXPECT_TRUE((oracle::Premises{1, 2, 5, 1}.hold(5)));
    EXPECT_FALSE((oracle::Premises{2, 1, 5, 0.5}.hold(5)));
    EXPECT_FALSE((oracle::Premises{1, 2, 4, 1}.hold(5)));
}

TEST(Wilson, KnownInterval) {
    const auto [lo, hi] = oracle::wilson_interval(50, 100);
    EXPECT_NEAR(lo, 0.40383153, 1e-7);
    EXPECT_NEAR(hi, 0.59616847, 1e-7);
    const auto [lo0, hi0] = oracle::wilson_interval(0, 1000);
    EXPECT_NEAR(lo0, 0.0, 1e-15);
    EXPECT_NEAR(hi0, 0.0038267, 1e-6);
}

TEST(Summarize, DegenerateInstancesAreCountedNotScored) {
    oracle::SweepConfig cfg;
    const std::vector<oracle::ScalarInstance> insts{{1.0, 1.0, 0.4, 0.4, 0.4, 0}, {1.0, 0.8, 0.0, 0.5, 0.2, 0}};
    const auto s = oracle::summarize(insts, cfg);
    EXPECT_EQ(s.accepted, 2);
    EXPECT_EQ(s.degenerate, 1);
    EXPECT_EQ(s.rows.size(), 2 * cfg.alpha_grid.size());
    EXPECT_LT(s.max_root_residual, 1e-8);
}

TEST(Sweep, DeterministicAndAllRootsTight) {
    oracle::SweepConfig cfg;
    cfg.num_instances = 200;
    const auto a = oracle::theorem1_sweep(cfg);
    const auto b = oracle::theorem1_sweep(cfg);
    EXPECT_EQ(a.accepted, 200);
    EXPECT_EQ(a.attempts, b.attempts);
    EXPECT_EQ(a.clean_wins, b.clean_wins);
    EXPECT_EQ(oracle::rows_csv(a), oracle::rows_csv(b));
    EXPECT_LT(a.max_root_residual, 1e-8);
    EXPECT_EQ(a.attempts, a.accepted + a.rejected_complex + a.rejected_premise + a.non_convergent);
}

TEST(Sweep, RegressionPinsForDefaultConvention) {
    // With theta = alpha theta_i + (1 - alpha) theta_j and L1 < L2 enforced,
    // alpha near 1 sits at theta_i, where the clean residual is the larger one.
    oracle::SweepConfig cfg;
    cfg.num_instances = 300;
    const auto s = oracle::theorem1_sweep(cfg);
    ASSERT_TRUE(s.fraction.has_value());
    EXPECT_EQ(*s.fraction, 0.0);
    EXPECT_EQ(s.fraction_mirrored, 1.0);
    ASSERT_GT(s.crossover_count, 0);
    EXPECT_GT(s.mean_crossover_alpha, 0.3);
    EXPECT_LT(s.mean_crossover_alpha, 0.7);
}

TEST(Sweep, RejectsBadConfig) {
    oracle::SweepConfig cfg;
    cfg.alpha_grid = {0.0, 1.5};
    EXPECT_THROW(oracle::theorem1_sweep(cfg), backfire::ConfigError);
    cfg = {};
    cfg.num_instances = 0;
    EXPECT_THROW(oracle::theorem1_sweep(cfg), backfire::ConfigError);
}
