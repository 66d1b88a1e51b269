#pragma once

// Scalar model f(x; theta) = theta * x used to check the compressed-subspace
// argument numerically. Each endpoint minimizes
//   L(theta_i) = (theta_i x_i - y_i) + (theta_i - theta_j)^2
// and the pair (theta_i, theta_j) is the joint zero of both losses.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "backfire/error.hpp"
#include "backfire/random.hpp"

namespace backfire::oracle {

struct ScalarInstance {
    double x_i = 1.0;
    double x_j = 1.0;
    double y_i_clean = 0.0;
    double y_i_poison = 0.0;
    double y_j_poison = 0.0;
    std::uint64_t seed = 0;
};

/// Signed distance-regularized loss of one endpoint.
inline double regularized_loss(double theta, double theta_other, double x, double y) {
    return theta * x - y + (theta - theta_other) * (theta - theta_other);
}

struct RootPair {
    double plus = 0.0;
    double minus = 0.0;
};

/// Both zeros of theta^2 - theta (x - 2 theta_other) + (theta_other^2 - y).
/// Empty when the discriminant is negative (complex roots).
inline std::optional<RootPair> roots_given(double x, double theta_other, double y) {
    const double b = x - 2.0 * theta_other;
    const double disc = b * b - 4.0 * (theta_other * theta_other - y);
    if (!(disc >= 0.0))
        return std::nullopt;
    const double s = std::sqrt(disc);
    return RootPair{(-b + s) / 2.0, (-b - s) / 2.0};
}

struct RegularizedRoots {
    bool converged = false;
    /// Set when some substitution step met a negative discriminant.
    bool complex_root = false;
    double theta_i = 0.0;
    double theta_j = 0.0;
    /// Branch signs (+1 / -1) of the consistent pair.
    int branch_i = 0;
    int branch_j = 0;
    int iterations = 0;
    /// Both roots for each parameter with the opposing one held at the fixed point.
    RootPair theta_i_candidates;
    RootPair theta_j_candidates;
};

struct RootOptions {
    double tolerance = 1e-10;
    int max_iterations = 10000;
};

/// Alternating substitution over the four branch combinations, starting at 0.
inline RegularizedRoots regularized_roots(const ScalarInstance& inst, const RootOptions& opts = {}) {
    RegularizedRoots out;
    for (int bi : {1, -1}) {
        for (int bj : {1, -1}) {
            double ti = 0.0, tj = 0.0;
            for (int it = 1; it <= opts.max_iterations; ++it) {
                const auto ri = roots_given(inst.x_i, tj, inst.y_i_poison);
                if (!ri) {
                    out.complex_root = true;
                    break;
                }
                const double a = bi > 0 ? ri->plus : ri->minus;
                const auto rj = roots_given(inst.x_j, a, inst.y_j_poison);
                if (!rj) {
                    out.complex_root = true;
                    break;
                }
                const double b = bj > 0 ? rj->plus : rj->minus;
                const bool done = std::abs(a - ti) < opts.tolerance && std::abs(b - tj) < opts.tolerance;
                ti = a;
                tj = b;
                if (done) {
                    const auto ci = roots_given(inst.x_i, tj, inst.y_i_poison);
                    const auto cj = roots_given(inst.x_j, ti, inst.y_j_poison);
                    if (!ci || !cj)
                        break;
                    out.converged = true;
                    out.theta_i = ti;
                    out.theta_j = tj;
                    out.branch_i = bi;
                    out.branch_j = bj;
                    out.iterations = it;
                    out.theta_i_candidates = *ci;
                    out.theta_j_candidates = *cj;
                    return out;
                }
            }
        }
    }
    return out;
}

struct InterpolatedLosses {
    double theta_alpha = 0.0;
    double loss_clean = 0.0;
    double loss_poison = 0.0;
};

/// Residuals of theta_alpha = alpha theta_i + (1 - alpha) theta_j on x_i.
inline InterpolatedLosses interpolated_losses(const ScalarInstance& inst, double theta_i, double theta_j, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw InvalidCoefficientError("interpolated_losses: alpha must be in [0, 1]");
    // Exact endpoints, so alpha in {0, 1} reproduces the endpoint residuals bit for bit.
    const double theta = alpha == 1.0 ? theta_i : alpha == 0.0 ? theta_j : alpha * theta_i + (1.0 - alpha) * theta_j;
    const double out = theta * inst.x_i;
    return {theta, std::abs(out - inst.y_i_clean), std::abs(out - inst.y_i_poison)};
}

struct SweepConfig {
    int num_instances = 1000;
    std::uint64_t seed = 3407;
    std::vector<double> alpha_grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    double alpha_threshold = 0.9;
    /// Rejected-target premise: poison residual of theta_j must be >= margin x clean residual of theta_j.
    double rejection_margin = 5.0;
    double x_low = 0.5, x_high = 2.0;
    double y_low = -1.0, y_high = 1.0;
    /// Clean residual of theta_j is this multiple of the poison residual of theta_i.
    double clean_spread_low = 0.5, clean_spread_high = 1.5;
    RootOptions roots;
    /// Attempts allowed per requested instance before giving up.
    int max_attempts_per_instance = 1000;

    void validate() const {
        if (num_instances < 1)
            throw ConfigError("oracle: num_instances must be >= 1");
        if (alpha_grid.empty())
            throw ConfigError("oracle: alpha grid is empty");
        for (double a : alpha_grid)
            if (!(a >= 0.0 && a <= 1.0))
                throw ConfigError("oracle: alpha grid values must be in [0, 1]");
        if (!(x_low > 0.0 && x_low <= x_high) || !(y_low <= y_high) || !(clean_spread_low <= clean_spread_high))
            throw ConfigError("oracle: bad sampling ranges");
        if (!(rejection_margin >= 0.0))
            throw ConfigError("oracle: rejection margin must be >= 0");
    }
};

struct SweepRow {
    int instance_id = 0;
    double alpha = 0.0;
    double loss_clean = 0.0;
    double loss_poison = 0.0;
};

struct SweepSummary {
    int accepted = 0;
    int attempts = 0;
    int rejected_complex = 0;
    int rejected_premise = 0;
    int non_convergent = 0;
    int degenerate = 0;
    /// Accepted, non-degenerate instances where the clean residual is strictly
    /// smaller at every grid alpha >= threshold.
    int clean_wins = 0;
    std::optional<double> fraction;
    double ci_low = 0.0, ci_high = 0.0;
    /// Same count with alpha measured from theta_j (alpha -> 1 means theta_j).
    int clean_wins_mirrored = 0;
    std::optional<double> fraction_mirrored;
    /// Mean alpha where the two residuals cross, over instances where they cross in [0, 1].
    std::optional<double> mean_crossover_alpha;
    int crossover_count = 0;
    double max_root_residual = 0.0;
    std::vector<SweepRow> rows;
};

/// Wilson score interval at 95%.
inline std::pair<double, double> wilson_interval(int successes, int trials) {
    if (trials <= 0)
        return {0.0, 1.0};
    constexpr double z = 1.959963984540054;
    const double n = trials;
    const double p = successes / n;
    const double denom = 1.0 + z * z / n;
    const double centre = (p + z * z / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct Premises {
    double l1, l2, l3, l4;
    bool hold(double margin) const { return l1 < l2 && l4 < l2 && l3 >= margin * l4; }
};

inline Premises loss_premises(const ScalarInstance& inst, double theta_i, double theta_j) {
    return {std::abs(theta_i * inst.x_i - inst.y_i_poison), std::abs(theta_i * inst.x_i - inst.y_i_clean),
            std::abs(theta_j * inst.x_i - inst.y_i_poison), std::abs(theta_j * inst.x_i - inst.y_i_clean)};
}

/// Alpha where |theta_alpha x_i - y_clean| = |theta_alpha x_i - y_poison|, if within [0, 1].
inline std::optional<double> crossover_alpha(const ScalarInstance& inst, double theta_i, double theta_j) {
    if (theta_i == theta_j || inst.y_i_clean == inst.y_i_poison)
        return std::nullopt;
    const double mid_theta = (inst.y_i_clean + inst.y_i_poison) / (2.0 * inst.x_i);
    const double a = (mid_theta - theta_j) / (theta_i - theta_j);
    if (!(a >= 0.0 && a <= 1.0))
        return std::nullopt;
    return a;
}

namespace detail {

inline void score_instance(const ScalarInstance& inst, const RegularizedRoots& r, int id, const SweepConfig& cfg,
                           SweepSummary& s, double& crossover_sum) {
    for (double a : cfg.alpha_grid) {
        const auto l = interpolated_losses(inst, r.theta_i, r.theta_j, a);
        s.rows.push_back({id, a, l.loss_clean, l.loss_poison});
    }
    if (inst.y_i_clean == inst.y_i_poison) {
        ++s.degenerate;
        return;
    }
    bool wins = true, wins_mirrored = true, any = false;
    for (double a : cfg.alpha_grid) {
        if (a < cfg.alpha_threshold)
            continue;
        any = true;
        const auto l = interpolated_losses(inst, r.theta_i, r.theta_j, a);
        wins = wins && l.loss_clean < l.loss_poison;
        const auto m = interpolated_losses(inst, r.theta_i, r.theta_j, 1.0 - a);
        wins_mirrored = wins_mirrored && m.loss_clean < m.loss_poison;
    }
    s.clean_wins += any && wins ? 1 : 0;
    s.clean_wins_mirrored += any && wins_mirrored ? 1 : 0;
    if (const auto c = crossover_alpha(inst, r.theta_i, r.theta_j)) {
        crossover_sum += *c;
        ++s.crossover_count;
    }
}

inline void finish(SweepSummary& s, double crossover_sum) {
    const int scored = s.accepted - s.degenerate;
    if (scored > 0) {
        s.fraction = static_cast<double>(s.clean_wins) / scored;
        s.fraction_mirrored = static_cast<double>(s.clean_wins_mirrored) / scored;
        std::tie(s.ci_low, s.ci_high) = wilson_interval(s.clean_wins, scored);
    }
    if (s.crossover_count > 0)
        s.mean_crossover_alpha = crossover_sum / s.crossover_count;
}

inline double root_residual(const ScalarInstance& inst, const RegularizedRoots& r) {
    return std::max(std::abs(regularized_loss(r.theta_i, r.theta_j, inst.x_i, inst.y_i_poison)),
                    std::abs(regularized_loss(r.theta_j, r.theta_i, inst.x_j, inst.y_j_poison)));
}

}  // namespace detail

/// Scores caller-supplied instances without premise filtering.
inline SweepSummary summarize(const std::vector<ScalarInstance>& instances, const SweepConfig& cfg) {
    cfg.validate();
    SweepSummary s;
    double crossover_sum = 0.0;
    for (const auto& inst : instances) {
        ++s.attempts;
        const auto r = regularized_roots(inst, cfg.roots);
        if (!r.converged) {
            ++(r.complex_root ? s.rejected_complex : s.non_convergent);
            continue;
        }
        s.max_root_residual = std::max(s.max_root_residual, detail::root_residual(inst, r));
        detail::score_instance(inst, r, s.accepted, cfg, s, crossover_sum);
        ++s.accepted;
    }
    detail::finish(s, crossover_sum);
    return s;
}

/// Samples instances that satisfy the backdoor loss-ordering premises and
/// scores them. Attempt k draws from its own seed, so results depend only on
/// (config, seed).
inline SweepSummary theorem1_sweep(const SweepConfig& cfg) {
    cfg.validate();
    SweepSummary s;
    double crossover_sum = 0.0;
    const long long max_attempts = static_cast<long long>(cfg.num_instances) * cfg.max_attempts_per_instance;
    for (long long k = 0; s.accepted < cfg.num_instances && k < max_attempts; ++k) {
        ++s.attempts;
        const std::uint64_t inst_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
        Rng rng(inst_seed);
        ScalarInstance inst;
        inst.seed = inst_seed;
        inst.x_i = rng.uniform(cfg.x_low, cfg.x_high);
        inst.x_j = rng.uniform(cfg.x_low, cfg.x_high);
        inst.y_i_poison = rng.uniform(cfg.y_low, cfg.y_high);
        inst.y_j_poison = rng.uniform(cfg.y_low, cfg.y_high);
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double spread = rng.uniform(cfg.clean_spread_low, cfg.clean_spread_high);

        const auto r = regularized_roots(inst, cfg.roots);
        if (!r.converged) {
            ++(r.complex_root ? s.rejected_complex : s.non_convergent);
            continue;
        }
        // Clean target sits about as far from theta_j's output as the poison target from theta_i's.
        const double l1 = std::abs(r.theta_i * inst.x_i - inst.y_i_poison);
        inst.y_i_clean = r.theta_j * inst.x_i + sign * spread * l1;
        if (!loss_premises(inst, r.theta_i, r.theta_j).hold(cfg.rejection_margin)) {
            ++s.rejected_premise;
            continue;
        }
        s.max_root_residual = std::max(s.max_root_residual, detail::root_residual(inst, r));
        detail::score_instance(inst, r, s.accepted, cfg, s, crossover_sum);
        ++s.accepted;
    }
    detail::finish(s, crossover_sum);
    return s;
}

inline nlohmann::json to_json(const SweepSummary& s, const SweepConfig& cfg) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"instances_requested", cfg.num_instances},
            {"seed", cfg.seed},
            {"alpha_grid", cfg.alpha_grid},
            {"alpha_threshold", cfg.alpha_threshold},
            {"rejection_margin", cfg.rejection_margin},
            {"accepted", s.accepted},
            {"attempts", s.attempts},
            {"rejected_complex_roots", s.rejected_complex},
            {"rejected_premises", s.rejected_premise},
            {"non_convergent", s.non_convergent},
            {"degenerate", s.degenerate},
            {"clean_wins", s.clean_wins},
            {"fraction", opt(s.fraction)},
            {"fraction_ci95", {s.ci_low, s.ci_high}},
            {"fraction_alpha_from_theta_j", opt(s.fraction_mirrored)},
            {"mean_crossover_alpha", opt(s.mean_crossover_alpha)},
            {"crossover_count", s.crossover_count},
            {"max_root_residual", s.max_root_residual}};
}

inline std::string rows_csv(const SweepSummary& s) {
    std::ostringstream out;
    out.precision(17);
    out << "instance_id,alpha,loss_clean,loss_poison\n";
    for (const auto& r : s.rows)
        out << r.instance_id << ',' << r.alpha << ',' << r.loss_clean << ',' << r.loss_poison << '\n';
    return out.str();
}

}  // namespace backfire::oracle
