#include <gtest/gtest.h>

#include <set>

#include "backfire/attack.hpp"
#include "backfire/defenses.hpp"

namespace attack = backfire::attack;
namespace data = backfire::data;
namespace def = backfire::defense;
namespace nn = backfire::nn;

namespace {

const nn::Dims kDims{8, 8, 1};

nn::ModelSpec small_spec() {
    nn::ModelSpec s;
    s.input_dims = kDims;
    s.hidden_layers = {8};
    s.num_classes = 4;
    return s;
}

data::JointDataset poisoned_joint(int n) {
    auto joint = data::partition(data::generate_synthetic(4, 30, kDims, 4), n, 0.1, {}, 4, kDims);
    for (int i = 1; i <= n; ++i) {
        const auto cfg = attack::make_attacker(i, 0.4, 0.4, 4);
        joint.attacker(i) = attack::poison_dataset(joint.attacker(i), cfg, attack::generate_trigger(cfg, kDims), false);
    }
    return joint;
}

def::SubspaceConfig quick_subspace() {
    def::SubspaceConfig c;
    c.epochs = 4;
    c.learning_rate = 0.01;
    c.batch_size = 16;
    return c;
}

}  // namespace

TEST(AgentIndexing, SetsExcludeExactlyOneAttacker) {
    const auto joint = poisoned_joint(3);
    const auto sets = def::agent_indexed_sets(joint);
    ASSERT_EQ(sets.size(), 3u);
    for (const auto& [i, set] : sets) {
        EXPECT_EQ(set.size(), joint.train_size() - joint.attacker(i).train_examples.size());
        std::set<int> triggers;
        for (const auto& e : set)
            if (e.poisoned())
                triggers.insert(*e.trigger_id);
        EXPECT_EQ(triggers.count(i), 0u);
        EXPECT_EQ(triggers.size(), 2u);
    }
}

TEST(AgentIndexing, NeedsTwoAttackers) {
    EXPECT_THROW(def::agent_indexed_sets(poisoned_joint(1)), backfire::ConfigError);
}

TEST(AgentIndexing, RoutesQueriesByAgent) {
    const auto joint = poisoned_joint(2);
    def::TrainOptions o;
    o.max_epochs = 2;
    const auto models = def::train_agent_indexing(small_spec(), joint, 7, o);
    EXPECT_NE(models.route(1), models.route(2));
    EXPECT_THROW(models.route(3), backfire::ConfigError);
}

TEST(Subspace, ZeroBetaMatchesAgentIndexing) {
    const auto joint = poisoned_joint(2);
    auto cfg = quick_subspace();
    cfg.beta = 0.0;
    const auto sub = def::train_subspace(small_spec(), joint, cfg, 11);
    auto o = cfg.training_options();
    o.patience = 0;
    const auto idx = def::train_agent_indexing(small_spec(), joint, 11, o);
    EXPECT_EQ(sub.endpoints[0], idx.route(1));
    EXPECT_EQ(sub.endpoints[1], idx.route(2));
}

TEST(Subspace, ThreadCountDoesNotChangeResults) {
    const auto joint = poisoned_joint(3);
    for (auto schedule : {def::Schedule::parallel, def::Schedule::sequential}) {
        auto cfg = quick_subspace();
        cfg.schedule = schedule;
        const auto a = def::train_subspace(small_spec(), joint, cfg, 5, 1);
        const auto b = def::train_subspace(small_spec(), joint, cfg, 5, 3);
        EXPECT_EQ(a.endpoints, b.endpoints);
        ASSERT_EQ(a.trace.size(), b.trace.size());
        for (std::size_t r = 0; r < a.trace.size(); ++r) {
            EXPECT_EQ(a.trace[r].task_loss, b.trace[r].task_loss);
            EXPECT_EQ(a.trace[r].mean_pairwise_cosine_distance, b.trace[r].mean_pairwise_cosine_distance);
        }
    }
}

TEST(Subspace, TraceHasOneRowPerEpochAndEndpoint) {
    const auto sub = def::train_subspace(small_spec(), poisoned_joint(3), quick_subspace(), 5);
    EXPECT_EQ(sub.trace.size(), 4u * 3u);
    EXPECT_EQ(sub.epochs(), 4);
    // Shared initialization: every endpoint starts at the same point.
    EXPECT_NEAR(sub.trace[0].mean_pairwise_cosine_distance, 0.0, 1e-12);
    for (std::size_t r = 0; r < sub.trace.size(); ++r) {
        EXPECT_EQ(sub.trace[r].epoch, static_cast<int>(r / 3));
        EXPECT_EQ(sub.trace[r].endpoint, static_cast<int>(r % 3));
    }
    EXPECT_GT(sub.trace.back().mean_pairwise_cosine_distance, 0.0);
}

TEST(Subspace, MinimizingDistanceKeepsEndpointsCloserThanMaximizing) {
    const auto joint = poisoned_joint(2);
    auto cfg = quick_subspace();
    cfg.beta = 5.0;
    const auto near = def::train_subspace(small_spec(), joint, cfg, 5);
    cfg.distance_objective = def::DistanceObjective::maximize;
    const auto far = def::train_subspace(small_spec(), joint, cfg, 5);
    const auto d = [](const def::SubspaceModel& m) {
        return 1.0 - nn::cosine_similarity(m.endpoints[0], m.endpoints[1]);
    };
    EXPECT_LT(d(near), d(far));
}

TEST(Subspace, RejectsSingleAttackerAndBadConfig) {
    EXPECT_THROW(def::train_subspace(small_spec(), poisoned_joint(1), quick_subspace(), 1), backfire::ConfigError);
    auto cfg = quick_subspace();
    cfg.beta = -1.0;
    EXPECT_THROW(cfg.validate(), backfire::ConfigError);
}

TEST(SubspaceInference, OneHotCoefficientsGiveTheEndpoint) {
    const auto joint = poisoned_joint(2);
    const auto sub = def::train_subspace(small_spec(), joint, quick_subspace(), 5);
    const auto batch = data::make_batch(joint.defender().test_examples, kDims);
    EXPECT_EQ(def::eval_subspace(sub, batch, std::vector<double>{0.0, 1.0}).values,
              nn::forward(sub.spec, sub.endpoints[1], batch).values);
    const auto centre = def::subspace_centre(sub);
    for (std::size_t i = 0; i < centre.size(); ++i)
        EXPECT_DOUBLE_EQ(centre[i], 0.5 * (sub.endpoints[0][i] + sub.endpoints[1][i]));
}

TEST(SubspaceInference, EnsembleOfIdenticalEndpointsIsThatModel) {
    const auto spec = small_spec();
    const auto p = nn::init_params(spec, 3, nn::InitMode::per_point_random);
    const def::SubspaceModel sub{spec, {p, p, p}, {}};
    const auto batch = data::make_batch(data::generate_synthetic(4, 3, kDims, 1), kDims);
    const auto ens = def::subspace_ensemble_predict(sub, batch, 50, 9);
    const auto single = nn::forward(spec, p, batch);
    for (std::size_t i = 0; i < ens.values.size(); ++i)
        EXPECT_NEAR(ens.values[i], single.values[i], 1e-12);
}

TEST(SubspaceInference, AlphaSamplesStayInTheirDomain) {
    backfire::Rng rng(1);
    for (int s = 0; s < 200; ++s) {
        const auto a = def::sample_alphas(rng, 4, def::AlphaSampling::simplex);
        double total = 0.0;
        for (double v : a) {
            EXPECT_GE(v, 0.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        for (double v : def::sample_alphas(rng, 4, def::AlphaSampling::cone)) {
            EXPECT_GE(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
    EXPECT_EQ(def::draw_alpha_sets(3, 5, 2), def::draw_alpha_sets(3, 5, 2));
    EXPECT_THROW(def::draw_alpha_sets(3, 0, 2), backfire::ConfigError);
}

TEST(Augmentation, ShareArithmetic) {
    const auto defender = data::generate_synthetic(4, 250, kDims, 3);
    // 1000 examples: 400 stay clean, 600 split into 200 shares of 3.
    const auto r = def::agent_augment(defender, 200, 0.2, 0.2, 1, 4, kDims);
    EXPECT_EQ(r.clean_count, 400u);
    EXPECT_EQ(r.share_size, 3u);
    EXPECT_EQ(r.poisoned_count, 0u);  // floor(0.2 * 3) = 0
    EXPECT_EQ(r.examples.size(), 1000u);
    const auto r4 = def::agent_augment(defender, 200, 0.4, 0.2, 1, 4, kDims);
    EXPECT_EQ(r4.poisoned_count, 200u);
    for (std::size_t i = 0; i < r4.clean_count; ++i)
        EXPECT_FALSE(r4.examples[i].poisoned());
    std::set<std::vector<std::uint8_t>> masks;
    for (const auto& t : r4.triggers)
        masks.insert(t.binary_mask);
    EXPECT_EQ(masks.size(), 200u);
}

TEST(Augmentation, ZeroRateLeavesExamplesUntouched) {
    const auto defender = data::generate_synthetic(4, 10, kDims, 3);
    const auto r = def::agent_augment(defender, 5, 0.0, 0.4, 1, 4, kDims);
    EXPECT_EQ(r.poisoned_count, 0u);
    auto sorted = [](std::vector<data::LabeledExample> v) {
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.image < b.image; });
        return v;
    };
    EXPECT_EQ(sorted(r.examples), sorted(defender));
}

TEST(Augmentation, KeepCleanLabelsForAdversarialTraining) {
    const auto defender = data::generate_synthetic(4, 50, kDims, 3);
    const auto r = def::agent_augment(defender, 20, 0.4, 0.4, 1, 4, kDims, def::AugmentLabels::keep_clean);
    EXPECT_EQ(r.share_size, 6u);
    EXPECT_EQ(r.poisoned_count, 20u * 2u);
    for (const auto& e : r.examples) {
        if (e.poisoned()) {
            EXPECT_EQ(e.target(), e.clean_label);
        }
    }
}

TEST(Augmentation, TooManySimulatedAttackersAreSkipped) {
    const auto r = def::agent_augment(data::generate_synthetic(4, 2, kDims, 3), 10, 0.4, 0.4, 1, 4, kDims);
    EXPECT_EQ(r.share_size, 0u);
    EXPECT_EQ(r.skipped_attackers, 10);
}

TEST(Spectral, ScoresFlagTheOutlierDirection) {
    // The last row lies far out along the dominant axis.
    const std::vector<double> reps{0, 0, 1, 0.1, -1, -0.1, 0.5, 0, 10, 0};
    const auto scores = def::spectral_scores(reps, 5, 2);
    EXPECT_EQ(std::max_element(scores.begin(), scores.end()) - scores.begin(), 4);
    for (double s : scores)
        EXPECT_GE(s, 0.0);
}

TEST(Spectral, RemovesExactlyTopKTimesNPerLabel) {
    const auto joint = poisoned_joint(2);
    const auto spec = small_spec();
    const auto params = nn::init_params(spec, 1, nn::InitMode::per_point_random);
    const auto none = def::spectral_signature_filter(spec, joint, params, 0);
    EXPECT_EQ(none.filtered.train_size(), joint.train_size());

    const auto r = def::spectral_signature_filter(spec, joint, params, 2);
    std::size_t removed = 0;
    for (std::size_t c = 0; c < r.removed_per_class.size(); ++c) {
        EXPECT_EQ(r.removed_per_class[c], 4u);
        removed += r.removed_per_class[c];
    }
    EXPECT_EQ(joint.train_size() - r.filtered.train_size(), removed);
    EXPECT_TRUE(r.warnings.empty());
    EXPECT_THROW(def::spectral_signature_filter(spec, joint, params, -1), backfire::ConfigError);
}

TEST(DeepEnsemble, SingleMemberIsPlainTrainingFromRandomInit) {
    const auto joint = poisoned_joint(2);
    def::TrainOptions o;
    o.max_epochs = 3;
    const auto ens = def::train_deep_ensemble(small_spec(), joint, 1, 21, o);
    auto plain_opts = o;
    plain_opts.init_mode = nn::InitMode::per_point_random;
    EXPECT_EQ(ens.members[0], def::train_plain(small_spec(), joint, 21, plain_opts));
}

TEST(DeepEnsemble, MembersDifferAndThreadsAgree) {
    const auto joint = poisoned_joint(2);
    def::TrainOptions o;
    o.max_epochs = 2;
    const auto a = def::train_deep_ensemble(small_spec(), joint, 3, 21, o, 1);
    const auto b = def::train_deep_ensemble(small_spec(), joint, 3, 21, o, 2);
    EXPECT_EQ(a.members, b.members);
    EXPECT_NE(a.members[0], a.members[1]);
    EXPECT_NE(a.members[1], a.members[2]);
    EXPECT_THROW(def::train_deep_ensemble(small_spec(), joint, 0, 21, o), backfire::ConfigError);
    const auto batch = data::make_batch(joint.defender().test_examples, kDims);
    const auto p = a.predict(batch);
    for (std::size_t r = 0; r < p.rows; ++r) {
        double total = 0.0;
        for (double v : p.row(r))
            total += v;
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}
