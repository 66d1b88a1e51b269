#include <gtest/gtest.h>

#include "backfire/datasets.hpp"
#include "backfire/training.hpp"

namespace data = backfire::data;
namespace nn = backfire::nn;
namespace train = backfire::train;

namespace {

struct Small {
    nn::ModelSpec spec;
    std::vector<data::LabeledExample> train_set, val_set;
};

Small small_problem() {
    Small s;
    s.spec.input_dims = {8, 8, 1};
    s.spec.hidden_layers = {16};
    s.spec.num_classes = 4;
    const auto ex = data::generate_synthetic(4, 40, s.spec.input_dims, 21);
    for (std::size_t i = 0; i < ex.size(); ++i)
        (i % 5 == 0 ? s.val_set : s.train_set).push_back(ex[i]);
    return s;
}

}  // namespace

TEST(Fit, DeterministicForFixedSeeds) {
    const auto s = small_problem();
    train::TrainOptions o;
    o.max_epochs = 5;
    o.learning_rate = 0.01;
    const auto init = nn::init_params(s.spec, 1, nn::InitMode::constant_shared);
    const auto a = train::fit(s.spec, init, s.train_set, s.val_set, o, 99);
    const auto b = train::fit(s.spec, init, s.train_set, s.val_set, o, 99);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.train_loss, b.train_loss);
    const auto c = train::fit(s.spec, init, s.train_set, s.val_set, o, 100);
    EXPECT_NE(a.params, c.params);
}

TEST(Fit, TrainingLossFalls) {
    const auto s = small_problem();
    train::TrainOptions o;
    o.max_epochs = 40;
    o.patience = 0;
    o.learning_rate = 0.01;
    const auto r = train::fit(s.spec, nn::init_params(s.spec, 3, nn::InitMode::constant_shared), s.train_set, {}, o, 5);
    ASSERT_EQ(r.epochs_run, 40);
    EXPECT_LT(r.train_loss.back(), 0.6 * r.train_loss.front());
    EXPECT_TRUE(r.val_loss.empty());
}

TEST(Fit, EarlyStoppingReturnsBestValidationEpoch) {
    const auto s = small_problem();
    train::TrainOptions o;
    o.max_epochs = 400;
    o.patience = 3;
    o.learning_rate = 0.05;
    const auto init = nn::init_params(s.spec, 3, nn::InitMode::constant_shared);
    const auto r = train::fit(s.spec, init, s.train_set, s.val_set, o, 5);
    ASSERT_LT(r.epochs_run, o.max_epochs);
    EXPECT_EQ(r.epochs_run, r.best_epoch + 1 + o.patience);
    const auto best = std::min_element(r.val_loss.begin(), r.val_loss.end()) - r.val_loss.begin();
    EXPECT_EQ(best, r.best_epoch);

    // Replaying best_epoch + 1 epochs without early stopping lands on the same parameters.
    auto replay_opts = o;
    replay_opts.patience = 0;
    replay_opts.max_epochs = r.best_epoch + 1;
    EXPECT_EQ(train::fit(s.spec, init, s.train_set, {}, replay_opts, 5).params, r.params);
}

TEST(Fit, RejectsBadOptions) {
    const auto s = small_problem();
    const auto init = nn::init_params(s.spec, 1, nn::InitMode::constant_shared);
    train::TrainOptions o;
    o.max_epochs = 0;
    EXPECT_THROW(train::fit(s.spec, init, s.train_set, s.val_set, o, 1), backfire::ConfigError);
    o = {};
    o.batch_size = 0;
    EXPECT_THROW(train::fit(s.spec, init, s.train_set, s.val_set, o, 1), backfire::ConfigError);
    o = {};
    EXPECT_THROW(train::fit(s.spec, init, {}, s.val_set, o, 1), backfire::ConfigError);
}

TEST(Fit, ExplodingLearningRateIsReportedAsDivergence) {
    const auto s = small_problem();
    train::TrainOptions o;
    o.max_epochs = 50;
    o.patience = 0;
    o.learning_rate = 1e200;
    try {
        train::fit(s.spec, nn::init_params(s.spec, 1, nn::InitMode::constant_shared), s.train_set, {}, o, 1);
        FAIL() << "expected divergence";
    } catch (const backfire::TrainingDivergenceError& e) {
        EXPECT_GE(e.epoch(), 0);
    }
}

TEST(EpochRunner, ExtraGradientIsAddedToEveryStep) {
    const auto s = small_problem();
    train::TrainOptions o;
    o.learning_rate = 0.01;
    o.momentum = 0.0;
    const train::ExampleTable table(s.train_set, s.spec.input_dims);
    const auto init = nn::init_params(s.spec, 1, nn::InitMode::constant_shared);
    train::EpochRunner plain(s.spec, init, o, 7);
    train::EpochRunner pushed(s.spec, init, o, 7);
    plain.run_epoch(table, 0);
    int calls = 0;
    pushed.run_epoch(table, 0, [&](const nn::ParamVector&, std::span<double> g) {
        ++calls;
        g[0] += 1.0;
    });
    const int batches = static_cast<int>((table.size() + 127) / 128);
    EXPECT_EQ(calls, batches);
    EXPECT_NEAR(plain.params()[0] - pushed.params()[0], 0.01 * batches, 1e-9);
}
