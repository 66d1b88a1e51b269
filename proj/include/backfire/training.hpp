#pragma once

// Minibatch SGD over a fixed example set, with optional extra-gradient hook
// (used by the subspace regularizer) and validation-loss early stopping.

#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "backfire/datasets.hpp"
#include "backfire/nn_core.hpp"
#include "backfire/random.hpp"

namespace backfire::train {

struct TrainOptions {
    int max_epochs = 300;
    /// Epochs without validation-loss improvement before stopping; 0 disables.
    int patience = 10;
    int batch_size = 128;
    double learning_rate = 0.001;
    double momentum = 0.9;
    nn::InitMode init_mode = nn::InitMode::constant_shared;

    void validate() const {
        if (max_epochs < 1)
            throw ConfigError("training: max_epochs must be >= 1");
        if (patience < 0)
            throw ConfigError("training: patience must be >= 0");
        if (batch_size < 1)
            throw ConfigError("training: batch_size must be >= 1");
        nn::OptimState::zeros(0, learning_rate, momentum);
    }
};

/// Examples flattened once so minibatches are cheap row gathers.
class ExampleTable {
public:
    ExampleTable(std::span<const data::LabeledExample> examples, nn::Dims dims) : dims_(dims) {
        inputs_.reserve(examples.size() * dims.size());
        for (const auto& e : examples) {
            if (e.image.size() != dims.size())
                throw ConfigError("training set image does not match model dims");
            inputs_.insert(inputs_.end(), e.image.begin(), e.image.end());
            targets_.push_back(e.target());
        }
    }

    std::size_t size() const noexcept { return targets_.size(); }

    nn::Batch gather(std::span<const std::size_t> rows) const {
        nn::Batch b;
        b.dims = dims_;
        const std::size_t d = dims_.size();
        b.inputs.resize(rows.size() * d);
        b.labels.resize(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::copy_n(inputs_.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                        b.inputs.begin() + static_cast<std::ptrdiff_t>(r * d));
            b.labels[r] = targets_[rows[r]];
        }
        return b;
    }

    nn::Batch all() const { return {dims_, inputs_, targets_}; }

private:
    nn::Dims dims_;
    std::vector<double> inputs_;
    std::vector<int> targets_;
};

/// Adds to `grad` the gradient of an extra loss term evaluated at `params`.
using ExtraGradient = std::function<void(const nn::ParamVector& params, std::span<double> grad)>;

/// One model's optimizer + shuffle state, advanced one epoch at a time.
class EpochRunner {
public:
    EpochRunner(const nn::ModelSpec& spec, nn::ParamVector params, const TrainOptions& opts, std::uint64_t shuffle_seed)
        : spec_(spec),
          params_(std::move(params)),
          opt_(nn::OptimState::zeros(params_.size(), opts.learning_rate, opts.momentum)),
          batch_size_(static_cast<std::size_t>(opts.batch_size)),
          rng_(shuffle_seed) {}

    /// Returns the mean task loss over the epoch's minibatches.
    double run_epoch(const ExampleTable& table, int epoch, const ExtraGradient& extra = {}) {
        if (table.size() == 0)
            throw ConfigError("training: empty training set");
        order_.resize(table.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order_.size(); start += batch_size_) {
            const std::size_t len = std::min(batch_size_, order_.size() - start);
            const auto batch = table.gather(std::span<const std::size_t>(order_).subspan(start, len));
            nn::LossGrad lg;
            try {
                lg = nn::loss_and_grad(spec_, params_, batch);
            } catch (const TrainingDivergenceError&) {
                throw TrainingDivergenceError("training diverged", epoch);
            }
            if (extra)
                extra(params_, lg.grad);
            nn::sgd_step(params_, lg.grad, opt_);
            if (!params_.all_finite())
                throw TrainingDivergenceError("non-finite parameters", epoch);
            total += lg.loss;
            ++batches;
        }
        return total / static_cast<double>(batches);
    }

    const nn::ParamVector& params() const noexcept { return params_; }
    nn::ParamVector& params() noexcept { return params_; }

private:
    nn::ModelSpec spec_;
    nn::ParamVector params_;
    nn::OptimState opt_;
    std::size_t batch_size_;
    Rng rng_;
    std::vector<std::size_t> order_;
};

/// Mean loss of `params` over a whole table, evaluated in chunks.
inline double evaluate_loss(const nn::ModelSpec& spec, const nn::ParamVector& params, const ExampleTable& table) {
    std::vector<std::size_t> rows;
    double total = 0.0;
    for (std::size_t start = 0; start < table.size(); start += 512) {
        const std::size_t len = std::min<std::size_t>(512, table.size() - start);
        rows.resize(len);
        std::iota(rows.begin(), rows.end(), start);
        total += nn::loss_and_grad(spec, params, table.gather(rows)).loss * static_cast<double>(len);
    }
    return total / static_cast<double>(table.size());
}

struct FitResult {
    nn::ParamVector params;
    int epochs_run = 0;
    int best_epoch = 0;
    std::vector<double> train_loss;
    std::vector<double> val_loss;
};

/// Trains from `init`; with a validation set and patience > 0, stops after
/// `patience` non-improving epochs and returns the best-validation parameters.
inline FitResult fit(const nn::ModelSpec& spec, nn::ParamVector init, std::span<const data::LabeledExample> train,
                     std::span<const data::LabeledExample> validation, const TrainOptions& opts,
                     std::uint64_t shuffle_seed) {
    opts.validate();
    const ExampleTable table(train, spec.input_dims);
    const ExampleTable val(validation, spec.input_dims);
    const bool early_stop = opts.patience > 0 && val.size() > 0;

    EpochRunner runner(spec, std::move(init), opts, shuffle_seed);
    FitResult result;
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        result.train_loss.push_back(runner.run_epoch(table, epoch));
        result.epochs_run = epoch + 1;
        if (!early_stop)
            continue;
        const double v = evaluate_loss(spec, runner.params(), val);
        result.val_loss.push_back(v);
        if (v < best) {
            best = v;
            stale = 0;
            result.params = runner.params();
            result.best_epoch = epoch;
        } else if (++stale >= opts.patience) {
            break;
        }
    }
    if (!early_stop) {
        result.params = runner.params();
        result.best_epoch = result.epochs_run - 1;
    }
    return result;
}

}  // namespace backfire::train
