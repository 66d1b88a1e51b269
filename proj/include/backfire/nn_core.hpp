#pragma once

// Minimal differentiable classifier over a flat parameter vector.
//
// Two architectures share one interface:
//   dense: flatten -> [dense + relu] x hidden -> dense head -> softmax
//   conv:  [3x3 valid conv + relu] x hidden -> global average pool -> dense head -> softmax
//
// Parameter layout is canonical: layers in forward order, each layer's
// weights (row-major, dense (out, in); conv (out, in, 3, 3)) followed by its
// biases. All flat-vector algebra (cosine, interpolation) relies on this.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "backfire/error.hpp"
#include "backfire/random.hpp"

namespace backfire::nn {

enum class Architecture { dense, conv };
enum class Activation { relu };
enum class LossKind { cross_entropy, mean_squared_error };
enum class InitMode { constant_shared, per_point_random };

struct Dims {
    int length = 0;
    int width = 0;
    int channels = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(length) * static_cast<std::size_t>(width) *
               static_cast<std::size_t>(channels);
    }

    friend bool operator==(const Dims&, const Dims&) = default;
};

struct ModelSpec {
    Dims input_dims{16, 16, 1};
    /// Dense: layer widths. Conv: output channels per 3x3 layer.
    std::vector<int> hidden_layers{64};
    int num_classes = 10;
    Architecture architecture = Architecture::dense;
    Activation activation = Activation::relu;
    LossKind loss_kind = LossKind::cross_entropy;

    void validate() const {
        if (num_classes < 2)
            throw ConfigError("model: num_classes must be >= 2");
        if (hidden_layers.empty())
            throw ConfigError("model: at least one hidden layer is required");
        if (input_dims.length < 1 || input_dims.width < 1 || input_dims.channels < 1)
            throw ConfigError("model: input dims must be positive");
        for (int h : hidden_layers)
            if (h < 1)
                throw ConfigError("model: hidden layer sizes must be positive");
        if (architecture == Architecture::conv) {
            const int shrink = 2 * static_cast<int>(hidden_layers.size());
            if (input_dims.length - shrink < 1 || input_dims.width - shrink < 1)
                throw ConfigError("model: input too small for the requested number of 3x3 conv layers");
        }
    }
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Layer {
    enum class Kind { dense, conv } kind = Kind::dense;
    int in = 0;   // features (dense) or channels (conv)
    int out = 0;
    int in_h = 0; // conv only: input spatial size
    int in_w = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;

    std::size_t weight_count() const noexcept {
        const std::size_t k = kind == Kind::conv ? 9 : 1;
        return static_cast<std::size_t>(in) * static_cast<std::size_t>(out) * k;
    }
    std::size_t end() const noexcept { return bias_offset + static_cast<std::size_t>(out); }
    int out_h() const noexcept { return kind == Kind::conv ? in_h - 2 : 1; }
    int out_w() const noexcept { return kind == Kind::conv ? in_w - 2 : 1; }
    int fan_in() const noexcept { return kind == Kind::conv ? in * 9 : in; }
    int fan_out() const noexcept { return kind == Kind::conv ? out * 9 : out; }
};

/// Layers in forward order; the last entry is always the dense classifier head.
inline std::vector<Layer> layer_layout(const ModelSpec& spec) {
    spec.validate();
    std::vector<Layer> layers;
    std::size_t offset = 0;
    auto push = [&](Layer layer) {
        layer.weight_offset = offset;
        layer.bias_offset = offset + layer.weight_count();
        offset = layer.end();
        layers.push_back(layer);
    };

    if (spec.architecture == Architecture::dense) {
        int in = static_cast<int>(spec.input_dims.size());
        for (int width : spec.hidden_layers) {
            push({Layer::Kind::dense, in, width});
            in = width;
        }
        push({Layer::Kind::dense, in, spec.num_classes});
    } else {
        int channels = spec.input_dims.channels;
        int h = spec.input_dims.length;
        int w = spec.input_dims.width;
        for (int out : spec.hidden_layers) {
            push({Layer::Kind::conv, channels, out, h, w});
            channels = out;
            h -= 2;
            w -= 2;
        }
        push({Layer::Kind::dense, channels, spec.num_classes});
    }
    return layers;
}

inline std::size_t param_count(const ModelSpec& spec) { return layer_layout(spec).back().end(); }

/// Width of the representation feeding the classifier head.
inline int feature_width(const ModelSpec& spec) { return layer_layout(spec).back().in; }

class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::size_t size, double fill = 0.0) : values_(size, fill) {}
    explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

    std::size_t size() const noexcept { return values_.size(); }
    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    std::span<double> span() noexcept { return values_; }
    std::span<const double> span() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool all_finite() const noexcept {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    std::vector<double> values_;
};

struct OptimState {
    double learning_rate = 0.001;
    double momentum = 0.9;
    std::vector<double> velocity;

    static OptimState zeros(std::size_t size, double learning_rate = 0.001, double momentum = 0.9) {
        if (!(learning_rate > 0.0))
            throw ConfigError("optimizer: learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("optimizer: momentum must be in [0, 1)");
        return {learning_rate, momentum, std::vector<double>(size, 0.0)};
    }
};

/// Inputs are stored (example, row, column, channel), pixels in [0, 1].
struct Batch {
    Dims dims;
    std::vector<double> inputs;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

/// Row-major (rows x cols) probabilities.
struct ProbMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    std::span<const double> row(std::size_t r) const noexcept { return {values.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) noexcept { return {values.data() + r * cols, cols}; }

    std::vector<int> argmax() const {
        std::vector<int> out(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            auto p = row(r);
            out[r] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        }
        return out;
    }
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed, InitMode mode) {
    const auto layers = layer_layout(spec);
    ParamVector params(layers.back().end(), 0.0);
    Rng rng(derive_seed(seed, mode == InitMode::constant_shared ? 0 : 1));
    for (const Layer& layer : layers) {
        const double limit = std::sqrt(6.0 / static_cast<double>(layer.fan_in() + layer.fan_out()));
        for (std::size_t i = 0; i < layer.weight_count(); ++i)
            params[layer.weight_offset + i] = rng.uniform(-limit, limit);
    }
    return params;
}

namespace detail {

inline void check_shapes(const ModelSpec& spec, const std::vector<Layer>& layers, const ParamVector& params,
                         const Batch& batch) {
    if (params.size() != layers.back().end())
        throw ConfigError("parameter vector length " + std::to_string(params.size()) + " does not match model (" +
                          std::to_string(layers.back().end()) + ")");
    if (batch.dims != spec.input_dims)
        throw ConfigError("batch dims do not match model input dims");
    if (batch.inputs.size() != batch.size() * spec.input_dims.size())
        throw ConfigError("batch inputs and labels have different leading dimension");
}

inline void dense_forward(const Layer& L, const double* params, const double* in, double* out, std::size_t n) {
    const double* W = params + L.weight_offset;
    const double* b = params + L.bias_offset;
    for (std::size_t s = 0; s < n; ++s) {
        const double* x = in + s * L.in;
        double* y = out + s * L.out;
        for (int o = 0; o < L.out; ++o) {
            const double* w = W + static_cast<std::size_t>(o) * L.in;
            double acc = b[o];
            for (int i = 0; i < L.in; ++i)
                acc += w[i] * x[i];
            y[o] = acc;
        }
    }
}

// din may be null for the first layer.
inline void dense_backward(const Layer& L, const double* params, const double* in, const double* dout, double* grad,
                           double* din, std::size_t n) {
    const double* W = params + L.weight_offset;
    double* dW = grad + L.weight_offset;
    double* db = grad + L.bias_offset;
    for (std::size_t s = 0; s < n; ++s) {
        const double* x = in + s * L.in;
        const double* d = dout + s * L.out;
        double* dx = din ? din + s * L.in : nullptr;
        for (int o = 0; o < L.out; ++o) {
            const double g = d[o];
            if (g == 0.0)
                continue;
            db[o] += g;
            double* dw = dW + static_cast<std::size_t>(o) * L.in;
            const double* w = W + static_cast<std::size_t>(o) * L.in;
            for (int i = 0; i < L.in; ++i)
                dw[i] += g * x[i];
            if (dx)
                for (int i = 0; i < L.in; ++i)
                    dx[i] += g * w[i];
        }
    }
}

inline void conv_forward(const Layer& L, const double* params, const double* in, double* out, std::size_t n) {
    const double* W = params + L.weight_offset;
    const double* b = params + L.bias_offset;
    const int oh = L.out_h(), ow = L.out_w();
    for (std::size_t s = 0; s < n; ++s) {
        const double* x = in + s * static_cast<std::size_t>(L.in_h) * L.in_w * L.in;
        double* y = out + s * static_cast<std::size_t>(oh) * ow * L.out;
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c)
                for (int o = 0; o < L.out; ++o) {
                    double acc = b[o];
                    const double* w = W + static_cast<std::size_t>(o) * L.in * 9;
                    for (int ch = 0; ch < L.in; ++ch)
                        for (int kr = 0; kr < 3; ++kr)
                            for (int kc = 0; kc < 3; ++kc)
                                acc += w[ch * 9 + kr * 3 + kc] *
                                       x[(static_cast<std::size_t>(r + kr) * L.in_w + (c + kc)) * L.in + ch];
                    y[(static_cast<std::size_t>(r) * ow + c) * L.out + o] = acc;
                }
    }
}

inline void conv_backward(const Layer& L, const double* params, const double* in, const double* dout, double* grad,
                          double* din, std::size_t n) {
    const double* W = params + L.weight_offset;
    double* dW = grad + L.weight_offset;
    double* db = grad + L.bias_offset;
    const int oh = L.out_h(), ow = L.out_w();
    const std::size_t in_stride = static_cast<std::size_t>(L.in_h) * L.in_w * L.in;
    for (std::size_t s = 0; s < n; ++s) {
        const double* x = in + s * in_stride;
        double* dx = din ? din + s * in_stride : nullptr;
        const double* d = dout + s * static_cast<std::size_t>(oh) * ow * L.out;
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c)
                for (int o = 0; o < L.out; ++o) {
                    const double g = d[(static_cast<std::size_t>(r) * ow + c) * L.out + o];
                    if (g == 0.0)
                        continue;
                    db[o] += g;
                    const double* w = W + static_cast<std::size_t>(o) * L.in * 9;
                    double* dw = dW + static_cast<std::size_t>(o) * L.in * 9;
                    for (int ch = 0; ch < L.in; ++ch)
                        for (int kr = 0; kr < 3; ++kr)
                            for (int kc = 0; kc < 3; ++kc) {
                                const std::size_t xi = (static_cast<std::size_t>(r + kr) * L.in_w + (c + kc)) * L.in + ch;
                                dw[ch * 9 + kr * 3 + kc] += g * x[xi];
                                if (dx)
                                    dx[xi] += g * w[ch * 9 + kr * 3 + kc];
                            }
                }
    }
}

struct Cache {
    std::vector<std::vector<double>> pre;   // per hidden layer, before relu
    std::vector<std::vector<double>> post;  // post[0] = input, post[l + 1] = relu(pre[l])
    std::vector<double> features;           // input to the head
    std::vector<double> logits;
};

inline Cache run_forward(const std::vector<Layer>& layers, const ParamVector& params, const Batch& batch) {
    const std::size_t n = batch.size();
    const std::size_t hidden = layers.size() - 1;
    Cache cache;
    cache.pre.resize(hidden);
    cache.post.resize(hidden + 1);
    cache.post[0] = batch.inputs;
    const double* p = params.span().data();

    for (std::size_t l = 0; l < hidden; ++l) {
        const Layer& L = layers[l];
        const std::size_t width = static_cast<std::size_t>(L.out_h()) * L.out_w() * L.out;
        cache.pre[l].assign(n * width, 0.0);
        if (L.kind == Layer::Kind::conv)
            conv_forward(L, p, cache.post[l].data(), cache.pre[l].data(), n);
        else
            dense_forward(L, p, cache.post[l].data(), cache.pre[l].data(), n);
        cache.post[l + 1] = cache.pre[l];
        for (double& v : cache.post[l + 1])
            v = v > 0.0 || std::isnan(v) ? v : 0.0;  // NaN passes through so divergence surfaces
    }

    const Layer& head = layers.back();
    if (hidden > 0 && layers[hidden - 1].kind == Layer::Kind::conv) {
        const Layer& last = layers[hidden - 1];
        const std::size_t area = static_cast<std::size_t>(last.out_h()) * last.out_w();
        const auto& act = cache.post[hidden];
        cache.features.assign(n * head.in, 0.0);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t a = 0; a < area; ++a)
                for (int ch = 0; ch < head.in; ++ch)
                    cache.features[s * head.in + ch] += act[(s * area + a) * head.in + ch];
        for (double& v : cache.features)
            v /= static_cast<double>(area);
    } else {
        cache.features = cache.post[hidden];
    }

    cache.logits.assign(n * head.out, 0.0);
    dense_forward(head, p, cache.features.data(), cache.logits.data(), n);
    return cache;
}

inline void softmax_rows(std::vector<double>& values, std::size_t cols) {
    for (std::size_t off = 0; off < values.size(); off += cols) {
        double* row = values.data() + off;
        const double mx = *std::max_element(row, row + cols);
        double total = 0.0;
        for (std::size_t k = 0; k < cols; ++k) {
            row[k] = std::exp(row[k] - mx);
            total += row[k];
        }
        for (std::size_t k = 0; k < cols; ++k)
            row[k] /= total;
    }
}

}  // namespace detail

inline ProbMatrix forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    const auto layers = layer_layout(spec);
    detail::check_shapes(spec, layers, params, batch);
    auto cache = detail::run_forward(layers, params, batch);
    detail::softmax_rows(cache.logits, static_cast<std::size_t>(spec.num_classes));
    return {batch.size(), static_cast<std::size_t>(spec.num_classes), std::move(cache.logits)};
}

/// Penultimate representation (batch x feature_width), the input to the classifier head.
inline std::vector<double> features(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    const auto layers = layer_layout(spec);
    detail::check_shapes(spec, layers, params, batch);
    return detail::run_forward(layers, params, batch).features;
}

/// Mean loss over the batch and its analytic gradient.
inline LossGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    const auto layers = layer_layout(spec);
    detail::check_shapes(spec, layers, params, batch);
    const std::size_t n = batch.size();
    const std::size_t k = static_cast<std::size_t>(spec.num_classes);
    if (n == 0)
        throw ConfigError("loss_and_grad: empty batch");
    for (int y : batch.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw ConfigError("loss_and_grad: label " + std::to_string(y) + " out of range");

    auto cache = detail::run_forward(layers, params, batch);
    std::vector<double> probs = cache.logits;
    detail::softmax_rows(probs, k);

    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    std::vector<double> dlogits(n * k, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        const double* p = probs.data() + s * k;
        double* d = dlogits.data() + s * k;
        const auto y = static_cast<std::size_t>(batch.labels[s]);
        if (spec.loss_kind == LossKind::cross_entropy) {
            // log p_y from logits directly; avoids log(0) when p_y underflows.
            const double* z = cache.logits.data() + s * k;
            const double mx = *std::max_element(z, z + k);
            double total = 0.0;
            for (std::size_t c = 0; c < k; ++c)
                total += std::exp(z[c] - mx);
            loss += (mx + std::log(total) - z[y]);
            for (std::size_t c = 0; c < k; ++c)
                d[c] = (p[c] - (c == y ? 1.0 : 0.0)) * inv_n;
        } else {
            double dot = 0.0;
            std::vector<double> g(k);
            for (std::size_t c = 0; c < k; ++c) {
                const double r = p[c] - (c == y ? 1.0 : 0.0);
                loss += r * r;
                g[c] = 2.0 * r * inv_n;
                dot += g[c] * p[c];
            }
            for (std::size_t c = 0; c < k; ++c)
                d[c] = p[c] * (g[c] - dot);
        }
    }
    loss *= inv_n;
    if (!std::isfinite(loss))
        throw TrainingDivergenceError("non-finite loss");

    std::vector<double> grad(params.size(), 0.0);
    const double* p = params.span().data();
    const std::size_t hidden = layers.size() - 1;
    const Layer& head = layers.back();
    std::vector<double> dfeat(n * head.in, 0.0);
    detail::dense_backward(head, p, cache.features.data(), dlogits.data(), grad.data(), dfeat.data(), n);

    std::vector<double> dpost;
    if (layers[hidden - 1].kind == Layer::Kind::conv) {
        const Layer& last = layers[hidden - 1];
        const std::size_t area = static_cast<std::size_t>(last.out_h()) * last.out_w();
        dpost.assign(n * area * head.in, 0.0);
        const double inv_area = 1.0 / static_cast<double>(area);
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t a = 0; a < area; ++a)
                for (int ch = 0; ch < head.in; ++ch)
                    dpost[(s * area + a) * head.in + ch] = dfeat[s * head.in + ch] * inv_area;
    } else {
        dpost = std::move(dfeat);
    }

    for (std::size_t l = hidden; l-- > 0;) {
        const Layer& L = layers[l];
        const auto& z = cache.pre[l];
        for (std::size_t i = 0; i < dpost.size(); ++i)
            if (z[i] <= 0.0)
                dpost[i] = 0.0;
        std::vector<double> din;
        double* din_ptr = nullptr;
        if (l > 0) {
            din.assign(cache.post[l].size(), 0.0);
            din_ptr = din.data();
        }
        if (L.kind == Layer::Kind::conv)
            detail::conv_backward(L, p, cache.post[l].data(), dpost.data(), grad.data(), din_ptr, n);
        else
            detail::dense_backward(L, p, cache.post[l].data(), dpost.data(), grad.data(), din_ptr, n);
        dpost = std::move(din);
    }
    return {loss, std::move(grad)};
}

/// velocity <- momentum * velocity + grad; params <- params - lr * velocity.
inline void sgd_step(ParamVector& params, std::span<const double> grad, OptimState& opt) {
    if (grad.size() != params.size() || opt.velocity.size() != params.size())
        throw ConfigError("sgd_step: parameter, gradient and velocity lengths differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        opt.velocity[i] = opt.momentum * opt.velocity[i] + grad[i];
        params[i] -= opt.learning_rate * opt.velocity[i];
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ConfigError("cosine_similarity: length mismatch");
    const double na = std::sqrt(dot(a, a));
    const double nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0)
        throw DegenerateVectorError("cosine_similarity: zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double cosine_similarity(const ParamVector& a, const ParamVector& b) {
    return cosine_similarity(a.span(), b.span());
}

/// Checks 0 <= alpha_i <= 1 and 0 <= sum(alpha) <= N.
inline void validate_alphas(std::span<const double> alphas, std::size_t count) {
    if (alphas.size() != count || count == 0)
        throw InvalidCoefficientError("interpolate: need one coefficient per point");
    double total = 0.0;
    for (double a : alphas) {
        if (!(a >= 0.0 && a <= 1.0))
            throw InvalidCoefficientError("interpolate: coefficient " + std::to_string(a) + " outside [0, 1]");
        total += a;
    }
    if (total > static_cast<double>(count))
        throw InvalidCoefficientError("interpolate: coefficient sum exceeds the number of points");
}

/// sum_i alphas[i] * points[i].
inline ParamVector interpolate(std::span<const ParamVector> points, std::span<const double> alphas) {
    validate_alphas(alphas, points.size());
    const std::size_t m = points.front().size();
    ParamVector out(m, 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (points[i].size() != m)
            throw ConfigError("interpolate: endpoints have different lengths");
        const double a = alphas[i];
        if (a == 0.0)
            continue;
        for (std::size_t j = 0; j < m; ++j)
            out[j] += a * points[i][j];
    }
    return out;
}

}  // namespace backfire::nn
