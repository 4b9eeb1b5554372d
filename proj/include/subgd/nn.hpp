#pragma once

// Fully connected networks over a flat parameter vector.
//
// Parameter layout, layer by layer: the fan_out x fan_in weight matrix
// (row-major), then the fan_out biases. Hidden layers use the configured
// activation; the output layer is affine.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "subgd/error.hpp"
#include "subgd/linalg.hpp"
#include "subgd/rng.hpp"

namespace subgd {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ValidationError("unknown activation '" + s + "'");
}

struct MlpConfig {
    std::vector<std::size_t> layer_sizes;
    Activation activation = Activation::relu;

    void validate() const {
        if (layer_sizes.size() < 2) throw ValidationError("MlpConfig: need at least an input and an output layer");
        for (auto s : layer_sizes)
            if (s == 0) throw ValidationError("MlpConfig: layer sizes must be >= 1");
    }

    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }
    std::size_t num_layers() const { return layer_sizes.size() - 1; }
    std::size_t max_width() const {
        std::size_t w = 0;
        for (auto s : layer_sizes) w = std::max(w, s);
        return w;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += (layer_sizes[l] + 1) * layer_sizes[l + 1];
        return n;
    }

    friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

/// Sinusoid regressor: two hidden layers of 40 ReLU units.
inline MlpConfig sinusoid_mlp_config() { return {{1, 40, 40, 1}, Activation::relu}; }

/// RLC derivative network: (v_C, i_L, v_in) -> 50 tanh units -> 2 outputs.
inline MlpConfig rlc_mlp_config() { return {{3, 50, 2}, Activation::tanh}; }


template <class T>
struct BasicLayerView {
    std::span<T> weights; // fan_out x fan_in, row-major
    std::span<T> biases;  // fan_out
    std::size_t fan_in;
    std::size_t fan_out;

    T& w(std::size_t out, std::size_t in) const { return weights[out * fan_in + in]; }
};

using LayerView = BasicLayerView<double>;
using ConstLayerView = BasicLayerView<const double>;

namespace detail {

template <class T>
std::vector<BasicLayerView<T>> make_layer_views(const MlpConfig& config, std::span<T> params) {
    if (params.size() != config.param_count())
        throw DimensionError("parameter vector has " + std::to_string(params.size()) + " entries, config needs " +
                             std::to_string(config.param_count()));
    std::vector<BasicLayerView<T>> views;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < config.num_layers(); ++l) {
        const std::size_t in = config.layer_sizes[l];
        const std::size_t out = config.layer_sizes[l + 1];
        BasicLayerView<T> v{params.subspan(offset, in * out), params.subspan(offset + in * out, out), in, out};
        offset += (in + 1) * out;
        views.push_back(v);
    }
    return views;
}

} // namespace detail

inline std::vector<LayerView> layer_views(const MlpConfig& config, std::span<double> params) {
    return detail::make_layer_views(config, params);
}

inline std::vector<ConstLayerView> layer_views(const MlpConfig& config, std::span<const double> params) {
    return detail::make_layer_views(config, params);
}

/// Per-layer weight matrices and bias vectors, for inspection and tests.
struct UnflattenedLayer {
    DenseMatrix weights;
    std::vector<double> biases;
    friend bool operator==(const UnflattenedLayer&, const UnflattenedLayer&) = default;
};

inline std::vector<UnflattenedLayer> unflatten(const MlpConfig& config, std::span<const double> params) {
    std::vector<UnflattenedLayer> out;
    for (const auto& v : layer_views(config, params)) {
        out.push_back({DenseMatrix(v.fan_out, v.fan_in, std::vector<double>(v.weights.begin(), v.weights.end())),
                       std::vector<double>(v.biases.begin(), v.biases.end())});
    }
    return out;
}

inline ParamVector flatten(const MlpConfig& config, const std::vector<UnflattenedLayer>& layers) {
    ParamVector params(config.param_count());
    auto views = layer_views(config, std::span<double>(params));
    if (views.size() != layers.size()) throw DimensionError("flatten: layer count mismatch");
    for (std::size_t l = 0; l < views.size(); ++l) {
        const auto& src = layers[l];
        if (src.weights.rows() != views[l].fan_out || src.weights.cols() != views[l].fan_in ||
            src.biases.size() != views[l].fan_out)
            throw DimensionError("flatten: layer " + std::to_string(l) + " has the wrong shape");
        std::copy(src.weights.data().begin(), src.weights.data().end(), views[l].weights.begin());
        std::copy(src.biases.begin(), src.biases.end(), views[l].biases.begin());
    }
    return params;
}

/// Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)); biases zero.
inline ParamVector mlp_init(const MlpConfig& config, Rng& stream) {
    config.validate();
    ParamVector params(config.param_count(), 0.0);
    for (auto& v : layer_views(config, std::span<double>(params))) {
        const double bound = std::sqrt(1.0 / static_cast<double>(v.fan_in));
        for (auto& w : v.weights) w = stream.uniform(-bound, bound);
    }
    return params;
}

/// Activations of one forward pass, kept for backpropagation.
/// pre[l] holds layer l+1 pre-activations, post[l] the layer l outputs
/// (post[0] is the input).
struct MlpTape {
    std::vector<std::vector<double>> pre;
    std::vector<std::vector<double>> post;

    explicit MlpTape(const MlpConfig& config) {
        post.resize(config.layer_sizes.size());
        pre.resize(config.num_layers());
        for (std::size_t l = 0; l < config.layer_sizes.size(); ++l) post[l].resize(config.layer_sizes[l]);
        for (std::size_t l = 0; l < config.num_layers(); ++l) pre[l].resize(config.layer_sizes[l + 1]);
    }

    std::span<const double> output() const { return post.back(); }
};

namespace detail {

inline double activate(Activation a, double z) { return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z); }

/// Derivative given pre-activation z and activation value y.
inline double activate_grad(Activation a, double z, double y) {
    return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - y * y;
}

} // namespace detail

/// Scratch buffers for repeated single-sample backward passes.
struct MlpBackwardScratch {
    std::vector<double> delta;
    std::vector<double> next;
    explicit MlpBackwardScratch(const MlpConfig& config) : delta(config.max_width()), next(config.max_width()) {}
};

/// Single-sample forward pass; fills the tape.
inline void forward_sample(const MlpConfig& config, const std::vector<ConstLayerView>& layers,
                           std::span<const double> input, MlpTape& tape) {
    std::copy(input.begin(), input.end(), tape.post[0].begin());
    const std::size_t last = layers.size() - 1;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const auto& in = tape.post[l];
        auto& z = tape.pre[l];
        auto& y = tape.post[l + 1];
        for (std::size_t o = 0; o < layer.fan_out; ++o) {
            const double s = layer.biases[o] + detail::dot_unchecked(layer.weights.data() + o * layer.fan_in, in.data(), layer.fan_in);
            z[o] = s;
            y[o] = l == last ? s : detail::activate(config.activation, s);
        }
    }
}

/// Backpropagates an output gradient through one recorded pass.
/// Accumulates parameter gradients into grad_layers; writes the input gradient
/// into grad_input when it is non-empty.
inline void backward_sample(const MlpConfig& config, const std::vector<ConstLayerView>& layers, const MlpTape& tape,
                            std::span<const double> grad_output, const std::vector<LayerView>& grad_layers,
                            std::span<double> grad_input, MlpBackwardScratch& scratch) {
    auto& delta = scratch.delta;
    auto& next = scratch.next;
    std::copy(grad_output.begin(), grad_output.end(), delta.begin());
    const std::size_t last = layers.size() - 1;
    for (std::size_t li = layers.size(); li-- > 0;) {
        const auto& layer = layers[li];
        const auto& gl = grad_layers[li];
        if (li != last) {
            const auto& z = tape.pre[li];
            const auto& y = tape.post[li + 1];
            for (std::size_t o = 0; o < layer.fan_out; ++o) delta[o] *= detail::activate_grad(config.activation, z[o], y[o]);
        }
        const auto& in = tape.post[li];
        const bool need_input_grad = li > 0 || !grad_input.empty();
        if (need_input_grad) std::fill(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(layer.fan_in), 0.0);
        for (std::size_t o = 0; o < layer.fan_out; ++o) {
            const double d = delta[o];
            gl.biases[o] += d;
            if (d == 0.0) continue;
            double* gw = gl.weights.data() + o * layer.fan_in;
            const double* w = layer.weights.data() + o * layer.fan_in;
            for (std::size_t i = 0; i < layer.fan_in; ++i) gw[i] += d * in[i];
            if (need_input_grad)
                for (std::size_t i = 0; i < layer.fan_in; ++i) next[i] += d * w[i];
        }
        if (li == 0) {
            if (!grad_input.empty()) std::copy(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(layer.fan_in), grad_input.begin());
        } else {
            std::copy(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(layer.fan_in), delta.begin());
        }
    }
}

inline DenseMatrix mlp_forward(const MlpConfig& config, std::span<const double> params, const DenseMatrix& inputs) {
    config.validate();
    if (inputs.cols() != config.input_dim())
        throw DimensionError("mlp_forward: inputs have " + std::to_string(inputs.cols()) + " columns, network expects " +
                             std::to_string(config.input_dim()));
    const auto layers = layer_views(config, params);
    MlpTape tape(config);
    DenseMatrix out(inputs.rows(), config.output_dim());
    for (std::size_t r = 0; r < inputs.rows(); ++r) {
        forward_sample(config, layers, inputs.row(r), tape);
        std::copy(tape.output().begin(), tape.output().end(), out.row(r).begin());
    }
    return out;
}

struct Batch {
    DenseMatrix inputs;  // batch x input_dim
    DenseMatrix targets; // batch x output_dim

    std::size_t size() const { return inputs.rows(); }

    void validate() const {
        if (inputs.rows() != targets.rows()) throw DimensionError("Batch: input and target row counts differ");
        if (!inputs.all_finite() || !targets.all_finite()) throw ValidationError("Batch: non-finite entries");
    }
};

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};

/// Mean squared error over batch rows and output dimensions, with its gradient.
/// When grad is empty only the loss is computed.
inline double mse_loss_grad(const MlpConfig& config, std::span<const double> params, const Batch& batch,
                            std::span<double> grad) {
    if (batch.size() == 0) throw ValidationError("mse_loss_grad: empty batch");
    if (batch.inputs.cols() != config.input_dim() || batch.targets.cols() != config.output_dim())
        throw DimensionError("mse_loss_grad: batch shape does not match network");
    const bool want_grad = !grad.empty();
    if (want_grad && grad.size() != params.size()) throw DimensionError("mse_loss_grad: gradient buffer length");

    const auto layers = layer_views(config, params);
    std::vector<LayerView> grad_layers;
    if (want_grad) {
        std::fill(grad.begin(), grad.end(), 0.0);
        grad_layers = layer_views(config, grad);
    }
    MlpTape tape(config);
    MlpBackwardScratch scratch(config);
    const std::size_t out_dim = config.output_dim();
    const double scale = 1.0 / static_cast<double>(batch.size() * out_dim);
    std::vector<double> dout(out_dim);
    double loss = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        forward_sample(config, layers, batch.inputs.row(r), tape);
        const auto y = tape.output();
        const auto t = batch.targets.row(r);
        for (std::size_t k = 0; k < out_dim; ++k) {
            const double e = y[k] - t[k];
            loss += e * e;
            dout[k] = 2.0 * e * scale;
        }
        if (want_grad) backward_sample(config, layers, tape, dout, grad_layers, {}, scratch);
    }
    return loss * scale;
}

inline LossGrad mse_loss_grad(const MlpConfig& config, std::span<const double> params, const Batch& batch) {
    LossGrad out;
    out.grad.assign(params.size(), 0.0);
    out.loss = mse_loss_grad(config, params, batch, out.grad);
    return out;
}

} // namespace subgd
