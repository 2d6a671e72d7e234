#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cohesion/ops.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

/// Ordered list of (name, leaf tensor) pairs. Copies share the underlying
/// nodes, so optimizers and checkpoints see the live parameters.
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
std::vector<Tensor<T>> param_tensors(const NamedParams<T>& params) {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

/// Weight initialization: truncated normal (two standard deviations) with
/// scale 1/sqrt(fan_in).
template <typename T>
Tensor<T> init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(shape_size(shape));
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
    return Tensor<T>::from_values(std::move(shape), std::move(v), true);
}

/// Adds a per-channel bias to a [batch, channels, h, w] activation.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 4 || bias.size() != x.shape()[1]) {
        throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                             " does not match channels of " + shape_str(x.shape()));
    }
    const std::size_t b = x.shape()[0], c = x.shape()[1];
    const std::size_t plane = x.shape()[2] * x.shape()[3];
    const auto& xv = x.values();
    const auto& bv = bias.values();
    std::vector<T> out(xv.size());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t off = (bi * c + ci) * plane;
            for (std::size_t i = 0; i < plane; ++i) out[off + i] = xv[off + i] + bv[ci];
        }
    detail::check_finite(out, "add_channel_bias");
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x, bias},
        [b, c, plane](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            detail::Node<T>& pb = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const std::size_t off = (bi * c + ci) * plane;
                        for (std::size_t i = 0; i < plane; ++i) pb.grad[ci] += self.grad[off + i];
                    }
            }
        });
}

/// Fully connected layer; input [batch, in] -> [batch, out].
template <typename T>
struct Dense {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]; empty when the layer feeds a normalization
    bool use_bias;

    // Layers followed directly by batch normalization should pass
    // use_bias = false: the mean subtraction cancels any uniform shift, so
    // such a bias would have exactly zero gradient everywhere.
    Dense(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
        : weight(init_weight<T>({in, out}, in, rng)),
          bias(with_bias ? Tensor<T>::zeros({out}, true) : Tensor<T>()),
          use_bias(with_bias) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto h = matmul(x, weight);
        return use_bias ? add(h, bias) : h;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        if (use_bias) out.emplace_back(prefix + ".bias", bias);
    }
};

/// Valid convolution layer with per-channel bias.
template <typename T>
struct Conv2dLayer {
    Tensor<T> kernel;  // [filters, in_channels, kh, kw]
    Tensor<T> bias;    // [filters]
    std::size_t stride;

    Conv2dLayer(std::size_t in_channels, std::size_t filters, std::size_t ksize,
                std::size_t stride_, Rng& rng)
        : kernel(init_weight<T>({filters, in_channels, ksize, ksize},
                                in_channels * ksize * ksize, rng)),
          bias(Tensor<T>::zeros({filters}, true)),
          stride(stride_) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        return add_channel_bias(conv2d(x, kernel, stride), bias);
    }

    void collect(const std::string& prefix, NamedParams<T>& out) const {
        out.emplace_back(prefix + ".kernel", kernel);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Batch normalization layer over the trailing feature axis.
template <typename T>
struct BatchNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    RunningStats<T> running;

    explicit BatchNormLayer(std::size_t features)
        : gamma(Tensor<T>::full({features}, T(1), true)),
          beta(Tensor<T>::zeros({features}, true)),
          running(RunningStats<T>::initial(features)) {}

    Tensor<T> operator()(const Tensor<T>& x, BatchNormMode mode) {
        return batch_norm(x, gamma, beta, running, mode);
    }

    // Running statistics ride along as untracked entries: optimizers and
    // gradient checks skip them, while checkpoints and best-epoch snapshots
    // restore the full normalization state.
    void collect(const std::string& prefix, NamedParams<T>& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
        out.emplace_back(prefix + ".running_mean", running.mean);
        out.emplace_back(prefix + ".running_var", running.var);
    }
};

/// Collapses all axes after the batch axis: [b, ...] -> [b, rest].
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    if (x.rank() < 2) {
        throw DimensionError("flatten: input must have a batch axis, got " +
                             shape_str(x.shape()));
    }
    return reshape(x, {x.shape()[0], x.size() / x.shape()[0]});
}

}  // namespace cohesion
