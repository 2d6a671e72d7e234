#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cohesion/layers.hpp"
#include "cohesion/ops.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

// ---------------------------------------------------------------------------
// Capsule primitives. These are differentiable nodes of their own because
// they need quotients and gathers the base op catalog deliberately omits.
// ---------------------------------------------------------------------------

/// Squashing nonlinearity along the last axis:
///   v = (|s|^2 / (1 + |s|^2)) * s / |s|.
/// Keeps direction, maps length into [0, 1). A zero vector stays zero and
/// receives zero gradient.
template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
    if (s.rank() < 1) throw DimensionError("squash: input must have at least one axis");
    const std::size_t dim = s.shape().back();
    const std::size_t slices = s.size() / dim;
    const auto& sv = s.values();
    std::vector<T> out(sv.size());
    std::vector<T> norms(slices);
    for (std::size_t sl = 0; sl < slices; ++sl) {
        T sq = T(0);
        for (std::size_t d = 0; d < dim; ++d) {
            const T v = sv[sl * dim + d];
            sq += v * v;
        }
        const T n = std::sqrt(sq);
        norms[sl] = n;
        const T scale = n > T(0) ? n / (T(1) + sq) : T(0);
        for (std::size_t d = 0; d < dim; ++d) out[sl * dim + d] = scale * sv[sl * dim + d];
    }
    detail::check_finite(out, "squash");
    return Tensor<T>::make_op(
        s.shape(), std::move(out), {s},
        [dim, slices, norms = std::move(norms)](detail::Node<T>& self) {
            detail::Node<T>& ps = *self.parents[0];
            if (!ps.requires_grad) return;
            ps.ensure_grad();
            for (std::size_t sl = 0; sl < slices; ++sl) {
                const T n = norms[sl];
                if (n == T(0)) continue;
                const T denom = T(1) + n * n;
                const T k = n / denom;
                // d(k)/d(n) = (1 - n^2) / (1 + n^2)^2, applied along s/|s|.
                T dot = T(0);
                for (std::size_t d = 0; d < dim; ++d) {
                    dot += self.grad[sl * dim + d] * ps.values[sl * dim + d];
                }
                const T radial = dot * (T(1) - n * n) / (n * denom * denom);
                for (std::size_t d = 0; d < dim; ++d) {
                    const std::size_t idx = sl * dim + d;
                    ps.grad[idx] += k * self.grad[idx] + radial * ps.values[idx];
                }
            }
        });
}

/// Divides each slice along `axis` by its sum. Used both for turning class
/// capsule lengths into a distribution and for normalizing coupling columns.
template <typename T>
Tensor<T> sum_normalize(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "sum_normalize");
    const auto split = detail::split_axis(x.shape(), ax);
    const auto& xv = x.values();
    std::vector<T> sums(split.outer * split.inner, T(0));
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.len; ++i) {
            const std::size_t base = (o * split.len + i) * split.inner;
            for (std::size_t in = 0; in < split.inner; ++in)
                sums[o * split.inner + in] += xv[base + in];
        }
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.len; ++i) {
            const std::size_t base = (o * split.len + i) * split.inner;
            for (std::size_t in = 0; in < split.inner; ++in)
                out[base + in] = xv[base + in] / sums[o * split.inner + in];
        }
    detail::check_finite(out, "sum_normalize");
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [split, sums = std::move(sums)](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            // p_i = x_i / S  =>  dx_j = (g_j - sum_i g_i p_i) / S.
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t in = 0; in < split.inner; ++in) {
                    const T S = sums[o * split.inner + in];
                    T dot = T(0);
                    for (std::size_t i = 0; i < split.len; ++i) {
                        const std::size_t idx = (o * split.len + i) * split.inner + in;
                        dot += self.grad[idx] * self.values[idx];
                    }
                    for (std::size_t i = 0; i < split.len; ++i) {
                        const std::size_t idx = (o * split.len + i) * split.inner + in;
                        px.grad[idx] += (self.grad[idx] - dot) / S;
                    }
                }
        });
}

/// Regroups a feature map [b, channels*dim, h, w] into capsule vectors
/// [b, channels*h*w, dim]; capsule (c, y, x) takes components from the dim
/// consecutive feature planes of channel block c at position (y, x).
template <typename T>
Tensor<T> primary_capsules(const Tensor<T>& x, std::size_t dim) {
    if (x.rank() != 4 || x.shape()[1] % dim != 0) {
        throw DimensionError("primary_capsules: cannot split " + shape_str(x.shape()) +
                             " into capsules of dim " + std::to_string(dim));
    }
    const std::size_t b = x.shape()[0];
    const std::size_t blocks = x.shape()[1] / dim;
    const std::size_t h = x.shape()[2], w = x.shape()[3];
    const std::size_t caps = blocks * h * w;
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    auto src_index = [&](std::size_t bi, std::size_t blk, std::size_t d, std::size_t y,
                         std::size_t xx) {
        return ((bi * blocks * dim + blk * dim + d) * h + y) * w + xx;
    };
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t blk = 0; blk < blocks; ++blk)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const std::size_t cap = (blk * h + y) * w + xx;
                    for (std::size_t d = 0; d < dim; ++d)
                        out[(bi * caps + cap) * dim + d] = xv[src_index(bi, blk, d, y, xx)];
                }
    return Tensor<T>::make_op(
        {b, caps, dim}, std::move(out), {x},
        [b, blocks, dim, h, w, caps](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t blk = 0; blk < blocks; ++blk)
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const std::size_t cap = (blk * h + y) * w + xx;
                            for (std::size_t d = 0; d < dim; ++d) {
                                const std::size_t src =
                                    ((bi * blocks * dim + blk * dim + d) * h + y) * w + xx;
                                px.grad[src] += self.grad[(bi * caps + cap) * dim + d];
                            }
                        }
        });
}

/// Per-pair linear predictions: u [b, nl, din], W [nl, nu, dout, din]
/// -> uhat [b, nl, nu, dout] with uhat[b,i,j] = W[i,j] * u[b,i].
template <typename T>
Tensor<T> capsule_predict(const Tensor<T>& u, const Tensor<T>& W) {
    if (u.rank() != 3 || W.rank() != 4 || W.shape()[0] != u.shape()[1] ||
        W.shape()[3] != u.shape()[2]) {
        throw DimensionError("capsule_predict: incompatible shapes, input " +
                             shape_str(u.shape()) + " vs transform " + shape_str(W.shape()));
    }
    const std::size_t b = u.shape()[0], nl = u.shape()[1], din = u.shape()[2];
    const std::size_t nu = W.shape()[1], dout = W.shape()[2];
    const auto& uv = u.values();
    const auto& wv = W.values();
    std::vector<T> out(b * nl * nu * dout, T(0));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < nl; ++i) {
            const T* urow = uv.data() + (bi * nl + i) * din;
            for (std::size_t j = 0; j < nu; ++j) {
                const T* wmat = wv.data() + ((i * nu + j) * dout) * din;
                T* orow = out.data() + ((bi * nl + i) * nu + j) * dout;
                for (std::size_t o = 0; o < dout; ++o) {
                    T acc = T(0);
                    const T* wrow = wmat + o * din;
                    for (std::size_t k = 0; k < din; ++k) acc += wrow[k] * urow[k];
                    orow[o] = acc;
                }
            }
        }
    detail::check_finite(out, "capsule_predict");
    return Tensor<T>::make_op(
        {b, nl, nu, dout}, std::move(out), {u, W},
        [b, nl, nu, din, dout](detail::Node<T>& self) {
            detail::Node<T>& pu = *self.parents[0];
            detail::Node<T>& pw = *self.parents[1];
            const bool need_u = pu.requires_grad;
            const bool need_w = pw.requires_grad;
            if (need_u) pu.ensure_grad();
            if (need_w) pw.ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t i = 0; i < nl; ++i) {
                    const T* urow = pu.values.data() + (bi * nl + i) * din;
                    T* ugrad = need_u ? pu.grad.data() + (bi * nl + i) * din : nullptr;
                    for (std::size_t j = 0; j < nu; ++j) {
                        const T* g = self.grad.data() + ((bi * nl + i) * nu + j) * dout;
                        const std::size_t woff = ((i * nu + j) * dout) * din;
                        for (std::size_t o = 0; o < dout; ++o) {
                            if (g[o] == T(0)) continue;
                            const T* wrow = pw.values.data() + woff + o * din;
                            for (std::size_t k = 0; k < din; ++k) {
                                if (need_u) ugrad[k] += g[o] * wrow[k];
                                if (need_w) pw.grad[woff + o * din + k] += g[o] * urow[k];
                            }
                        }
                    }
                }
        });
}

/// Weighted sum over the lower-capsule axis:
/// uhat [b, nl, nu, d], w [b, nl, nu] -> s [b, nu, d], s = sum_i w_i uhat_i.
template <typename T>
Tensor<T> weighted_sum_lower(const Tensor<T>& uhat, const Tensor<T>& w) {
    if (uhat.rank() != 4 || w.rank() != 3 || w.shape()[0] != uhat.shape()[0] ||
        w.shape()[1] != uhat.shape()[1] || w.shape()[2] != uhat.shape()[2]) {
        throw DimensionError("weighted_sum_lower: predictions " + shape_str(uhat.shape()) +
                             " vs weights " + shape_str(w.shape()));
    }
    const std::size_t b = uhat.shape()[0], nl = uhat.shape()[1];
    const std::size_t nu = uhat.shape()[2], d = uhat.shape()[3];
    const auto& uv = uhat.values();
    const auto& wv = w.values();
    std::vector<T> out(b * nu * d, T(0));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < nl; ++i)
            for (std::size_t j = 0; j < nu; ++j) {
                const T c = wv[(bi * nl + i) * nu + j];
                const T* urow = uv.data() + ((bi * nl + i) * nu + j) * d;
                T* orow = out.data() + (bi * nu + j) * d;
                for (std::size_t k = 0; k < d; ++k) orow[k] += c * urow[k];
            }
    detail::check_finite(out, "weighted_sum_lower");
    return Tensor<T>::make_op(
        {b, nu, d}, std::move(out), {uhat, w},
        [b, nl, nu, d](detail::Node<T>& self) {
            detail::Node<T>& pu = *self.parents[0];
            detail::Node<T>& pw = *self.parents[1];
            const bool need_u = pu.requires_grad;
            const bool need_w = pw.requires_grad;
            if (need_u) pu.ensure_grad();
            if (need_w) pw.ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t i = 0; i < nl; ++i)
                    for (std::size_t j = 0; j < nu; ++j) {
                        const std::size_t widx = (bi * nl + i) * nu + j;
                        const std::size_t uoff = widx * d;
                        const T* g = self.grad.data() + (bi * nu + j) * d;
                        if (need_u) {
                            const T c = pw.values[widx];
                            for (std::size_t k = 0; k < d; ++k) pu.grad[uoff + k] += c * g[k];
                        }
                        if (need_w) {
                            T acc = T(0);
                            for (std::size_t k = 0; k < d; ++k)
                                acc += g[k] * pu.values[uoff + k];
                            pw.grad[widx] += acc;
                        }
                    }
        });
}

/// Agreement scores between predictions and upper capsule outputs:
/// uhat [b, nl, nu, d], v [b, nu, d] -> [b, nl, nu] of dot products.
template <typename T>
Tensor<T> agreement(const Tensor<T>& uhat, const Tensor<T>& v) {
    if (uhat.rank() != 4 || v.rank() != 3 || v.shape()[0] != uhat.shape()[0] ||
        v.shape()[1] != uhat.shape()[2] || v.shape()[2] != uhat.shape()[3]) {
        throw DimensionError("agreement: predictions " + shape_str(uhat.shape()) +
                             " vs outputs " + shape_str(v.shape()));
    }
    const std::size_t b = uhat.shape()[0], nl = uhat.shape()[1];
    const std::size_t nu = uhat.shape()[2], d = uhat.shape()[3];
    const auto& uv = uhat.values();
    const auto& vv = v.values();
    std::vector<T> out(b * nl * nu, T(0));
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < nl; ++i)
            for (std::size_t j = 0; j < nu; ++j) {
                const T* urow = uv.data() + ((bi * nl + i) * nu + j) * d;
                const T* vrow = vv.data() + (bi * nu + j) * d;
                T acc = T(0);
                for (std::size_t k = 0; k < d; ++k) acc += urow[k] * vrow[k];
                out[(bi * nl + i) * nu + j] = acc;
            }
    detail::check_finite(out, "agreement");
    return Tensor<T>::make_op(
        {b, nl, nu}, std::move(out), {uhat, v},
        [b, nl, nu, d](detail::Node<T>& self) {
            detail::Node<T>& pu = *self.parents[0];
            detail::Node<T>& pv = *self.parents[1];
            const bool need_u = pu.requires_grad;
            const bool need_v = pv.requires_grad;
            if (need_u) pu.ensure_grad();
            if (need_v) pv.ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t i = 0; i < nl; ++i)
                    for (std::size_t j = 0; j < nu; ++j) {
                        const T g = self.grad[(bi * nl + i) * nu + j];
                        if (g == T(0)) continue;
                        const std::size_t uoff = ((bi * nl + i) * nu + j) * d;
                        const std::size_t voff = (bi * nu + j) * d;
                        for (std::size_t k = 0; k < d; ++k) {
                            if (need_u) pu.grad[uoff + k] += g * pv.values[voff + k];
                            if (need_v) pv.grad[voff + k] += g * pu.values[uoff + k];
                        }
                    }
        });
}

/// Routing by agreement. Coupling coefficients are a softmax over the upper
/// axis (each lower capsule's couplings sum to 1), and the upper input is the
/// coupling-weighted mean of predictions, so a single iteration with zero
/// initial logits reduces to squash(mean over lower capsules).
/// The whole procedure is differentiable.
template <typename T>
Tensor<T> route_capsules(const Tensor<T>& uhat, std::size_t iterations) {
    if (iterations == 0) throw ConfigError("route_capsules: needs at least one iteration");
    if (uhat.rank() != 4) {
        throw DimensionError("route_capsules: predictions must be rank 4, got " +
                             shape_str(uhat.shape()));
    }
    const std::size_t b = uhat.shape()[0], nl = uhat.shape()[1], nu = uhat.shape()[2];
    // Zero initial logits make the first coupling matrix uniform, so the first
    // upper input is the plain mean over lower capsules; computing it that way
    // keeps single-iteration routing exactly squash-of-mean.
    Tensor<T> v = squash(reduce_mean(uhat, 1));
    Tensor<T> logits = Tensor<T>::zeros({b, nl, nu}, false);
    for (std::size_t it = 1; it < iterations; ++it) {
        logits = add(logits, agreement(uhat, v));
        auto couplings = softmax(logits, 2);
        auto mean_weights = sum_normalize(couplings, 1);
        v = squash(weighted_sum_lower(uhat, mean_weights));
    }
    return v;
}

/// Coupling coefficients after routing, for inspection and tests.
template <typename T>
std::vector<T> routing_couplings(const Tensor<T>& uhat, std::size_t iterations) {
    if (iterations == 0) throw ConfigError("routing_couplings: needs at least one iteration");
    const std::size_t b = uhat.shape()[0], nl = uhat.shape()[1], nu = uhat.shape()[2];
    Tensor<T> logits = Tensor<T>::zeros({b, nl, nu}, false);
    Tensor<T> couplings = softmax(logits, 2);
    if (iterations > 1) {
        // Mirrors route_capsules: the first upper output is squash of the
        // plain mean (uniform couplings), later iterations update the logits
        // from the previous output.
        Tensor<T> v = squash(reduce_mean(uhat, 1));
        for (std::size_t it = 1; it < iterations; ++it) {
            logits = add(logits, agreement(uhat, v));
            couplings = softmax(logits, 2);
            if (it + 1 < iterations) {
                auto mean_weights = sum_normalize(couplings, 1);
                v = squash(weighted_sum_lower(uhat, mean_weights));
            }
        }
    }
    return couplings.values();
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

struct CapsNetConfig {
    std::size_t input_hw = 28;        // square grayscale input
    std::size_t conv_filters = 32;    // feature extraction conv
    std::size_t conv_kernel = 9;
    std::size_t primary_kernel = 9;
    std::size_t primary_stride = 2;
    std::size_t primary_channels = 32;  // capsule channel blocks
    std::size_t primary_dim = 4;
    std::size_t num_classes = 7;
    std::size_t class_dim = 8;
    std::size_t routing_iterations = 3;
    std::size_t decoder_hidden1 = 64;
    std::size_t decoder_hidden2 = 128;
    // The upper input is the coupling-weighted MEAN of lower predictions, so
    // random-direction cancellation shrinks it by sqrt(n_lower); the
    // transform init compensates, otherwise class capsule lengths start
    // near zero and the margin gradient vanishes through the squash.
    double transform_init_scale = 1.0;
    double margin_upper = 0.9;
    double margin_lower = 0.1;
    double margin_lambda = 0.5;
    double recon_weight = 0.0005;
};

template <typename T>
struct CapsNetOutput {
    Tensor<T> class_capsules;  // [b, num_classes, class_dim]
    Tensor<T> lengths;         // [b, num_classes]
    Tensor<T> probabilities;   // [b, num_classes], lengths normalized to sum 1
};

template <typename T>
struct CapsNetLoss {
    Tensor<T> total;
    T margin;
    T reconstruction;
};

/// Margin loss for class capsule lengths against integer labels:
/// present classes are pushed above `upper`, absent ones below `lower`,
/// with the absent side scaled by `lambda`. Mean over the batch.
template <typename T>
Tensor<T> margin_loss(const Tensor<T>& lengths, const std::vector<std::size_t>& labels,
                      T upper = T(0.9), T lower = T(0.1), T lambda = T(0.5)) {
    if (lengths.rank() != 2 || labels.size() != lengths.shape()[0]) {
        throw DimensionError("margin_loss: lengths " + shape_str(lengths.shape()) +
                             " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t b = lengths.shape()[0], k = lengths.shape()[1];
    std::vector<T> onehot(b * k, T(0));
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= k) {
            throw IndexError("margin_loss: label " + std::to_string(labels[i]) +
                             " out of range for " + std::to_string(k) + " classes");
        }
        onehot[i * k + labels[i]] = T(1);
    }
    auto target = Tensor<T>::from_values({b, k}, onehot, false);
    auto inv_target = Tensor<T>::from_values({b, k}, std::move(onehot), false);
    {
        auto& v = inv_target.values_mut();
        for (auto& x : v) x = T(1) - x;
    }
    auto present = mul(target, square(relu(upper - lengths)));
    auto absent = mul(inv_target, square(relu(lengths - lower)));
    auto per_sample = reduce_sum(add(present, mul(absent, lambda)), 1);
    return reduce_mean(per_sample);
}

template <typename T>
class CapsNet {
  public:
    CapsNet(const CapsNetConfig& config, Rng& rng)
        : cfg_(config),
          conv1_(1, config.conv_filters, config.conv_kernel, 1, rng),
          primary_conv_(config.conv_filters, config.primary_channels * config.primary_dim,
                        config.primary_kernel, config.primary_stride, rng),
          transform_(make_transform(config, rng)),
          decoder1_(config.num_classes * config.class_dim, config.decoder_hidden1, rng),
          decoder2_(config.decoder_hidden1, config.decoder_hidden2, rng),
          decoder3_(config.decoder_hidden2, config.input_hw * config.input_hw, rng) {}

    const CapsNetConfig& config() const { return cfg_; }

    /// images: [b, 1, hw, hw] in [0, 1].
    CapsNetOutput<T> forward(const Tensor<T>& images) const {
        if (images.rank() != 4 || images.shape()[1] != 1 ||
            images.shape()[2] != cfg_.input_hw || images.shape()[3] != cfg_.input_hw) {
            throw DimensionError("CapsNet: expected [b,1," + std::to_string(cfg_.input_hw) +
                                 "," + std::to_string(cfg_.input_hw) + "] images, got " +
                                 shape_str(images.shape()));
        }
        auto features = relu(conv1_(images));
        auto caps_map = primary_conv_(features);
        auto primary = squash(primary_capsules(caps_map, cfg_.primary_dim));
        auto predictions = capsule_predict(primary, transform_);
        auto v = route_capsules(predictions, cfg_.routing_iterations);
        auto lengths = l2_norm(v, 2);
        auto probabilities = sum_normalize(lengths, 1);
        return {v, lengths, probabilities};
    }

    /// Decoder reconstruction from class capsules with every capsule but
    /// the selected one zeroed out. Returns [b, hw*hw] in (0, 1).
    Tensor<T> reconstruct(const Tensor<T>& class_capsules,
                          const std::vector<std::size_t>& selected) const {
        const std::size_t b = class_capsules.shape()[0];
        const std::size_t k = cfg_.num_classes, d = cfg_.class_dim;
        std::vector<T> mask(b * k * d, T(0));
        for (std::size_t i = 0; i < b; ++i) {
            if (selected[i] >= k) {
                throw IndexError("reconstruct: class " + std::to_string(selected[i]) +
                                 " out of range");
            }
            for (std::size_t j = 0; j < d; ++j) mask[(i * k + selected[i]) * d + j] = T(1);
        }
        auto masked = mul(flatten(class_capsules),
                          Tensor<T>::from_values({b, k * d}, std::move(mask), false));
        return sigmoid(decoder3_(relu(decoder2_(relu(decoder1_(masked))))));
    }

    /// Margin loss plus weighted reconstruction error (summed squared error
    /// per image, mean over the batch).
    CapsNetLoss<T> loss(const Tensor<T>& images, const std::vector<std::size_t>& labels) const {
        auto out = forward(images);
        auto margin = margin_loss(out.lengths, labels, T(cfg_.margin_upper),
                                  T(cfg_.margin_lower), T(cfg_.margin_lambda));
        auto recon = reconstruct(out.class_capsules, labels);
        auto pixels = flatten(images);
        auto recon_err = reduce_mean(reduce_sum(square(sub(recon, pixels)), 1));
        auto total = add(margin, mul(recon_err, T(cfg_.recon_weight)));
        return {total, margin.item(), recon_err.item()};
    }

    /// Predicted class per image: argmax of capsule lengths.
    std::vector<std::size_t> predict(const Tensor<T>& images) const {
        auto out = forward(images);
        const auto& lv = out.lengths.values();
        const std::size_t b = out.lengths.shape()[0], k = out.lengths.shape()[1];
        std::vector<std::size_t> pred(b);
        for (std::size_t i = 0; i < b; ++i) {
            pred[i] = static_cast<std::size_t>(
                std::max_element(lv.begin() + i * k, lv.begin() + (i + 1) * k) -
                (lv.begin() + i * k));
        }
        return pred;
    }

    NamedParams<T> parameters() const {
        NamedParams<T> out;
        conv1_.collect("conv1", out);
        primary_conv_.collect("primary", out);
        out.emplace_back("transform", transform_);
        decoder1_.collect("decoder1", out);
        decoder2_.collect("decoder2", out);
        decoder3_.collect("decoder3", out);
        return out;
    }

    /// Freezing stops gradient collection; frozen forward passes build no
    /// graph at all.
    void set_trainable(bool trainable) {
        for (auto& [name, t] : parameters()) t.set_requires_grad(trainable);
    }

  private:
    static Tensor<T> make_transform(const CapsNetConfig& cfg, Rng& rng) {
        const std::size_t after_conv = cfg.input_hw - cfg.conv_kernel + 1;
        if (cfg.conv_kernel > cfg.input_hw || cfg.primary_kernel > after_conv) {
            throw ConfigError("CapsNet: kernels do not fit the input size");
        }
        const std::size_t grid = (after_conv - cfg.primary_kernel) / cfg.primary_stride + 1;
        const std::size_t n_lower = cfg.primary_channels * grid * grid;
        const double stddev = cfg.transform_init_scale *
                              std::sqrt(double(n_lower) / double(cfg.primary_dim));
        Shape shape{n_lower, cfg.num_classes, cfg.class_dim, cfg.primary_dim};
        std::vector<T> v(shape_size(shape));
        for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
        return Tensor<T>::from_values(std::move(shape), std::move(v), true);
    }

    CapsNetConfig cfg_;
    Conv2dLayer<T> conv1_;
    Conv2dLayer<T> primary_conv_;
    Tensor<T> transform_;
    Dense<T> decoder1_;
    Dense<T> decoder2_;
    Dense<T> decoder3_;
};

}  // namespace cohesion
