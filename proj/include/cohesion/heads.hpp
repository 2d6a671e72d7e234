#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "cohesion/layers.hpp"
#include "cohesion/ops.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

enum class Activation { Relu, Swish };

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
    return act == Activation::Relu ? relu(x) : swish(x);
}

// ---------------------------------------------------------------------------
// Face statistic pooling
// ---------------------------------------------------------------------------

/// Pools per-face emotion distributions into a 3 x k statistics matrix with
/// rows (average, maximum, minimum). Bitwise permutation-invariant in face
/// order: each average sums its column in sorted order, so reordering the
/// faces cannot change even the rounding.
template <typename T>
Tensor<T> pool_face_emotions(const std::vector<std::vector<T>>& faces) {
    if (faces.empty()) {
        throw NoFacesError("pool_face_emotions: no faces to pool; caller decides the fallback");
    }
    const std::size_t k = faces[0].size();
    std::vector<T> avg(k, T(0)), mx(faces[0]), mn(faces[0]);
    std::vector<T> column(faces.size());
    for (const auto& f : faces) {
        if (f.size() != k) {
            throw DimensionError("pool_face_emotions: face with " + std::to_string(f.size()) +
                                 " probabilities among faces with " + std::to_string(k));
        }
        for (std::size_t i = 0; i < k; ++i) {
            mx[i] = std::max(mx[i], f[i]);
            mn[i] = std::min(mn[i], f[i]);
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < faces.size(); ++j) column[j] = faces[j][i];
        std::sort(column.begin(), column.end());
        for (const T v : column) avg[i] += v;
    }
    std::vector<T> out;
    out.reserve(3 * k);
    for (const T v : avg) out.push_back(v / T(faces.size()));
    out.insert(out.end(), mx.begin(), mx.end());
    out.insert(out.end(), mn.begin(), mn.end());
    return Tensor<T>::from_values({3, k}, std::move(out), false);
}

/// Stacks per-image pooled features [3, k] into a batch [b, 3, k].
template <typename T>
Tensor<T> stack_pooled(const std::vector<Tensor<T>>& pooled) {
    if (pooled.empty()) throw ContractError("stack_pooled: empty batch");
    std::vector<Tensor<T>> rows;
    rows.reserve(pooled.size());
    for (const auto& p : pooled) {
        rows.push_back(reshape(p, {std::size_t(1), p.shape()[0], p.shape()[1]}));
    }
    return concat(rows, 0);
}

// ---------------------------------------------------------------------------
// Face-level cohesion head:
// dense 16, BN + activation, dense 32, BN + activation,
// max-pool over the 3 statistics, flatten, scaled sigmoid.
// ---------------------------------------------------------------------------

struct FaceHeadConfig {
    std::size_t emotions = 7;
    std::size_t hidden1 = 16;
    std::size_t hidden2 = 32;
    Activation activation = Activation::Relu;
};

template <typename T>
class FaceHead {
  public:
    FaceHead(const FaceHeadConfig& config, Rng& rng)
        : cfg_(config),
          dense1_(config.emotions, config.hidden1, rng, /*with_bias=*/false),
          bn1_(config.hidden1),
          dense2_(config.hidden1, config.hidden2, rng, /*with_bias=*/false),
          bn2_(config.hidden2),
          out_(config.hidden2, 1, rng) {}

    const FaceHeadConfig& config() const { return cfg_; }

    /// features: [b, 3, emotions] -> cohesion scores [b, 1] in [0, 3].
    Tensor<T> forward(const Tensor<T>& features, BatchNormMode mode) {
        if (features.rank() != 3 || features.shape()[1] != 3 ||
            features.shape()[2] != cfg_.emotions) {
            throw DimensionError("FaceHead: expected [b,3," + std::to_string(cfg_.emotions) +
                                 "] features, got " + shape_str(features.shape()));
        }
        const std::size_t b = features.shape()[0];
        auto h1 = dense_on_last(features, dense1_, b);
        h1 = activate(bn1_(h1, mode), cfg_.activation);
        auto h2 = dense_on_last(h1, dense2_, b);
        h2 = activate(bn2_(h2, mode), cfg_.activation);
        auto pooled = reduce_max(h2, 1);  // [b, hidden2]
        return mul(sigmoid(out_(pooled)), T(3));
    }

    NamedParams<T> parameters() const {
        NamedParams<T> out;
        dense1_.collect("dense1", out);
        bn1_.collect("bn1", out);
        dense2_.collect("dense2", out);
        bn2_.collect("bn2", out);
        out_.collect("out", out);
        return out;
    }

    RunningStats<T>& bn1_running() { return bn1_.running; }
    RunningStats<T>& bn2_running() { return bn2_.running; }

  private:
    // Applies a dense layer along the last axis of [b, 3, k].
    Tensor<T> dense_on_last(const Tensor<T>& x, const Dense<T>& layer, std::size_t b) {
        auto flat = reshape(x, {b * 3, x.shape()[2]});
        auto y = layer(flat);
        return reshape(y, {b, std::size_t(3), y.shape()[1]});
    }

    FaceHeadConfig cfg_;
    Dense<T> dense1_;
    BatchNormLayer<T> bn1_;
    Dense<T> dense2_;
    BatchNormLayer<T> bn2_;
    Dense<T> out_;
};

// ---------------------------------------------------------------------------
// Image backbone interface and the built-in small convolutional backbone
// ---------------------------------------------------------------------------

template <typename T>
class Backbone {
  public:
    virtual ~Backbone() = default;
    /// images [b, c, h, w] -> features [b, width()].
    virtual Tensor<T> forward(const Tensor<T>& images) = 0;
    virtual std::size_t width() const = 0;
    virtual NamedParams<T> parameters() const = 0;
};

struct SmallConvBackboneConfig {
    std::size_t in_channels = 3;
    std::size_t width = 128;
    Activation activation = Activation::Relu;
};

/// Three strided conv blocks followed by global average pooling.
template <typename T>
class SmallConvBackbone : public Backbone<T> {
  public:
    SmallConvBackbone(const SmallConvBackboneConfig& config, Rng& rng)
        : cfg_(config),
          conv1_(config.in_channels, 16, 3, 2, rng),
          conv2_(16, 32, 3, 2, rng),
          conv3_(32, config.width, 3, 2, rng) {}

    Tensor<T> forward(const Tensor<T>& images) override {
        auto h = activate(conv1_(images), cfg_.activation);
        h = activate(conv2_(h), cfg_.activation);
        h = activate(conv3_(h), cfg_.activation);
        return reduce_mean(reduce_mean(h, 3), 2);  // [b, width]
    }

    std::size_t width() const override { return cfg_.width; }

    NamedParams<T> parameters() const override {
        NamedParams<T> out;
        conv1_.collect("conv1", out);
        conv2_.collect("conv2", out);
        conv3_.collect("conv3", out);
        return out;
    }

  private:
    SmallConvBackboneConfig cfg_;
    Conv2dLayer<T> conv1_;
    Conv2dLayer<T> conv2_;
    Conv2dLayer<T> conv3_;
};

// ---------------------------------------------------------------------------
// Image-level heads: three dense blocks with activations on top of a
// backbone feature, ending in a scaled sigmoid (single task) or a softmax
// emotion triple plus scaled sigmoid (multi task).
// ---------------------------------------------------------------------------

struct ImageHeadConfig {
    std::size_t input_width = 128;  // backbone feature width (2048 at reference scale)
    std::size_t hidden = 256;       // dense width (4096 at reference scale)
    std::size_t emotions = 3;       // multi-task: positive / neutral / negative
    Activation activation = Activation::Relu;
};

template <typename T>
class ImageHead {
  public:
    ImageHead(const ImageHeadConfig& config, Rng& rng)
        : cfg_(config),
          dense1_(config.input_width, config.hidden, rng),
          dense2_(config.hidden, config.hidden, rng),
          dense3_(config.hidden, config.hidden, rng),
          out_(config.hidden, 1, rng) {}

    const ImageHeadConfig& config() const { return cfg_; }

    /// features: [b, input_width] -> scores [b, 1] in [0, 3].
    Tensor<T> forward(const Tensor<T>& features) {
        return mul(sigmoid(out_(trunk(features))), T(3));
    }

    NamedParams<T> parameters() const {
        NamedParams<T> out;
        collect_trunk(out);
        out_.collect("out", out);
        return out;
    }

  protected:
    Tensor<T> trunk(const Tensor<T>& features) const {
        if (features.rank() != 2 || features.shape()[1] != cfg_.input_width) {
            throw DimensionError("ImageHead: expected [b," + std::to_string(cfg_.input_width) +
                                 "] features, got " + shape_str(features.shape()));
        }
        auto h = activate(dense1_(features), cfg_.activation);
        h = activate(dense2_(h), cfg_.activation);
        return activate(dense3_(h), cfg_.activation);
    }

    void collect_trunk(NamedParams<T>& out) const {
        dense1_.collect("dense1", out);
        dense2_.collect("dense2", out);
        dense3_.collect("dense3", out);
    }

    ImageHeadConfig cfg_;
    Dense<T> dense1_;
    Dense<T> dense2_;
    Dense<T> dense3_;
    Dense<T> out_;
};

template <typename T>
struct MultitaskOutput {
    Tensor<T> emotion_probs;  // [b, emotions], softmax
    Tensor<T> gcs;            // [b, 1] in [0, 3]
};

/// Shared trunk with two final layers. Parameter draw order is trunk, then
/// the emotion final layer, then the cohesion final layer, so a multi-task
/// head and a single-purpose head built from the same seed share identical
/// common parameters.
template <typename T>
class MultitaskHead {
  public:
    MultitaskHead(const ImageHeadConfig& config, Rng& rng)
        : cfg_(config),
          dense1_(config.input_width, config.hidden, rng),
          dense2_(config.hidden, config.hidden, rng),
          dense3_(config.hidden, config.hidden, rng),
          emotion_out_(config.hidden, config.emotions, rng),
          gcs_out_(config.hidden, 1, rng) {}

    const ImageHeadConfig& config() const { return cfg_; }

    MultitaskOutput<T> forward(const Tensor<T>& features) {
        auto h = trunk(features);
        return {softmax(emotion_out_(h), 1), mul(sigmoid(gcs_out_(h)), T(3))};
    }

    /// Emotion branch alone; the cohesion final layer is not touched, so the
    /// built graph is identical to a head that never had one.
    Tensor<T> forward_emotion(const Tensor<T>& features) {
        return softmax(emotion_out_(trunk(features)), 1);
    }

    NamedParams<T> parameters() const {
        NamedParams<T> out;
        dense1_.collect("dense1", out);
        dense2_.collect("dense2", out);
        dense3_.collect("dense3", out);
        emotion_out_.collect("emotion_out", out);
        gcs_out_.collect("gcs_out", out);
        return out;
    }

  private:
    Tensor<T> trunk(const Tensor<T>& features) const {
        if (features.rank() != 2 || features.shape()[1] != cfg_.input_width) {
            throw DimensionError("MultitaskHead: expected [b," +
                                 std::to_string(cfg_.input_width) + "] features, got " +
                                 shape_str(features.shape()));
        }
        auto h = activate(dense1_(features), cfg_.activation);
        h = activate(dense2_(h), cfg_.activation);
        return activate(dense3_(h), cfg_.activation);
    }

    ImageHeadConfig cfg_;
    Dense<T> dense1_;
    Dense<T> dense2_;
    Dense<T> dense3_;
    Dense<T> emotion_out_;
    Dense<T> gcs_out_;
};

// ---------------------------------------------------------------------------
// Joint loss
// ---------------------------------------------------------------------------

/// Mean negative log likelihood of the true classes under given probability
/// rows. Probabilities must be positive at the true class.
template <typename T>
Tensor<T> nll_from_probs(const Tensor<T>& probs, const std::vector<std::size_t>& labels) {
    if (probs.rank() != 2 || labels.size() != probs.shape()[0]) {
        throw DimensionError("nll_from_probs: probabilities " + shape_str(probs.shape()) +
                             " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t b = probs.shape()[0], k = probs.shape()[1];
    const auto& pv = probs.values();
    T total = T(0);
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] >= k) {
            throw IndexError("nll_from_probs: class " + std::to_string(labels[i]) +
                             " out of range for " + std::to_string(k) + " classes");
        }
        total -= std::log(pv[i * k + labels[i]]);
    }
    total /= T(b);
    if (!std::isfinite(total)) throw NumericError("nll_from_probs produced a non-finite value");
    return Tensor<T>::make_op({1}, {total}, {probs},
                              [labels, b, k](detail::Node<T>& self) {
                                  detail::Node<T>& pp = *self.parents[0];
                                  if (!pp.requires_grad) return;
                                  pp.ensure_grad();
                                  const T g = self.grad[0] / T(b);
                                  for (std::size_t i = 0; i < b; ++i) {
                                      const std::size_t idx = i * k + labels[i];
                                      pp.grad[idx] -= g / pp.values[idx];
                                  }
                              });
}

/// Cross entropy on the emotion triple plus alpha times the squared cohesion
/// error (mean over the batch for both). With alpha = 0 the cohesion branch
/// is not part of the graph at all.
template <typename T>
Tensor<T> joint_loss(const Tensor<T>& pred_emotion, const std::vector<std::size_t>& true_emotion,
                     const Tensor<T>& pred_gcs, const std::vector<T>& true_gcs, T alpha = T(1)) {
    if (alpha < T(0)) throw ConfigError("joint_loss: alpha must be nonnegative");
    auto ce = nll_from_probs(pred_emotion, true_emotion);
    if (alpha == T(0)) return ce;
    if (pred_gcs.size() != true_gcs.size()) {
        throw DimensionError("joint_loss: " + std::to_string(pred_gcs.size()) +
                             " cohesion predictions vs " + std::to_string(true_gcs.size()) +
                             " targets");
    }
    auto target = Tensor<T>::from_values(pred_gcs.shape(), true_gcs, false);
    auto se = reduce_mean(square(sub(pred_gcs, target)));
    return add(ce, mul(se, alpha));
}

// ---------------------------------------------------------------------------
// Mask crop and saliency
// ---------------------------------------------------------------------------

template <typename T>
struct MaskCropResult {
    Tensor<T> cropped;
    bool included = false;
};

/// Zeroes out pixels outside the person mask. The sample qualifies for
/// analysis only when the mask covers strictly less than half the image.
template <typename T>
MaskCropResult<T> apply_mask_crop(const Tensor<T>& image, const Tensor<T>& mask) {
    if (image.rank() != 3 || mask.rank() != 2 || mask.shape()[0] != image.shape()[1] ||
        mask.shape()[1] != image.shape()[2]) {
        throw DimensionError("apply_mask_crop: image " + shape_str(image.shape()) +
                             " vs mask " + shape_str(mask.shape()));
    }
    const std::size_t c = image.shape()[0];
    const std::size_t pixels = mask.size();
    const auto& mv = mask.values();
    std::size_t area = 0;
    for (const T v : mv) area += (v > T(0.5)) ? 1 : 0;
    const bool included = (double(area) / double(pixels)) < 0.5;

    std::vector<T> out(image.values());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < pixels; ++i)
            if (!(mv[i] > T(0.5))) out[ch * pixels + i] = T(0);
    return {Tensor<T>::from_values(image.shape(), std::move(out), false), included};
}

/// Magnitude of the score gradient w.r.t. the input image, max-reduced over
/// channels and min-max normalized to [0, 1]. A constant score (zero
/// gradient everywhere) maps to the all-zero heat map.
///
/// `score_fn` must map an image [c, h, w] (with gradient tracking) to a
/// scalar tensor.
template <typename T, typename ScoreFn>
Tensor<T> saliency_map(ScoreFn&& score_fn, const Tensor<T>& image) {
    if (image.rank() != 3) {
        throw DimensionError("saliency_map: image must be [c,h,w], got " +
                             shape_str(image.shape()));
    }
    const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
    auto probe = Tensor<T>::from_values(image.shape(), image.values(), true);
    Tensor<T> score = score_fn(probe);
    if (score.size() != 1) {
        throw ContractError("saliency_map: score function must return a scalar");
    }
    backward(score);
    std::vector<T> flat(h * w, T(0));
    if (probe.has_grad()) {
        const auto& g = probe.grad();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h * w; ++i)
                flat[i] = std::max(flat[i], std::abs(g[ch * h * w + i]));
    }
    const T mx = *std::max_element(flat.begin(), flat.end());
    const T mn = *std::min_element(flat.begin(), flat.end());
    if (mx > mn) {
        for (auto& v : flat) v = (v - mn) / (mx - mn);
    } else {
        std::fill(flat.begin(), flat.end(), T(0));
    }
    return Tensor<T>::from_values({h, w}, std::move(flat), false);
}

}  // namespace cohesion
