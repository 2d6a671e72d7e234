#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cohesion/capsnet.hpp"
#include "cohesion/dataset.hpp"
#include "cohesion/heads.hpp"
#include "cohesion/training.hpp"

namespace cohesion {

/// Per-face crops of a manifest subset, grouped by their source sample.
struct FaceCrops {
    std::vector<Tensor<double>> crops;               // each [1, t, t]
    std::vector<std::size_t> emotions;               // per crop
    std::vector<std::vector<std::size_t>> groups;    // per group: crop indices
    std::vector<double> group_gcs;                   // per group
    std::vector<std::size_t> group_valence;          // per group: 0/1/2

    std::size_t face_count() const { return crops.size(); }
    std::size_t group_count() const { return groups.size(); }
};

/// Loads and preprocesses every face of the given manifest records. Records
/// without faces are rejected: the face-level pipeline has nothing to pool.
inline FaceCrops load_face_crops(const DatasetManifest& manifest, const std::string& dir,
                                 const std::vector<std::size_t>& record_indices,
                                 std::size_t target) {
    FaceCrops out;
    for (const std::size_t idx : record_indices) {
        const auto& record = manifest.records[idx];
        if (record.face_boxes.empty())
            throw NoFacesError("sample '" + record.image_path +
                               "' has no faces for the face-level pipeline");
        if (record.face_emotions.size() != record.face_boxes.size())
            throw ConfigError("sample '" + record.image_path +
                              "' lacks per-face emotion labels");
        const auto image = load_sample_image(dir, record);
        std::vector<std::size_t> members;
        for (std::size_t f = 0; f < record.face_boxes.size(); ++f) {
            members.push_back(out.crops.size());
            out.crops.push_back(preprocess_face(image, record.face_boxes[f], target));
            out.emotions.push_back(static_cast<std::size_t>(record.face_emotions[f]));
        }
        out.groups.push_back(std::move(members));
        out.group_gcs.push_back(record.gcs_label);
        out.group_valence.push_back(static_cast<std::size_t>(record.emotion_label));
    }
    return out;
}

/// Stacks crops into a [b, 1, t, t] batch.
inline Tensor<double> stack_crops(const FaceCrops& data,
                                  const std::vector<std::size_t>& crop_indices) {
    if (crop_indices.empty()) throw ConfigError("stack_crops: empty batch");
    const auto& first = data.crops[crop_indices[0]].shape();
    std::vector<double> values;
    values.reserve(crop_indices.size() * shape_size(first));
    for (const std::size_t i : crop_indices) {
        const auto& crop = data.crops[i];
        values.insert(values.end(), crop.values().begin(), crop.values().end());
    }
    return Tensor<double>::from_values({crop_indices.size(), first[0], first[1], first[2]},
                                       std::move(values), false);
}

/// Supervised pretraining of the capsule network on individual face crops.
inline TrainRunReport pretrain_capsnet(CapsNet<double>& net, const FaceCrops& train,
                                       const FaceCrops& val, const FitConfig& config) {
    auto params = param_tensors(net.parameters());
    auto batch_labels = [&](const FaceCrops& d, const std::vector<std::size_t>& idx) {
        std::vector<std::size_t> labels;
        labels.reserve(idx.size());
        for (const std::size_t i : idx) labels.push_back(d.emotions[i]);
        return labels;
    };
    std::vector<std::size_t> val_indices(val.face_count());
    std::iota(val_indices.begin(), val_indices.end(), std::size_t{0});

    auto result = fit(
        params, train.face_count(),
        [&](const std::vector<std::size_t>& batch) {
            return net.loss(stack_crops(train, batch), batch_labels(train, batch)).total;
        },
        [&] {
            // Validation in chunks to bound the graph size.
            double total = 0.0;
            constexpr std::size_t kChunk = 64;
            for (std::size_t start = 0; start < val_indices.size(); start += kChunk) {
                const std::size_t end = std::min(start + kChunk, val_indices.size());
                std::vector<std::size_t> chunk(val_indices.begin() + static_cast<std::ptrdiff_t>(start),
                                               val_indices.begin() + static_cast<std::ptrdiff_t>(end));
                total += net.loss(stack_crops(val, chunk), batch_labels(val, chunk)).total.item() *
                         static_cast<double>(chunk.size());
            }
            return total / static_cast<double>(val_indices.size());
        },
        config);
    load_values(params, result.best_values);
    return result.report;
}

/// Fraction of crops whose predicted emotion matches the label.
inline double capsnet_accuracy(const CapsNet<double>& net, const FaceCrops& data) {
    if (data.face_count() == 0) throw ConfigError("capsnet_accuracy: empty evaluation set");
    std::size_t hits = 0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < data.face_count(); start += kChunk) {
        const std::size_t end = std::min(start + kChunk, data.face_count());
        std::vector<std::size_t> chunk(end - start);
        std::iota(chunk.begin(), chunk.end(), start);
        const auto predicted = net.predict(stack_crops(data, chunk));
        for (std::size_t i = 0; i < chunk.size(); ++i)
            hits += predicted[i] == data.emotions[chunk[i]] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(data.face_count());
}

/// Frozen-network face probabilities pooled per group: one [3, emotions]
/// feature tensor per group.
inline std::vector<Tensor<double>> pooled_group_features(const CapsNet<double>& net,
                                                         const FaceCrops& data) {
    std::vector<Tensor<double>> features;
    features.reserve(data.group_count());
    for (const auto& members : data.groups) {
        const auto out = net.forward(stack_crops(data, members));
        const auto& probs = out.probabilities;  // [k, emotions]
        const std::size_t emotions = probs.shape()[1];
        std::vector<std::vector<double>> faces;
        for (std::size_t f = 0; f < members.size(); ++f)
            faces.emplace_back(probs.values().begin() + static_cast<std::ptrdiff_t>(f * emotions),
                               probs.values().begin() +
                                   static_cast<std::ptrdiff_t>((f + 1) * emotions));
        features.push_back(pool_face_emotions(faces));
    }
    return features;
}

inline Tensor<double> stack_group_features(const std::vector<Tensor<double>>& features,
                                           const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("stack_group_features: empty batch");
    std::vector<Tensor<double>> rows;
    rows.reserve(indices.size());
    for (const std::size_t i : indices) rows.push_back(features[i]);
    return stack_pooled(rows);
}

inline Tensor<double> gcs_column(const std::vector<double>& gcs,
                                 const std::vector<std::size_t>& indices) {
    std::vector<double> values;
    values.reserve(indices.size());
    for (const std::size_t i : indices) values.push_back(gcs[i]);
    return Tensor<double>::from_values({indices.size(), 1}, std::move(values), false);
}

/// Trains the face-level cohesion head on precomputed pooled features.
inline TrainRunReport train_face_head(FaceHead<double>& head,
                                      const std::vector<Tensor<double>>& train_features,
                                      const std::vector<double>& train_gcs,
                                      const std::vector<Tensor<double>>& val_features,
                                      const std::vector<double>& val_gcs,
                                      const FitConfig& config) {
    auto params = param_tensors(head.parameters());
    std::vector<std::size_t> val_indices(val_features.size());
    std::iota(val_indices.begin(), val_indices.end(), std::size_t{0});
    auto result = fit(
        params, train_features.size(),
        [&](const std::vector<std::size_t>& batch) {
            auto predicted = head.forward(stack_group_features(train_features, batch),
                                          BatchNormMode::Train);
            return reduce_mean(square(sub(predicted, gcs_column(train_gcs, batch))));
        },
        [&] {
            auto predicted = head.forward(stack_group_features(val_features, val_indices),
                                          BatchNormMode::Eval);
            return reduce_mean(square(sub(predicted, gcs_column(val_gcs, val_indices)))).item();
        },
        config);
    load_values(params, result.best_values);
    return result.report;
}

inline double face_head_mse(FaceHead<double>& head, const std::vector<Tensor<double>>& features,
                            const std::vector<double>& gcs) {
    std::vector<std::size_t> all(features.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto predicted = head.forward(stack_group_features(features, all), BatchNormMode::Eval);
    return evaluate_mse(predicted.values(), gcs);
}

/// Whole-image samples for the image-level heads.
struct ImageSet {
    std::vector<Tensor<double>> images;  // each [3, s, s]
    std::vector<double> gcs;
    std::vector<std::size_t> valence;  // 0/1/2
    std::size_t size() const { return images.size(); }
};

/// Loads manifest records as resized RGB tensors. With `mask_ablation`,
/// applies the person-mask background rule first and drops samples whose
/// coverage fails the strict below-half test (and samples without a mask).
inline ImageSet load_image_set(const DatasetManifest& manifest, const std::string& dir,
                               const std::vector<std::size_t>& record_indices, std::size_t size,
                               bool mask_ablation = false) {
    ImageSet out;
    for (const std::size_t idx : record_indices) {
        const auto& record = manifest.records[idx];
        auto image = raster_to_tensor(load_sample_image(dir, record));
        if (mask_ablation) {
            if (!record.has_mask()) continue;
            auto result = apply_mask_crop(image, mask_to_tensor(load_sample_mask(dir, record)));
            if (!result.included) continue;
            image = result.cropped;
        }
        const auto& shape = image.shape();  // [3, h, w]
        std::vector<double> planes;
        planes.reserve(3 * size * size);
        for (std::size_t c = 0; c < shape[0]; ++c) {
            std::vector<double> plane(
                image.values().begin() + static_cast<std::ptrdiff_t>(c * shape[1] * shape[2]),
                image.values().begin() + static_cast<std::ptrdiff_t>((c + 1) * shape[1] * shape[2]));
            auto resized = bilinear_resize(plane, shape[1], shape[2], size, size);
            planes.insert(planes.end(), resized.begin(), resized.end());
        }
        out.images.push_back(
            Tensor<double>::from_values({3, size, size}, std::move(planes), false));
        out.gcs.push_back(record.gcs_label);
        out.valence.push_back(static_cast<std::size_t>(record.emotion_label));
    }
    return out;
}

inline Tensor<double> stack_images(const ImageSet& data, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("stack_images: empty batch");
    const auto& shape = data.images[indices[0]].shape();
    std::vector<double> values;
    values.reserve(indices.size() * shape_size(shape));
    for (const std::size_t i : indices) {
        const auto& image = data.images[i];
        values.insert(values.end(), image.values().begin(), image.values().end());
    }
    return Tensor<double>::from_values({indices.size(), shape[0], shape[1], shape[2]},
                                       std::move(values), false);
}

struct MultitaskConfig {
    SmallConvBackboneConfig backbone;
    ImageHeadConfig head;  // head.input_width must equal backbone.width
    OptimizerConfig optimizer;
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    double alpha = 1.0;
    bool emotion_only = false;  // single-task emotion baseline (no cohesion branch)

    MultitaskConfig() {
        optimizer.learning_rate = 0.001;
        optimizer.momentum = 0.9;
        head.input_width = backbone.width;
    }
};

struct MultitaskRun {
    SmallConvBackbone<double> backbone;
    MultitaskHead<double> head;
    std::vector<double> cross_entropy;  // per-epoch training means
    std::vector<double> squared_error;  // per-epoch training means (all-zero when emotion_only)
    double val_mse = 0.0;
    double val_accuracy = 0.0;

    MultitaskRun(const MultitaskConfig& config, Rng& rng)
        : backbone(config.backbone, rng), head(config.head, rng) {}
};

/// Joint (or emotion-only) training of backbone plus multi-task head. The
/// loop tracks the cross-entropy and squared-error components separately so
/// their trajectories can be compared across runs; given equal seeds and
/// configs, batch order and updates are bitwise reproducible.
inline MultitaskRun train_multitask(const ImageSet& train, const ImageSet& val,
                                    const MultitaskConfig& config) {
    if (config.head.input_width != config.backbone.width)
        throw ConfigError("multitask: head input width " +
                          std::to_string(config.head.input_width) +
                          " does not match backbone width " +
                          std::to_string(config.backbone.width));
    if (train.size() < 2) throw ConfigError("multitask: need at least 2 training samples");
    Rng init_rng(config.seed);
    MultitaskRun run(config, init_rng);

    auto params = param_tensors(run.backbone.parameters());
    for (auto& [name, tensor] : run.head.parameters()) params.push_back(tensor);
    Optimizer<double> optimizer(config.optimizer, params);
    Rng shuffle_rng(config.seed + 1);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double ce_sum = 0.0, se_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(start + config.batch_size, order.size());
            if (end - start < 2 && order.size() > 1) continue;
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<std::size_t> emotions;
            std::vector<double> gcs;
            for (const std::size_t i : batch) {
                emotions.push_back(train.valence[i]);
                gcs.push_back(train.gcs[i]);
            }
            for (auto& p : params) p.zero_grad();
            auto features = run.backbone.forward(stack_images(train, batch));
            Tensor<double> loss;
            if (config.emotion_only) {
                loss = nll_from_probs(run.head.forward_emotion(features), emotions);
                ce_sum += loss.item();
            } else {
                auto out = run.head.forward(features);
                auto ce = nll_from_probs(out.emotion_probs, emotions);
                auto target = Tensor<double>::from_values({batch.size(), 1}, std::move(gcs), false);
                auto se = reduce_mean(square(sub(out.gcs, target)));
                ce_sum += ce.item();
                se_sum += se.item();
                loss = config.alpha == 0.0 ? ce : add(ce, mul(se, config.alpha));
            }
            try {
                backward(loss);
                optimizer.step(params, epoch);
            } catch (const NumericError& e) {
                throw TrainingDivergedError("training diverged at epoch " + std::to_string(epoch) +
                                                ", batch " + std::to_string(batches + 1) + ": " +
                                                e.what(),
                                            static_cast<int>(epoch),
                                            static_cast<int>(batches + 1));
            }
            ++batches;
        }
        if (batches == 0) throw ConfigError("multitask: no trainable batch of at least 2 samples");
        run.cross_entropy.push_back(ce_sum / static_cast<double>(batches));
        run.squared_error.push_back(se_sum / static_cast<double>(batches));
    }

    if (val.size() > 0) {
        std::vector<double> pred_gcs;
        std::vector<std::size_t> pred_class;
        constexpr std::size_t kChunk = 32;
        for (std::size_t start = 0; start < val.size(); start += kChunk) {
            const std::size_t end = std::min(start + kChunk, val.size());
            std::vector<std::size_t> chunk(end - start);
            std::iota(chunk.begin(), chunk.end(), start);
            auto features = run.backbone.forward(stack_images(val, chunk));
            auto out = run.head.forward(features);
            const std::size_t classes = out.emotion_probs.shape()[1];
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                pred_gcs.push_back(out.gcs.values()[i]);
                std::size_t best = 0;
                for (std::size_t k = 1; k < classes; ++k)
                    if (out.emotion_probs.values()[i * classes + k] >
                        out.emotion_probs.values()[i * classes + best])
                        best = k;
                pred_class.push_back(best);
            }
        }
        run.val_mse = evaluate_mse(pred_gcs, val.gcs);
        run.val_accuracy = *evaluate_classification(pred_class, val.valence, 3).accuracy;
    }
    return run;
}

/// Named parameters of the full image-level model, for checkpoints.
inline NamedParams<double> multitask_named_params(MultitaskRun& run) {
    NamedParams<double> params;
    for (auto& [name, tensor] : run.backbone.parameters())
        params.emplace_back("backbone." + name, tensor);
    for (auto& [name, tensor] : run.head.parameters()) params.emplace_back("head." + name, tensor);
    return params;
}

/// Capsule configuration small enough to pretrain in seconds on one CPU
/// core while keeping every mechanism intact (conv stem, primary capsules,
/// routing by agreement, margin plus reconstruction loss).
inline CapsNetConfig desk_capsnet_config() {
    CapsNetConfig c;
    c.input_hw = 20;
    c.conv_filters = 8;
    c.conv_kernel = 5;
    c.primary_kernel = 5;
    c.primary_stride = 2;
    c.primary_channels = 8;
    c.primary_dim = 4;
    c.class_dim = 8;
    c.decoder_hidden1 = 32;
    c.decoder_hidden2 = 64;
    return c;
}

/// Named parameters of the frozen-capsule face-level model, for checkpoints.
inline NamedParams<double> face_level_named_params(const CapsNet<double>& net,
                                                   const FaceHead<double>& head) {
    NamedParams<double> params;
    for (auto& [name, tensor] : net.parameters()) params.emplace_back("capsnet." + name, tensor);
    for (auto& [name, tensor] : head.parameters()) params.emplace_back("head." + name, tensor);
    return params;
}

/// Single-task image-level model: backbone plus cohesion-only head.
struct ImageLevelModel {
    SmallConvBackbone<double> backbone;
    ImageHead<double> head;

    ImageLevelModel(const SmallConvBackboneConfig& backbone_config,
                    const ImageHeadConfig& head_config, Rng& rng)
        : backbone(backbone_config, rng), head(head_config, rng) {
        if (head_config.input_width != backbone_config.width)
            throw ConfigError("image-level: head input width " +
                              std::to_string(head_config.input_width) +
                              " does not match backbone width " +
                              std::to_string(backbone_config.width));
    }
};

inline double image_level_mse(ImageLevelModel& model, const ImageSet& data) {
    std::vector<double> predicted;
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        const std::size_t end = std::min(start + kChunk, data.size());
        std::vector<std::size_t> chunk(end - start);
        std::iota(chunk.begin(), chunk.end(), start);
        auto out = model.head.forward(model.backbone.forward(stack_images(data, chunk)));
        predicted.insert(predicted.end(), out.values().begin(), out.values().end());
    }
    return evaluate_mse(predicted, data.gcs);
}

/// MSE training of backbone plus single-task head on whole images.
inline TrainRunReport train_image_level(ImageLevelModel& model, const ImageSet& train,
                                        const ImageSet& val, const FitConfig& config) {
    auto params = param_tensors(model.backbone.parameters());
    for (auto& [name, tensor] : model.head.parameters()) params.push_back(tensor);
    auto result = fit(
        params, train.size(),
        [&](const std::vector<std::size_t>& batch) {
            std::vector<double> gcs;
            gcs.reserve(batch.size());
            for (const std::size_t i : batch) gcs.push_back(train.gcs[i]);
            auto target = Tensor<double>::from_values({batch.size(), 1}, std::move(gcs), false);
            auto features = model.backbone.forward(stack_images(train, batch));
            return reduce_mean(square(sub(model.head.forward(features), target)));
        },
        [&] { return image_level_mse(model, val); }, config);
    load_values(params, result.best_values);
    return result.report;
}

inline NamedParams<double> image_level_named_params(ImageLevelModel& model) {
    NamedParams<double> params;
    for (auto& [name, tensor] : model.backbone.parameters())
        params.emplace_back("backbone." + name, tensor);
    for (auto& [name, tensor] : model.head.parameters())
        params.emplace_back("head." + name, tensor);
    return params;
}

/// Per-fold validation MSE of face heads trained on fold complements, plus
/// their arithmetic mean.
struct CrossvalReport {
    std::vector<double> fold_mse;
    double average = 0.0;

    /// One row per fold and a final "average" row.
    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t i = 0; i < fold_mse.size(); ++i)
            rows.push_back({{"fold", i + 1}, {"mse", fold_mse[i]}});
        rows.push_back({{"fold", "average"}, {"mse", average}});
        return {{"folds", fold_mse.size()}, {"rows", rows}};
    }
};

/// K-fold cross-validation of the cohesion head over precomputed pooled
/// group features (the capsule network stays a fixed feature extractor, so
/// pooling happens once). Each fold trains a fresh head on the fold's
/// complement and scores MSE on the fold itself.
inline CrossvalReport crossval_face_head(const std::vector<Tensor<double>>& features,
                                         const std::vector<double>& gcs,
                                         const FaceHeadConfig& head_config, std::size_t k,
                                         const FitConfig& config) {
    if (features.size() != gcs.size())
        throw DimensionError("crossval: " + std::to_string(features.size()) + " feature sets vs " +
                             std::to_string(gcs.size()) + " labels");
    auto folds = kfold_split(features.size(), k, config.seed);
    CrossvalReport report;
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<Tensor<double>> train_feats, val_feats;
        std::vector<double> train_gcs, val_gcs;
        for (const std::size_t i : folds.complement(f)) {
            train_feats.push_back(features[i]);
            train_gcs.push_back(gcs[i]);
        }
        for (const std::size_t i : folds.members(f)) {
            val_feats.push_back(features[i]);
            val_gcs.push_back(gcs[i]);
        }
        Rng rng(config.seed + f);
        FaceHead<double> head(head_config, rng);
        train_face_head(head, train_feats, train_gcs, val_feats, val_gcs, config);
        report.fold_mse.push_back(face_head_mse(head, val_feats, val_gcs));
    }
    report.average = std::accumulate(report.fold_mse.begin(), report.fold_mse.end(), 0.0) /
                     static_cast<double>(k);
    return report;
}

}  // namespace cohesion
