// Command-line surface for the cohesion pipeline: training, evaluation,
// cross-validation, annotation statistics, saliency export, and synthetic
// data generation. Exit codes: 0 success, 2 usage or configuration errors,
// 3 runtime failures (unreadable files, divergence, malformed data).
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cohesion/agreement.hpp"
#include "cohesion/checkpoint.hpp"
#include "cohesion/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace cohesion;

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 3;

// ---------------------------------------------------------------------------
// Architecture descriptions stored in checkpoints, so eval and saliency can
// rebuild the exact model without repeating training flags.
// ---------------------------------------------------------------------------

json capsnet_arch(const CapsNetConfig& c) {
    return {{"kind", "capsnet"},
            {"input_hw", c.input_hw},
            {"conv_filters", c.conv_filters},
            {"conv_kernel", c.conv_kernel},
            {"primary_kernel", c.primary_kernel},
            {"primary_stride", c.primary_stride},
            {"primary_channels", c.primary_channels},
            {"primary_dim", c.primary_dim},
            {"num_classes", c.num_classes},
            {"class_dim", c.class_dim},
            {"routing_iterations", c.routing_iterations},
            {"decoder_hidden1", c.decoder_hidden1},
            {"decoder_hidden2", c.decoder_hidden2}};
}

CapsNetConfig capsnet_from_arch(const json& a) {
    CapsNetConfig c;
    c.input_hw = a.at("input_hw").get<std::size_t>();
    c.conv_filters = a.at("conv_filters").get<std::size_t>();
    c.conv_kernel = a.at("conv_kernel").get<std::size_t>();
    c.primary_kernel = a.at("primary_kernel").get<std::size_t>();
    c.primary_stride = a.at("primary_stride").get<std::size_t>();
    c.primary_channels = a.at("primary_channels").get<std::size_t>();
    c.primary_dim = a.at("primary_dim").get<std::size_t>();
    c.num_classes = a.at("num_classes").get<std::size_t>();
    c.class_dim = a.at("class_dim").get<std::size_t>();
    c.routing_iterations = a.at("routing_iterations").get<std::size_t>();
    c.decoder_hidden1 = a.at("decoder_hidden1").get<std::size_t>();
    c.decoder_hidden2 = a.at("decoder_hidden2").get<std::size_t>();
    return c;
}

json face_head_arch(const FaceHeadConfig& c) {
    return {{"emotions", c.emotions}, {"hidden1", c.hidden1}, {"hidden2", c.hidden2}};
}

FaceHeadConfig face_head_from_arch(const json& a) {
    FaceHeadConfig c;
    c.emotions = a.at("emotions").get<std::size_t>();
    c.hidden1 = a.at("hidden1").get<std::size_t>();
    c.hidden2 = a.at("hidden2").get<std::size_t>();
    return c;
}

struct ImageArch {
    SmallConvBackboneConfig backbone;
    ImageHeadConfig head;
    std::size_t image_size = 48;
};

json image_arch(const std::string& kind, const ImageArch& a) {
    return {{"kind", kind},
            {"width", a.backbone.width},
            {"hidden", a.head.hidden},
            {"emotions", a.head.emotions},
            {"image_size", a.image_size}};
}

ImageArch image_from_arch(const json& a) {
    ImageArch out;
    out.backbone.width = a.at("width").get<std::size_t>();
    out.head.input_width = out.backbone.width;
    out.head.hidden = a.at("hidden").get<std::size_t>();
    out.head.emotions = a.at("emotions").get<std::size_t>();
    out.image_size = a.at("image_size").get<std::size_t>();
    return out;
}

json parse_arch(const Checkpoint<double>& ckpt, const std::string& origin) {
    json a = json::parse(ckpt.architecture, nullptr, false);
    if (a.is_discarded() || !a.is_object() || !a.contains("kind"))
        throw ConfigError(origin + ": checkpoint carries no recognizable architecture");
    return a;
}

NamedParams<double> named(const NamedParams<double>& params) { return params; }

// ---------------------------------------------------------------------------
// Shared option plumbing
// ---------------------------------------------------------------------------

struct CommonOpts {
    std::string manifest;
    std::string model = "face-level";
    std::string out_dir = ".";
    std::string pretrained;
    std::size_t epochs = 0;
    std::size_t batch = 0;
    double lr = 0.0;
    double momentum = 0.0;
    double alpha = 1.0;
    std::uint64_t seed = 0;
    std::size_t image_size = 48;
    std::size_t pretrain_epochs = 2;
    std::size_t folds = 5;
    bool mask_ablation = false;
    bool emotion_only = false;
};

void add_train_flags(CLI::App& cmd, CommonOpts& o, bool with_model) {
    cmd.add_option("--manifest", o.manifest, "Dataset manifest (JSON lines)")->required();
    if (with_model)
        cmd.add_option("--model", o.model, "Model kind")
            ->check(CLI::IsMember({"face-level", "image-level", "multitask", "capsnet-pretrain"}));
    cmd.add_option("--epochs", o.epochs, "Training epochs (model-specific default)");
    cmd.add_option("--batch", o.batch, "Batch size (model-specific default)");
    cmd.add_option("--lr", o.lr, "Learning rate (model-specific default)");
    cmd.add_option("--momentum", o.momentum, "SGD momentum (model-specific default)");
    cmd.add_option("--alpha", o.alpha, "Cohesion-loss weight for multitask")->capture_default_str();
    cmd.add_option("--seed", o.seed, "Master seed")->capture_default_str();
    cmd.add_option("--out", o.out_dir, "Output directory")->capture_default_str();
    cmd.add_option("--image-size", o.image_size, "Square resize for image-level models")->capture_default_str();
    cmd.add_option("--pretrain-epochs", o.pretrain_epochs,
                   "Capsule pretraining epochs for face-level")->capture_default_str();
    cmd.add_option("--pretrained", o.pretrained, "Reuse a capsule-network checkpoint");
    cmd.add_flag("--mask-ablation", o.mask_ablation,
                 "Image-level models: background-person filter via masks");
    if (with_model)
        cmd.add_flag("--emotion-only", o.emotion_only, "Multitask: train the emotion branch only");
}

// Per-model defaults, overridable by flags (flags > config file > defaults).
void resolve_defaults(const CLI::App& cmd, CommonOpts& o) {
    const bool has_lr = cmd.count("--lr") > 0;
    const bool has_momentum = cmd.count("--momentum") > 0;
    const bool has_epochs = cmd.count("--epochs") > 0;
    const bool has_batch = cmd.count("--batch") > 0;
    if (o.model == "face-level") {
        if (!has_lr) o.lr = 0.01;
        if (!has_momentum) o.momentum = 0.0;
        if (!has_epochs) o.epochs = 30;
        if (!has_batch) o.batch = 16;
    } else if (o.model == "capsnet-pretrain") {
        if (!has_lr) o.lr = 0.001;
        if (!has_momentum) o.momentum = 0.0;
        if (!has_epochs) o.epochs = 2;
        if (!has_batch) o.batch = 32;
    } else {  // image-level, multitask
        if (!has_lr) o.lr = 0.001;
        if (!has_momentum) o.momentum = 0.9;
        if (!has_epochs) o.epochs = 5;
        if (!has_batch) o.batch = 16;
    }
}

FitConfig fit_config(const CommonOpts& o, OptimizerKind kind) {
    FitConfig f;
    f.optimizer.kind = kind;
    f.optimizer.learning_rate = o.lr;
    f.optimizer.momentum = o.momentum;
    f.epochs = o.epochs;
    f.batch_size = o.batch;
    f.seed = o.seed;
    return f;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

std::string manifest_dir(const std::string& manifest_path) {
    auto dir = fs::path(manifest_path).parent_path();
    return dir.empty() ? std::string(".") : dir.string();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct FaceLevelParts {
    CapsNetConfig caps_config;
    std::optional<CapsNet<double>> net;
    json pretrain_report;  // null when a checkpoint was reused
};

// Builds the frozen capsule feature extractor: either restored from a
// checkpoint or pretrained on the train split's face crops.
FaceLevelParts prepare_capsnet(const DatasetManifest& manifest, const std::string& dir,
                               const CommonOpts& o) {
    FaceLevelParts parts;
    parts.caps_config = desk_capsnet_config();
    std::optional<Checkpoint<double>> restored;
    if (!o.pretrained.empty()) {
        restored = load_checkpoint<double>(o.pretrained);
        json arch = parse_arch(*restored, o.pretrained);
        if (arch.at("kind").get<std::string>() != "capsnet")
            throw ConfigError("--pretrained expects a capsule-network checkpoint, got kind '" +
                              arch.at("kind").get<std::string>() + "'");
        parts.caps_config = capsnet_from_arch(arch);
    }
    Rng rng(o.seed);
    parts.net.emplace(parts.caps_config, rng);
    if (restored) {
        auto params = named(parts.net->parameters());
        restored->apply_to(params);
    } else {
        auto train_crops = load_face_crops(manifest, dir, manifest.split_indices(Split::Train),
                                           parts.caps_config.input_hw);
        auto val_crops = load_face_crops(manifest, dir, manifest.split_indices(Split::Val),
                                         parts.caps_config.input_hw);
        FitConfig pf;
        pf.optimizer.kind = OptimizerKind::Adam;
        pf.optimizer.learning_rate = 0.001;
        pf.epochs = o.pretrain_epochs;
        pf.batch_size = 32;
        pf.seed = o.seed;
        parts.pretrain_report = pretrain_capsnet(*parts.net, train_crops, val_crops, pf).to_json();
    }
    parts.net->set_trainable(false);
    return parts;
}

json train_face_level(const DatasetManifest& manifest, const std::string& dir,
                      const CommonOpts& o, const fs::path& out_dir) {
    auto parts = prepare_capsnet(manifest, dir, o);
    auto& net = *parts.net;
    auto train_crops = load_face_crops(manifest, dir, manifest.split_indices(Split::Train),
                                       parts.caps_config.input_hw);
    auto val_crops = load_face_crops(manifest, dir, manifest.split_indices(Split::Val),
                                     parts.caps_config.input_hw);
    auto train_feats = pooled_group_features(net, train_crops);
    auto val_feats = pooled_group_features(net, val_crops);

    FaceHeadConfig hc;
    Rng hrng(o.seed + 1);
    FaceHead<double> head(hc, hrng);
    auto head_report = train_face_head(head, train_feats, train_crops.group_gcs, val_feats,
                                       val_crops.group_gcs,
                                       fit_config(o, OptimizerKind::SgdMomentum));

    json metrics = {{"val_mse", face_head_mse(head, val_feats, val_crops.group_gcs)},
                    {"capsnet_val_accuracy", capsnet_accuracy(net, val_crops)}};
    json arch = {{"kind", "face-level"},
                 {"capsnet", capsnet_arch(parts.caps_config)},
                 {"head", face_head_arch(hc)}};
    auto ckpt =
        Checkpoint<double>::capture(arch.dump(), o.seed, face_level_named_params(net, head));
    for (auto& [key, value] : metrics.items()) ckpt.metrics[key] = value.get<double>();
    save_checkpoint((out_dir / "checkpoint.ckpt").string(), ckpt);

    json report = {{"model", o.model}, {"head", head_report.to_json()}, {"metrics", metrics}};
    if (!parts.pretrain_report.is_null()) report["capsnet"] = parts.pretrain_report;
    return report;
}

json train_capsnet_only(const DatasetManifest& manifest, const std::string& dir,
                        const CommonOpts& o, const fs::path& out_dir) {
    CapsNetConfig cc = desk_capsnet_config();
    auto train_crops =
        load_face_crops(manifest, dir, manifest.split_indices(Split::Train), cc.input_hw);
    auto val_crops = load_face_crops(manifest, dir, manifest.split_indices(Split::Val), cc.input_hw);
    Rng rng(o.seed);
    CapsNet<double> net(cc, rng);
    auto run_report = pretrain_capsnet(net, train_crops, val_crops, fit_config(o, OptimizerKind::Adam));

    json metrics = {{"val_accuracy", capsnet_accuracy(net, val_crops)}};
    auto ckpt = Checkpoint<double>::capture(capsnet_arch(cc).dump(), o.seed, net.parameters());
    ckpt.metrics["val_accuracy"] = metrics["val_accuracy"].get<double>();
    save_checkpoint((out_dir / "checkpoint.ckpt").string(), ckpt);
    return {{"model", o.model}, {"train", run_report.to_json()}, {"metrics", metrics}};
}

json train_image_only(const DatasetManifest& manifest, const std::string& dir, const CommonOpts& o,
                      const fs::path& out_dir) {
    auto train = load_image_set(manifest, dir, manifest.split_indices(Split::Train), o.image_size,
                                o.mask_ablation);
    auto val = load_image_set(manifest, dir, manifest.split_indices(Split::Val), o.image_size,
                              o.mask_ablation);
    ImageArch arch;
    arch.image_size = o.image_size;
    arch.head.emotions = 3;
    Rng rng(o.seed);
    ImageLevelModel model(arch.backbone, arch.head, rng);
    auto run_report = train_image_level(model, train, val, fit_config(o, OptimizerKind::SgdMomentum));

    json metrics = {{"val_mse", image_level_mse(model, val)}};
    auto ckpt = Checkpoint<double>::capture(image_arch("image-level", arch).dump(), o.seed,
                                            image_level_named_params(model));
    ckpt.metrics["val_mse"] = metrics["val_mse"].get<double>();
    save_checkpoint((out_dir / "checkpoint.ckpt").string(), ckpt);
    return {{"model", o.model}, {"train", run_report.to_json()}, {"metrics", metrics}};
}

json train_multitask_cmd(const DatasetManifest& manifest, const std::string& dir,
                         const CommonOpts& o, const fs::path& out_dir) {
    auto train = load_image_set(manifest, dir, manifest.split_indices(Split::Train), o.image_size,
                                o.mask_ablation);
    auto val = load_image_set(manifest, dir, manifest.split_indices(Split::Val), o.image_size,
                              o.mask_ablation);
    MultitaskConfig mc;
    mc.optimizer.learning_rate = o.lr;
    mc.optimizer.momentum = o.momentum;
    mc.epochs = o.epochs;
    mc.batch_size = o.batch;
    mc.seed = o.seed;
    mc.alpha = o.alpha;
    mc.emotion_only = o.emotion_only;
    auto run = train_multitask(train, val, mc);

    json epochs = json::array();
    for (std::size_t e = 0; e < run.cross_entropy.size(); ++e)
        epochs.push_back({{"epoch", e + 1},
                          {"cross_entropy", run.cross_entropy[e]},
                          {"squared_error", run.squared_error[e]}});
    json metrics = {{"val_mse", run.val_mse}, {"val_accuracy", run.val_accuracy}};

    ImageArch arch;
    arch.backbone = mc.backbone;
    arch.head = mc.head;
    arch.image_size = o.image_size;
    auto ckpt = Checkpoint<double>::capture(image_arch("multitask", arch).dump(), o.seed,
                                            multitask_named_params(run));
    ckpt.metrics["val_mse"] = run.val_mse;
    ckpt.metrics["val_accuracy"] = run.val_accuracy;
    save_checkpoint((out_dir / "checkpoint.ckpt").string(), ckpt);
    return {{"model", o.model}, {"epochs", epochs}, {"metrics", metrics}, {"alpha", o.alpha}};
}

int cmd_train(const CLI::App& cmd, CommonOpts& o) {
    resolve_defaults(cmd, o);
    auto manifest = load_manifest(o.manifest);
    const std::string dir = manifest_dir(o.manifest);
    fs::path out_dir(o.out_dir);
    fs::create_directories(out_dir);

    json report;
    if (o.model == "face-level")
        report = train_face_level(manifest, dir, o, out_dir);
    else if (o.model == "capsnet-pretrain")
        report = train_capsnet_only(manifest, dir, o, out_dir);
    else if (o.model == "image-level")
        report = train_image_only(manifest, dir, o, out_dir);
    else
        report = train_multitask_cmd(manifest, dir, o, out_dir);

    report["seed"] = o.seed;
    report["optimizer"] = {{"learning_rate", o.lr},
                           {"momentum", o.momentum},
                           {"epochs", o.epochs},
                           {"batch", o.batch}};
    report["checkpoint"] = (out_dir / "checkpoint.ckpt").string();
    write_json(out_dir / "report.json", report);
    std::cout << report["metrics"].dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(CommonOpts& o, const std::string& checkpoint_path, const std::string& split_tag,
             const std::string& out_file) {
    auto ckpt = load_checkpoint<double>(checkpoint_path);
    json arch = parse_arch(ckpt, checkpoint_path);
    const std::string kind = arch.at("kind").get<std::string>();
    auto manifest = load_manifest(o.manifest);
    const std::string dir = manifest_dir(o.manifest);
    auto indices = manifest.split_indices(split_from_string(split_tag));
    if (indices.empty())
        throw ConfigError("split '" + split_tag + "' has no samples in " + o.manifest);

    json metrics;
    if (kind == "capsnet") {
        CapsNetConfig cc = capsnet_from_arch(arch);
        Rng rng(0);
        CapsNet<double> net(cc, rng);
        auto params = named(net.parameters());
        ckpt.apply_to(params);
        net.set_trainable(false);
        auto crops = load_face_crops(manifest, dir, indices, cc.input_hw);
        metrics = {{"accuracy", capsnet_accuracy(net, crops)}, {"faces", crops.face_count()}};
    } else if (kind == "face-level") {
        CapsNetConfig cc = capsnet_from_arch(arch.at("capsnet"));
        FaceHeadConfig hc = face_head_from_arch(arch.at("head"));
        Rng rng(0);
        CapsNet<double> net(cc, rng);
        FaceHead<double> head(hc, rng);
        auto params = face_level_named_params(net, head);
        ckpt.apply_to(params);
        net.set_trainable(false);
        auto crops = load_face_crops(manifest, dir, indices, cc.input_hw);
        auto feats = pooled_group_features(net, crops);
        metrics = {{"mse", face_head_mse(head, feats, crops.group_gcs)},
                   {"capsnet_accuracy", capsnet_accuracy(net, crops)},
                   {"groups", crops.group_count()}};
    } else if (kind == "image-level") {
        ImageArch ia = image_from_arch(arch);
        Rng rng(0);
        ImageLevelModel model(ia.backbone, ia.head, rng);
        auto params = image_level_named_params(model);
        ckpt.apply_to(params);
        auto data = load_image_set(manifest, dir, indices, ia.image_size, o.mask_ablation);
        metrics = {{"mse", image_level_mse(model, data)}, {"samples", data.size()}};
    } else if (kind == "multitask") {
        ImageArch ia = image_from_arch(arch);
        MultitaskConfig mc;
        mc.backbone = ia.backbone;
        mc.head = ia.head;
        Rng rng(0);
        MultitaskRun run(mc, rng);
        auto params = multitask_named_params(run);
        ckpt.apply_to(params);
        auto data = load_image_set(manifest, dir, indices, ia.image_size, o.mask_ablation);
        std::vector<double> pred_gcs;
        std::vector<std::size_t> pred_class;
        constexpr std::size_t kChunk = 32;
        for (std::size_t start = 0; start < data.size(); start += kChunk) {
            const std::size_t end = std::min(start + kChunk, data.size());
            std::vector<std::size_t> chunk(end - start);
            std::iota(chunk.begin(), chunk.end(), start);
            auto out = run.head.forward(run.backbone.forward(stack_images(data, chunk)));
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
        auto eval = evaluate_classification(pred_class, data.valence, 3);
        metrics = {{"mse", evaluate_mse(pred_gcs, data.gcs)},
                   {"accuracy", eval.accuracy ? *eval.accuracy : 0.0},
                   {"samples", data.size()}};
    } else {
        throw ConfigError(checkpoint_path + ": unknown model kind '" + kind + "'");
    }

    json report = {{"model", kind}, {"split", split_tag}, {"metrics", metrics}};
    std::cout << report.dump(2) << '\n';
    if (!out_file.empty()) write_json(out_file, report);
    return 0;
}

// ---------------------------------------------------------------------------
// crossval
// ---------------------------------------------------------------------------

int cmd_crossval(const CLI::App& cmd, CommonOpts& o) {
    o.model = "face-level";
    resolve_defaults(cmd, o);
    if (o.folds < 2) throw ConfigError("crossval: need at least 2 folds");
    auto manifest = load_manifest(o.manifest);
    const std::string dir = manifest_dir(o.manifest);

    auto parts = prepare_capsnet(manifest, dir, o);
    std::vector<std::size_t> all(manifest.records.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto crops = load_face_crops(manifest, dir, all, parts.caps_config.input_hw);
    auto features = pooled_group_features(*parts.net, crops);

    auto report = crossval_face_head(features, crops.group_gcs, FaceHeadConfig{}, o.folds,
                                     fit_config(o, OptimizerKind::SgdMomentum));
    json j = report.to_json();
    j["model"] = "face-level";
    j["seed"] = o.seed;
    fs::path out_dir(o.out_dir);
    fs::create_directories(out_dir);
    write_json(out_dir / "crossval.json", j);
    std::cout << j.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

int cmd_stats(const std::string& annotations, int levels, const std::string& weighting,
              const std::string& out_file) {
    auto matrix = read_annotation_matrix(annotations, levels);
    auto report = agreement_report(matrix, weighting == "quadratic" ? KappaWeighting::Quadratic
                                                                    : KappaWeighting::Linear);
    json j = report.to_json(matrix);
    std::cout << j.dump(2) << '\n';
    if (!out_file.empty()) write_json(out_file, j);
    return 0;
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

int cmd_saliency(const std::string& checkpoint_path, const std::string& image_path,
                 const std::string& out_path) {
    auto ckpt = load_checkpoint<double>(checkpoint_path);
    json arch = parse_arch(ckpt, checkpoint_path);
    const std::string kind = arch.at("kind").get<std::string>();
    if (kind != "image-level" && kind != "multitask")
        throw ConfigError("saliency needs an image-level or multitask checkpoint, got '" + kind +
                          "'");

    auto raster = read_raster(image_path);
    auto image = raster_to_tensor(raster);
    if (image.shape()[0] != 3)
        throw ConfigError("saliency expects an RGB image, got " +
                          std::to_string(image.shape()[0]) + " channel(s)");
    const std::size_t h = image.shape()[1], w = image.shape()[2];

    ImageArch ia = image_from_arch(arch);
    Tensor<double> map;
    if (kind == "image-level") {
        Rng rng(0);
        ImageLevelModel model(ia.backbone, ia.head, rng);
        auto params = image_level_named_params(model);
        ckpt.apply_to(params);
        map = saliency_map(
            [&](const Tensor<double>& img) {
                return reduce_sum(
                    model.head.forward(model.backbone.forward(reshape(img, {1, 3, h, w}))));
            },
            image);
    } else {
        MultitaskConfig mc;
        mc.backbone = ia.backbone;
        mc.head = ia.head;
        Rng rng(0);
        MultitaskRun run(mc, rng);
        auto params = multitask_named_params(run);
        ckpt.apply_to(params);
        map = saliency_map(
            [&](const Tensor<double>& img) {
                return reduce_sum(
                    run.head.forward(run.backbone.forward(reshape(img, {1, 3, h, w}))).gcs);
            },
            image);
    }
    write_raster(out_path, tensor_to_raster(map));
    std::cout << json{{"saliency", out_path}, {"height", h}, {"width", w}}.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const SynthSpec& spec, const std::string& out_dir) {
    auto manifest = synth_generate(spec, out_dir);
    std::size_t faces = 0;
    for (const auto& record : manifest.records) faces += record.face_boxes.size();
    json summary = {{"samples", manifest.records.size()},
                    {"faces", faces},
                    {"train", manifest.split_size(Split::Train)},
                    {"val", manifest.split_size(Split::Val)},
                    {"test", manifest.split_size(Split::Test)},
                    {"manifest", (fs::path(out_dir) / "manifest.jsonl").string()}};
    std::cout << summary.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Group-cohesion pipeline: capsule emotion features, cohesion heads, "
                 "agreement statistics, and synthetic data"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI config file ([subcommand] sections; flags win)");

    CommonOpts train_opts;
    auto* train = app.add_subcommand("train", "Train a model and write checkpoint + report");
    add_train_flags(*train, train_opts, true);

    CommonOpts eval_opts;
    std::string eval_checkpoint, eval_split = "val", eval_out;
    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a manifest split");
    eval->add_option("--manifest", eval_opts.manifest, "Dataset manifest")->required();
    eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint")->required();
    eval->add_option("--split", eval_split, "Manifest split")->capture_default_str()
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--out", eval_out, "Also write the report to this file");
    eval->add_flag("--mask-ablation", eval_opts.mask_ablation,
                   "Image-level models: background-person filter via masks");

    CommonOpts cv_opts;
    auto* crossval = app.add_subcommand(
        "crossval", "K-fold cross-validation of the face-level cohesion head");
    add_train_flags(*crossval, cv_opts, false);
    crossval->add_option("--folds", cv_opts.folds, "Number of folds")->capture_default_str()
        ->check(CLI::Range(std::size_t{2}, std::size_t{1000}));

    std::string stats_file, stats_weighting = "linear", stats_out;
    int stats_levels = 4;
    auto* stats = app.add_subcommand("stats", "Inter-rater agreement statistics");
    stats->add_option("--annotations", stats_file,
                      "Annotation matrix: header of rater ids, then one label row per item")
        ->required();
    stats->add_option("--levels", stats_levels, "Ordinal scale size")->capture_default_str()
        ->check(CLI::Range(2, 64));
    stats->add_option("--weighting", stats_weighting, "Kappa disagreement weighting")->capture_default_str()
        ->check(CLI::IsMember({"linear", "quadratic"}));
    stats->add_option("--out", stats_out, "Also write the report to this file");

    std::string sal_checkpoint, sal_image, sal_out;
    auto* saliency = app.add_subcommand("saliency", "Input-gradient heat map as a grayscale image");
    saliency->add_option("--checkpoint", sal_checkpoint, "Image-level or multitask checkpoint")
        ->required();
    saliency->add_option("--image", sal_image, "Input image (binary netpbm)")->required();
    saliency->add_option("--out", sal_out, "Output grayscale map path")->required();

    SynthSpec synth_spec;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic group-image dataset");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--samples", synth_spec.samples, "Number of group images")->capture_default_str();
    synth->add_option("--seed", synth_spec.seed, "Generator seed")->capture_default_str();
    synth->add_option("--faces-min", synth_spec.faces_min, "Minimum faces per group")->capture_default_str();
    synth->add_option("--faces-max", synth_spec.faces_max, "Maximum faces per group")->capture_default_str();
    synth->add_option("--noise", synth_spec.noise, "Pixel noise amplitude")->capture_default_str();
    synth->add_option("--train-fraction", synth_spec.train_fraction, "Train split share")->capture_default_str();
    synth->add_option("--val-fraction", synth_spec.val_fraction, "Validation split share")->capture_default_str();

    // Lets --config (a main-app flag) appear after the subcommand name.
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigExit;
    }

    try {
        if (train->parsed()) return cmd_train(*train, train_opts);
        if (eval->parsed()) return cmd_eval(eval_opts, eval_checkpoint, eval_split, eval_out);
        if (crossval->parsed()) return cmd_crossval(*crossval, cv_opts);
        if (stats->parsed()) return cmd_stats(stats_file, stats_levels, stats_weighting, stats_out);
        if (saliency->parsed()) return cmd_saliency(sal_checkpoint, sal_image, sal_out);
        if (synth->parsed()) return cmd_synth(synth_spec, synth_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigExit;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigExit;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeExit;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntimeExit;
    }
    return 0;
}
