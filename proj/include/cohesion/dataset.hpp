#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cohesion/errors.hpp"
#include "cohesion/heads.hpp"
#include "cohesion/image_io.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

enum class Split { Train, Val, Test };
enum class GroupEmotion { Positive, Neutral, Negative };

std::string to_string(Split split);
std::string to_string(GroupEmotion emotion);
Split split_from_string(const std::string& tag);
GroupEmotion emotion_from_string(const std::string& tag);

/// The seven per-face emotion classes, in label-index order.
inline constexpr std::size_t kFaceEmotionCount = 7;
extern const char* const kFaceEmotionNames[kFaceEmotionCount];
// happy, sad, angry, disgust, fear, surprise, neutral

/// Valence of a face emotion: happy is positive; neutral and surprise are
/// neutral; sad, angry, disgust and fear are negative.
GroupEmotion emotion_valence(std::size_t face_emotion);

struct FaceBox {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t width = 0;
    std::size_t height = 0;
};

/// One manifest record: image metadata, face boxes, labels and split tag.
struct GroupSample {
    std::string image_path;  // relative to the manifest directory
    std::string mask_path;   // empty = no person mask
    std::size_t image_width = 0;
    std::size_t image_height = 0;
    std::vector<FaceBox> face_boxes;
    std::vector<int> face_emotions;  // per-face ground truth; may be empty
    double gcs_label = 0.0;          // in [0,3]
    GroupEmotion emotion_label = GroupEmotion::Neutral;
    Split split = Split::Train;

    bool has_mask() const { return !mask_path.empty(); }
};

struct DatasetManifest {
    int schema_version = 1;
    std::vector<GroupSample> records;

    std::vector<std::size_t> split_indices(Split split) const;
    std::size_t split_size(Split split) const { return split_indices(split).size(); }
};

/// JSON-lines manifest: a header object carrying the schema version, then
/// one record object per line. Loading enforces every record invariant and
/// names the violating record and field.
DatasetManifest load_manifest(const std::string& path);
DatasetManifest parse_manifest(const std::string& text, const std::string& origin);
std::string serialize_manifest(const DatasetManifest& manifest);
void save_manifest(const std::string& path, const DatasetManifest& manifest);

/// Loads a record's image (or mask) relative to the manifest's directory.
/// Asking for the mask of a mask-less record raises MissingMaskError.
Raster load_sample_image(const std::string& manifest_dir, const GroupSample& record);
Raster load_sample_mask(const std::string& manifest_dir, const GroupSample& record);

/// Synthetic desk-scale generator: procedural group images of glyph faces,
/// one of seven emotion archetypes each, with pixel noise. Ground-truth
/// cohesion is the modal-emotion fraction mapped affinely onto [0,3]
/// (all faces agree → 3, uniform spread over the seven classes → 0), and
/// the group emotion label is the valence of the modal face emotion. Ties
/// for the mode resolve to the smallest emotion index.
struct SynthSpec {
    std::size_t samples = 100;
    std::size_t faces_min = 2;
    std::size_t faces_max = 5;
    double noise = 0.05;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
    double val_fraction = 0.2;  // remainder after train+val is the test split

    void validate() const;
};

/// Extents of generated content: 3x3 cells of 32px on a 96px canvas with a
/// 28px glyph per face, so up to 9 faces per group.
inline constexpr std::size_t kSynthImageSize = 96;
inline constexpr std::size_t kSynthCellSize = 32;
inline constexpr std::size_t kSynthGlyphSize = 28;
inline constexpr std::size_t kSynthMaxFaces = 9;

struct SynthSample {
    GroupSample record;
    Raster image;
    Raster mask;
};

/// Cohesion score implied by a set of face emotions (the generator's label
/// function): 3·(modal fraction − 1/7)/(1 − 1/7).
double cohesion_from_emotions(const std::vector<int>& face_emotions);
std::size_t modal_emotion(const std::vector<int>& face_emotions);

/// One face glyph: [size, size] grayscale values in [0,1].
std::vector<double> render_face_glyph(std::size_t emotion, std::size_t size, double noise,
                                      Rng& rng);

/// Generates sample `index` under `spec`. Deterministic per (spec, index),
/// independent of generation order.
SynthSample synth_sample(const SynthSpec& spec, std::size_t index);

/// Renders the whole dataset under `out_dir` (images/, masks/,
/// manifest.jsonl) and returns the manifest. Byte-identical per seed.
DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir);

/// Face crop for the capsule network: luminance grayscale (0.299, 0.587,
/// 0.114), bilinear resize to target extents, values in [0,1]. Returns a
/// [1, target, target] tensor.
Tensor<double> preprocess_face(const Raster& image, const FaceBox& box, std::size_t target);

/// Bilinear resampling of a [height, width] grid to [out_height, out_width]
/// with half-pixel centers (align-corners = false).
std::vector<double> bilinear_resize(const std::vector<double>& values, std::size_t height,
                                    std::size_t width, std::size_t out_height,
                                    std::size_t out_width);

/// Background-ablation rule on loaded rasters: binarizes the mask and
/// applies the strict below-half coverage inclusion test.
MaskCropResult<double> ablation_crop(const Raster& image, const Raster& mask);

}  // namespace cohesion
