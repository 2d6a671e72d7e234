#include "cohesion/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cohesion {

const char* const kFaceEmotionNames[kFaceEmotionCount] = {
    "happy", "sad", "angry", "disgust", "fear", "surprise", "neutral"};

std::string to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw ContractError("unknown split tag");
}

std::string to_string(GroupEmotion emotion) {
    switch (emotion) {
        case GroupEmotion::Positive: return "positive";
        case GroupEmotion::Neutral: return "neutral";
        case GroupEmotion::Negative: return "negative";
    }
    throw ContractError("unknown group emotion");
}

Split split_from_string(const std::string& tag) {
    if (tag == "train") return Split::Train;
    if (tag == "val") return Split::Val;
    if (tag == "test") return Split::Test;
    throw ConfigError("unknown split tag '" + tag + "' (expected train/val/test)");
}

GroupEmotion emotion_from_string(const std::string& tag) {
    if (tag == "positive") return GroupEmotion::Positive;
    if (tag == "neutral") return GroupEmotion::Neutral;
    if (tag == "negative") return GroupEmotion::Negative;
    throw ConfigError("unknown group emotion '" + tag + "' (expected positive/neutral/negative)");
}

GroupEmotion emotion_valence(std::size_t face_emotion) {
    switch (face_emotion) {
        case 0: return GroupEmotion::Positive;                    // happy
        case 5: case 6: return GroupEmotion::Neutral;             // surprise, neutral
        case 1: case 2: case 3: case 4: return GroupEmotion::Negative;
        default:
            throw IndexError("face emotion index " + std::to_string(face_emotion) +
                             " outside [0, 7)");
    }
}

std::vector<std::size_t> DatasetManifest::split_indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == split) out.push_back(i);
    return out;
}

namespace {

void validate_record(const GroupSample& record, std::size_t index) {
    auto fail = [&](const std::string& field, const std::string& why) {
        throw IoError("manifest record " + std::to_string(index) + ": field '" + field + "' " +
                      why);
    };
    if (record.image_path.empty()) fail("image", "is empty");
    if (record.image_width == 0 || record.image_height == 0)
        fail("width/height", "must be positive");
    if (record.gcs_label < 0.0 || record.gcs_label > 3.0 || !std::isfinite(record.gcs_label))
        fail("gcs", "must lie in [0,3], got " + std::to_string(record.gcs_label));
    for (std::size_t b = 0; b < record.face_boxes.size(); ++b) {
        const auto& box = record.face_boxes[b];
        if (box.width == 0 || box.height == 0)
            fail("boxes", "box " + std::to_string(b) + " has zero area");
        if (box.x + box.width > record.image_width || box.y + box.height > record.image_height)
            fail("boxes", "box " + std::to_string(b) + " exceeds the " +
                              std::to_string(record.image_width) + "x" +
                              std::to_string(record.image_height) + " image");
    }
    if (!record.face_emotions.empty() &&
        record.face_emotions.size() != record.face_boxes.size())
        fail("face_emotions", "count differs from the box count");
    for (const int e : record.face_emotions)
        if (e < 0 || static_cast<std::size_t>(e) >= kFaceEmotionCount)
            fail("face_emotions", "value " + std::to_string(e) + " outside [0, 7)");
}

nlohmann::json record_to_json(const GroupSample& record) {
    nlohmann::json j;
    j["image"] = record.image_path;
    if (record.has_mask()) j["mask"] = record.mask_path;
    j["width"] = record.image_width;
    j["height"] = record.image_height;
    j["gcs"] = record.gcs_label;
    j["emotion"] = to_string(record.emotion_label);
    j["split"] = to_string(record.split);
    j["boxes"] = nlohmann::json::array();
    for (const auto& box : record.face_boxes)
        j["boxes"].push_back({box.x, box.y, box.width, box.height});
    if (!record.face_emotions.empty()) j["face_emotions"] = record.face_emotions;
    return j;
}

GroupSample record_from_json(const nlohmann::json& j, std::size_t index) {
    auto require = [&](const char* field) -> const nlohmann::json& {
        if (!j.contains(field))
            throw IoError("manifest record " + std::to_string(index) + ": missing field '" +
                          field + "'");
        return j.at(field);
    };
    GroupSample record;
    try {
        record.image_path = require("image").get<std::string>();
        if (j.contains("mask")) record.mask_path = j.at("mask").get<std::string>();
        record.image_width = require("width").get<std::size_t>();
        record.image_height = require("height").get<std::size_t>();
        record.gcs_label = require("gcs").get<double>();
        record.emotion_label = emotion_from_string(require("emotion").get<std::string>());
        record.split = split_from_string(require("split").get<std::string>());
        for (const auto& b : require("boxes")) {
            if (!b.is_array() || b.size() != 4)
                throw IoError("manifest record " + std::to_string(index) +
                              ": field 'boxes' entries must be [x, y, width, height]");
            record.face_boxes.push_back(
                {b[0].get<std::size_t>(), b[1].get<std::size_t>(), b[2].get<std::size_t>(),
                 b[3].get<std::size_t>()});
        }
        if (j.contains("face_emotions"))
            record.face_emotions = j.at("face_emotions").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest record " + std::to_string(index) + ": " + e.what());
    } catch (const ConfigError& e) {
        throw IoError("manifest record " + std::to_string(index) + ": " + e.what());
    }
    validate_record(record, index);
    return record;
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text, const std::string& origin) {
    std::istringstream stream(text);
    std::string line;
    std::size_t line_number = 0;
    bool saw_header = false;
    DatasetManifest manifest;
    while (std::getline(stream, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(origin + ":" + std::to_string(line_number) + ": " + e.what());
        }
        if (!saw_header) {
            if (!j.contains("schema_version"))
                throw IoError(origin + ":" + std::to_string(line_number) +
                              ": manifest header must carry schema_version");
            manifest.schema_version = j.at("schema_version").get<int>();
            if (manifest.schema_version != 1)
                throw IoError(origin + ": unsupported manifest schema version " +
                              std::to_string(manifest.schema_version));
            saw_header = true;
            continue;
        }
        manifest.records.push_back(record_from_json(j, manifest.records.size()));
    }
    if (!saw_header) throw IoError(origin + ": missing manifest header line");
    return manifest;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw IoError("cannot open '" + path + "' for reading");
    std::string text((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return parse_manifest(text, path);
}

std::string serialize_manifest(const DatasetManifest& manifest) {
    std::string out;
    nlohmann::json header;
    header["schema_version"] = manifest.schema_version;
    header["kind"] = "cohesion-manifest";
    out += header.dump() + "\n";
    for (const auto& record : manifest.records) out += record_to_json(record).dump() + "\n";
    return out;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open '" + path + "' for writing");
    file << serialize_manifest(manifest);
    if (!file) throw IoError("failed to write manifest to '" + path + "'");
}

Raster load_sample_image(const std::string& manifest_dir, const GroupSample& record) {
    return read_raster((std::filesystem::path(manifest_dir) / record.image_path).string());
}

Raster load_sample_mask(const std::string& manifest_dir, const GroupSample& record) {
    if (!record.has_mask())
        throw MissingMaskError("sample '" + record.image_path + "' carries no person mask");
    return read_raster((std::filesystem::path(manifest_dir) / record.mask_path).string());
}

void SynthSpec::validate() const {
    if (samples == 0) throw ConfigError("synth: need at least one sample");
    if (faces_min < 1) throw ConfigError("synth: faces_min must be at least 1");
    if (faces_max < faces_min)
        throw ConfigError("synth: faces_max (" + std::to_string(faces_max) +
                          ") below faces_min (" + std::to_string(faces_min) + ")");
    if (faces_max > kSynthMaxFaces)
        throw ConfigError("synth: at most " + std::to_string(kSynthMaxFaces) +
                          " faces fit the canvas, got " + std::to_string(faces_max));
    if (noise < 0.0 || noise > 0.5)
        throw ConfigError("synth: noise must lie in [0, 0.5], got " + std::to_string(noise));
    if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
        throw ConfigError("synth: split fractions must be nonnegative and sum to at most 1");
}

std::size_t modal_emotion(const std::vector<int>& face_emotions) {
    if (face_emotions.empty())
        throw NoFacesError("modal emotion of an empty face list is undefined");
    std::size_t counts[kFaceEmotionCount] = {};
    for (const int e : face_emotions) {
        if (e < 0 || static_cast<std::size_t>(e) >= kFaceEmotionCount)
            throw IndexError("face emotion index " + std::to_string(e) + " outside [0, 7)");
        ++counts[static_cast<std::size_t>(e)];
    }
    std::size_t best = 0;
    for (std::size_t e = 1; e < kFaceEmotionCount; ++e)
        if (counts[e] > counts[best]) best = e;  // ties keep the smallest index
    return best;
}

double cohesion_from_emotions(const std::vector<int>& face_emotions) {
    const std::size_t mode = modal_emotion(face_emotions);
    std::size_t count = 0;
    for (const int e : face_emotions)
        if (static_cast<std::size_t>(e) == mode) ++count;
    const double fraction =
        static_cast<double>(count) / static_cast<double>(face_emotions.size());
    const double uniform = 1.0 / static_cast<double>(kFaceEmotionCount);
    return 3.0 * (fraction - uniform) / (1.0 - uniform);
}

namespace {

struct Canvas {
    std::size_t size;
    std::vector<double> values;  // grayscale [0,1]

    explicit Canvas(std::size_t s, double fill = 0.0) : size(s), values(s * s, fill) {}

    void put(int x, int y, double v) {
        if (x < 0 || y < 0 || x >= static_cast<int>(size) || y >= static_cast<int>(size)) return;
        values[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = v;
    }

    void disc(double cx, double cy, double radius, double v) {
        for (int y = static_cast<int>(cy - radius) - 1; y <= static_cast<int>(cy + radius) + 1;
             ++y)
            for (int x = static_cast<int>(cx - radius) - 1;
                 x <= static_cast<int>(cx + radius) + 1; ++x) {
                const double dx = x - cx, dy = y - cy;
                if (dx * dx + dy * dy <= radius * radius) put(x, y, v);
            }
    }

    void stroke(double x0, double y0, double x1, double y1, double v) {
        const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) * 2 + 1;
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / steps;
            const double x = x0 + t * (x1 - x0), y = y0 + t * (y1 - y0);
            put(static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)), v);
            put(static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)) + 1, v);
        }
    }
};

// Distinct mouth/brow/eye geometry per archetype; index order matches
// kFaceEmotionNames.
void draw_features(Canvas& canvas, std::size_t emotion, double scale) {
    const double c = canvas.size / 2.0;  // glyph center
    const double eye_y = c - 4.0 * scale, eye_dx = 5.0 * scale;
    const double eye_r = (emotion == 4 || emotion == 5) ? 2.2 * scale : 1.4 * scale;
    canvas.disc(c - eye_dx, eye_y, eye_r, 0.05);
    canvas.disc(c + eye_dx, eye_y, eye_r, 0.05);

    const double mouth_y = c + 5.0 * scale, half = 6.0 * scale;
    switch (emotion) {
        case 0:  // happy: corners up
            for (double dx = -half; dx <= half; dx += 0.5)
                canvas.put(static_cast<int>(std::lround(c + dx)),
                           static_cast<int>(std::lround(mouth_y + 2.0 * scale -
                                                        dx * dx / (3.0 * half))),
                           0.05);
            break;
        case 1:  // sad: corners down
            for (double dx = -half; dx <= half; dx += 0.5)
                canvas.put(static_cast<int>(std::lround(c + dx)),
                           static_cast<int>(std::lround(mouth_y - 2.0 * scale +
                                                        dx * dx / (3.0 * half))),
                           0.05);
            break;
        case 2:  // angry: flat mouth plus inward-slanted brows
            canvas.stroke(c - half, mouth_y, c + half, mouth_y, 0.05);
            canvas.stroke(c - eye_dx - 2 * scale, eye_y - 4 * scale, c - eye_dx + 2 * scale,
                          eye_y - 2 * scale, 0.05);
            canvas.stroke(c + eye_dx - 2 * scale, eye_y - 2 * scale, c + eye_dx + 2 * scale,
                          eye_y - 4 * scale, 0.05);
            break;
        case 3:  // disgust: zigzag mouth and one raised brow
            for (double dx = -half; dx <= half; dx += 1.0)
                canvas.put(static_cast<int>(std::lround(c + dx)),
                           static_cast<int>(std::lround(
                               mouth_y + (static_cast<int>(dx + half) % 2 == 0 ? 1.5 : -1.5))),
                           0.05);
            canvas.stroke(c - eye_dx - 2 * scale, eye_y - 4 * scale, c - eye_dx + 2 * scale,
                          eye_y - 4 * scale, 0.05);
            break;
        case 4:  // fear: tall open mouth
            canvas.disc(c, mouth_y, 2.5 * scale, 0.05);
            canvas.disc(c, mouth_y - 1.5 * scale, 2.0 * scale, 0.05);
            break;
        case 5:  // surprise: round open mouth
            canvas.disc(c, mouth_y, 3.0 * scale, 0.05);
            canvas.disc(c, mouth_y, 1.6 * scale, 0.85);
            break;
        case 6:  // neutral: flat mouth
            canvas.stroke(c - half, mouth_y, c + half, mouth_y, 0.05);
            break;
        default:
            throw IndexError("face emotion index " + std::to_string(emotion) + " outside [0, 7)");
    }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed ^ (0x9E3779B97F4A7C15ull * (index + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

std::vector<double> render_face_glyph(std::size_t emotion, std::size_t size, double noise,
                                      Rng& rng) {
    if (size < 12) throw ConfigError("face glyphs need at least 12 pixels, got " +
                                     std::to_string(size));
    Canvas canvas(size, 0.3);
    const double c = size / 2.0;
    const double scale = size / 28.0;
    canvas.disc(c, c, 12.5 * scale, 0.85);
    draw_features(canvas, emotion, scale);
    if (noise > 0.0)
        for (auto& v : canvas.values)
            v = std::clamp(v + rng.uniform(-noise, noise), 0.0, 1.0);
    return canvas.values;
}

SynthSample synth_sample(const SynthSpec& spec, std::size_t index) {
    spec.validate();
    if (index >= spec.samples)
        throw IndexError("synth sample index " + std::to_string(index) + " outside [0, " +
                         std::to_string(spec.samples) + ")");
    Rng rng(mix_seed(spec.seed, index));

    const std::size_t faces =
        spec.faces_min + rng.below(spec.faces_max - spec.faces_min + 1);
    std::vector<int> emotions(faces);
    for (auto& e : emotions) e = static_cast<int>(rng.below(kFaceEmotionCount));

    // Background: a soft vertical brightness ramp.
    const double base = rng.uniform(0.1, 0.35);
    std::vector<double> gray(kSynthImageSize * kSynthImageSize);
    for (std::size_t y = 0; y < kSynthImageSize; ++y)
        for (std::size_t x = 0; x < kSynthImageSize; ++x)
            gray[y * kSynthImageSize + x] =
                base + 0.15 * static_cast<double>(y) / kSynthImageSize;

    // Faces occupy distinct cells of the 3x3 grid, in shuffled order.
    std::vector<std::size_t> cells(kSynthMaxFaces);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    rng.shuffle(cells);

    SynthSample sample;
    sample.record.face_emotions = emotions;
    const std::size_t margin = kSynthCellSize - kSynthGlyphSize;  // jitter room per cell
    for (std::size_t f = 0; f < faces; ++f) {
        const std::size_t cell = cells[f];
        const std::size_t cx = (cell % 3) * kSynthCellSize + rng.below(margin + 1);
        const std::size_t cy = (cell / 3) * kSynthCellSize + rng.below(margin + 1);
        const auto glyph =
            render_face_glyph(static_cast<std::size_t>(emotions[f]), kSynthGlyphSize,
                              spec.noise, rng);
        for (std::size_t y = 0; y < kSynthGlyphSize; ++y)
            for (std::size_t x = 0; x < kSynthGlyphSize; ++x)
                gray[(cy + y) * kSynthImageSize + (cx + x)] = glyph[y * kSynthGlyphSize + x];
        sample.record.face_boxes.push_back({cx, cy, kSynthGlyphSize, kSynthGlyphSize});
    }

    // RGB image with a mild fixed channel tint.
    sample.image.width = sample.image.height = kSynthImageSize;
    sample.image.channels = 3;
    sample.image.pixels.resize(kSynthImageSize * kSynthImageSize * 3);
    const double tint[3] = {1.0, 0.96, 0.9};
    for (std::size_t i = 0; i < gray.size(); ++i)
        for (std::size_t ch = 0; ch < 3; ++ch)
            sample.image.pixels[i * 3 + ch] =
                static_cast<std::uint8_t>(std::lround(std::clamp(gray[i] * tint[ch], 0.0, 1.0) *
                                                      255.0));

    // Person mask: the union of face boxes.
    sample.mask.width = sample.mask.height = kSynthImageSize;
    sample.mask.channels = 1;
    sample.mask.pixels.assign(kSynthImageSize * kSynthImageSize, 0);
    for (const auto& box : sample.record.face_boxes)
        for (std::size_t y = box.y; y < box.y + box.height; ++y)
            for (std::size_t x = box.x; x < box.x + box.width; ++x)
                sample.mask.pixels[y * kSynthImageSize + x] = 255;

    auto pad5 = [](std::size_t v) {
        std::string s = std::to_string(v);
        return std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
    };
    sample.record.image_path = "images/img_" + pad5(index) + ".ppm";
    sample.record.mask_path = "masks/msk_" + pad5(index) + ".pgm";
    sample.record.image_width = sample.record.image_height = kSynthImageSize;
    sample.record.gcs_label = cohesion_from_emotions(emotions);
    sample.record.emotion_label = emotion_valence(modal_emotion(emotions));

    const auto train_count = static_cast<std::size_t>(
        std::floor(spec.train_fraction * static_cast<double>(spec.samples)));
    const auto val_count = static_cast<std::size_t>(
        std::floor(spec.val_fraction * static_cast<double>(spec.samples)));
    sample.record.split = index < train_count            ? Split::Train
                          : index < train_count + val_count ? Split::Val
                                                            : Split::Test;
    return sample;
}

DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (ec) throw IoError("cannot create output directories under '" + out_dir + "'");

    DatasetManifest manifest;
    for (std::size_t i = 0; i < spec.samples; ++i) {
        auto sample = synth_sample(spec, i);
        write_raster((fs::path(out_dir) / sample.record.image_path).string(), sample.image);
        write_raster((fs::path(out_dir) / sample.record.mask_path).string(), sample.mask);
        manifest.records.push_back(std::move(sample.record));
    }
    save_manifest((fs::path(out_dir) / "manifest.jsonl").string(), manifest);
    return manifest;
}

std::vector<double> bilinear_resize(const std::vector<double>& values, std::size_t height,
                                    std::size_t width, std::size_t out_height,
                                    std::size_t out_width) {
    if (values.size() != height * width)
        throw DimensionError("bilinear_resize: " + std::to_string(values.size()) +
                             " values for a " + std::to_string(height) + "x" +
                             std::to_string(width) + " grid");
    if (height == 0 || width == 0 || out_height == 0 || out_width == 0)
        throw ConfigError("bilinear_resize: extents must be positive");
    std::vector<double> out(out_height * out_width);
    const double sy = static_cast<double>(height) / static_cast<double>(out_height);
    const double sx = static_cast<double>(width) / static_cast<double>(out_width);
    for (std::size_t oy = 0; oy < out_height; ++oy) {
        const double src_y = std::clamp((oy + 0.5) * sy - 0.5, 0.0,
                                        static_cast<double>(height - 1));
        const auto y0 = static_cast<std::size_t>(src_y);
        const std::size_t y1 = std::min(y0 + 1, height - 1);
        const double fy = src_y - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_width; ++ox) {
            const double src_x = std::clamp((ox + 0.5) * sx - 0.5, 0.0,
                                            static_cast<double>(width - 1));
            const auto x0 = static_cast<std::size_t>(src_x);
            const std::size_t x1 = std::min(x0 + 1, width - 1);
            const double fx = src_x - static_cast<double>(x0);
            const double top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
            const double bot = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
            out[oy * out_width + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    return out;
}

Tensor<double> preprocess_face(const Raster& image, const FaceBox& box, std::size_t target) {
    if (target == 0) throw ConfigError("preprocess_face: target extent must be positive");
    if (box.width == 0 || box.height == 0)
        throw DimensionError("preprocess_face: face box has zero area");
    if (box.x + box.width > image.width || box.y + box.height > image.height)
        throw DimensionError("preprocess_face: box exceeds the " + std::to_string(image.width) +
                             "x" + std::to_string(image.height) + " image");

    std::vector<double> crop(box.height * box.width);
    for (std::size_t y = 0; y < box.height; ++y)
        for (std::size_t x = 0; x < box.width; ++x) {
            const std::size_t sx = box.x + x, sy = box.y + y;
            double lum;
            if (image.channels == 3) {
                lum = (0.299 * image.at(sx, sy, 0) + 0.587 * image.at(sx, sy, 1) +
                       0.114 * image.at(sx, sy, 2)) /
                      255.0;
            } else {
                lum = image.at(sx, sy, 0) / 255.0;
            }
            crop[y * box.width + x] = lum;
        }
    auto resized = bilinear_resize(crop, box.height, box.width, target, target);
    return Tensor<double>::from_values({1, target, target}, std::move(resized), false);
}

MaskCropResult<double> ablation_crop(const Raster& image, const Raster& mask) {
    return apply_mask_crop(raster_to_tensor(image), mask_to_tensor(mask));
}

}  // namespace cohesion
