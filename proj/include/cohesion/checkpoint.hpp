#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cohesion/errors.hpp"
#include "cohesion/layers.hpp"
#include "cohesion/training.hpp"

namespace cohesion {

/// Versioned binary model container. All integers and floating-point words
/// are little-endian; floating-point payloads are raw IEEE-754 bit patterns,
/// so a save/load round trip is bit-exact.
///
/// Layout:
///   magic "COHCKPT\0" | u32 version | string architecture | u64 seed
///   | u32 dtype (4 = float32, 8 = float64) | u32 blob count
///   | per blob: string name, u32 rank, u64 dims..., payload words
///   | u32 metric count | per metric: string name, f64 value
///   | u8 has optimizer state | optional state (u64 step count, three slot
///     groups, each u32 count then per slot u64 length + payload words)
/// Strings are a u32 byte length followed by raw bytes.
inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'H', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::string& out, std::uint64_t value, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) { put_bytes(out, v, 4); }
inline void put_u64(std::string& out, std::uint64_t v) { put_bytes(out, v, 8); }

inline void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

inline void put_word(std::string& out, float v) { put_bytes(out, std::bit_cast<std::uint32_t>(v), 4); }
inline void put_word(std::string& out, double v) { put_bytes(out, std::bit_cast<std::uint64_t>(v), 8); }

class ByteReader {
  public:
    ByteReader(const std::string& data, std::string origin)
        : data_(data), origin_(std::move(origin)) {}

    std::uint64_t take_bytes(int bytes) {
        if (pos_ + static_cast<std::size_t>(bytes) > data_.size())
            throw IoError(origin_ + ": unexpected end of file at byte " + std::to_string(pos_));
        std::uint64_t value = 0;
        for (int i = 0; i < bytes; ++i)
            value |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
        return value;
    }

    std::uint32_t take_u32() { return static_cast<std::uint32_t>(take_bytes(4)); }
    std::uint64_t take_u64() { return take_bytes(8); }

    std::string take_string() {
        const auto len = take_u32();
        if (pos_ + len > data_.size())
            throw IoError(origin_ + ": unexpected end of file in string at byte " +
                          std::to_string(pos_));
        std::string s = data_.substr(pos_, len);
        pos_ += len;
        return s;
    }

    template <typename T>
    T take_word() {
        if constexpr (sizeof(T) == 4)
            return std::bit_cast<T>(static_cast<std::uint32_t>(take_bytes(4)));
        else
            return std::bit_cast<T>(take_bytes(8));
    }

    bool exhausted() const { return pos_ == data_.size(); }
    const std::string& origin() const { return origin_; }

  private:
    const std::string& data_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
struct CheckpointBlob {
    std::string name;
    Shape shape;
    std::vector<T> values;
};

template <typename T>
struct Checkpoint {
    std::string architecture;
    std::uint64_t seed = 0;
    std::vector<CheckpointBlob<T>> blobs;
    std::map<std::string, double> metrics;
    std::optional<OptimizerState<T>> optimizer;

    static Checkpoint capture(std::string architecture, std::uint64_t seed,
                              const NamedParams<T>& params) {
        Checkpoint ckpt;
        ckpt.architecture = std::move(architecture);
        ckpt.seed = seed;
        for (const auto& [name, tensor] : params)
            ckpt.blobs.push_back({name, tensor.shape(), tensor.values()});
        return ckpt;
    }

    /// Copies stored values into a matching parameter list. Names must
    /// correspond one to one and shapes must agree.
    void apply_to(NamedParams<T>& params) const {
        if (params.size() != blobs.size())
            throw DimensionError("checkpoint: holds " + std::to_string(blobs.size()) +
                                 " blobs but the model has " + std::to_string(params.size()) +
                                 " parameters");
        for (auto& [name, tensor] : params) {
            const CheckpointBlob<T>* found = nullptr;
            for (const auto& blob : blobs)
                if (blob.name == name) {
                    found = &blob;
                    break;
                }
            if (!found) throw IoError("checkpoint: no blob named '" + name + "'");
            if (found->shape != tensor.shape())
                throw DimensionError("checkpoint: blob '" + name + "' has shape " +
                                     shape_str(found->shape) + " but the parameter expects " +
                                     shape_str(tensor.shape()));
            tensor.values_mut() = found->values;
        }
    }
};

namespace detail {

template <typename T>
void put_slot_group(std::string& out, const std::vector<std::vector<T>>& group) {
    put_u32(out, static_cast<std::uint32_t>(group.size()));
    for (const auto& slot : group) {
        put_u64(out, slot.size());
        for (const T v : slot) put_word(out, v);
    }
}

template <typename T>
std::vector<std::vector<T>> take_slot_group(ByteReader& in) {
    std::vector<std::vector<T>> group(in.take_u32());
    for (auto& slot : group) {
        slot.resize(in.take_u64());
        for (auto& v : slot) v = in.template take_word<T>();
    }
    return group;
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const Checkpoint<T>& ckpt) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "checkpoint stores float32 or float64");
    std::string out;
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_string(out, ckpt.architecture);
    detail::put_u64(out, ckpt.seed);
    detail::put_u32(out, static_cast<std::uint32_t>(sizeof(T)));
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
    for (const auto& blob : ckpt.blobs) {
        detail::put_string(out, blob.name);
        detail::put_u32(out, static_cast<std::uint32_t>(blob.shape.size()));
        std::size_t expected = 1;
        for (const std::size_t d : blob.shape) {
            detail::put_u64(out, d);
            expected *= d;
        }
        if (expected != blob.values.size())
            throw ContractError("checkpoint: blob '" + blob.name + "' has " +
                                std::to_string(blob.values.size()) + " values for shape " +
                                shape_str(blob.shape));
        for (const T v : blob.values) detail::put_word(out, v);
    }
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.metrics.size()));
    for (const auto& [name, value] : ckpt.metrics) {
        detail::put_string(out, name);
        detail::put_word(out, value);
    }
    out.push_back(ckpt.optimizer ? char(1) : char(0));
    if (ckpt.optimizer) {
        detail::put_u64(out, ckpt.optimizer->step_count);
        detail::put_slot_group(out, ckpt.optimizer->velocity);
        detail::put_slot_group(out, ckpt.optimizer->first_moment);
        detail::put_slot_group(out, ckpt.optimizer->second_moment);
    }
    return out;
}

template <typename T>
Checkpoint<T> decode_checkpoint(const std::string& data, const std::string& origin) {
    detail::ByteReader in(data, origin);
    for (const char expected : kCheckpointMagic)
        if (static_cast<char>(in.take_bytes(1)) != expected)
            throw IoError(origin + ": not a model checkpoint (bad magic)");
    const auto version = in.take_u32();
    if (version != kCheckpointVersion)
        throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint<T> ckpt;
    ckpt.architecture = in.take_string();
    ckpt.seed = in.take_u64();
    const auto dtype = in.take_u32();
    if (dtype != sizeof(T))
        throw IoError(origin + ": checkpoint stores " + std::to_string(dtype * 8) +
                      "-bit floats but " + std::to_string(sizeof(T) * 8) + "-bit were requested");
    ckpt.blobs.resize(in.take_u32());
    for (auto& blob : ckpt.blobs) {
        blob.name = in.take_string();
        blob.shape.resize(in.take_u32());
        std::size_t count = 1;
        for (auto& d : blob.shape) {
            d = in.take_u64();
            count *= d;
        }
        blob.values.resize(count);
        for (auto& v : blob.values) v = in.template take_word<T>();
    }
    const auto metric_count = in.take_u32();
    for (std::uint32_t i = 0; i < metric_count; ++i) {
        auto name = in.take_string();
        ckpt.metrics[name] = in.template take_word<double>();
    }
    if (in.take_bytes(1) != 0) {
        OptimizerState<T> state;
        state.step_count = in.take_u64();
        state.velocity = detail::take_slot_group<T>(in);
        state.first_moment = detail::take_slot_group<T>(in);
        state.second_moment = detail::take_slot_group<T>(in);
        ckpt.optimizer = std::move(state);
    }
    if (!in.exhausted()) throw IoError(origin + ": trailing bytes after checkpoint payload");
    return ckpt;
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open '" + path + "' for writing");
    const std::string encoded = encode_checkpoint(ckpt);
    file.write(encoded.data(), static_cast<std::streamsize>(encoded.size()));
    if (!file) throw IoError("failed to write checkpoint to '" + path + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open '" + path + "' for reading");
    std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(data, path);
}

}  // namespace cohesion
