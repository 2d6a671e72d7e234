#include "cohesion/image_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

namespace cohesion {

namespace {

std::size_t parse_header_int(const std::string& data, std::size_t& pos,
                             const std::string& origin) {
    // Skip whitespace and '#' comment lines between header tokens.
    while (pos < data.size()) {
        if (std::isspace(static_cast<unsigned char>(data[pos]))) {
            ++pos;
        } else if (data[pos] == '#') {
            while (pos < data.size() && data[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    if (pos >= data.size() || !std::isdigit(static_cast<unsigned char>(data[pos])))
        throw IoError(origin + ": malformed raster header");
    std::size_t value = 0;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
        value = value * 10 + static_cast<std::size_t>(data[pos] - '0');
        ++pos;
    }
    return value;
}

}  // namespace

Raster decode_netpbm(const std::string& data, const std::string& origin) {
    if (data.size() < 2 || data[0] != 'P' || (data[1] != '5' && data[1] != '6'))
        throw IoError(origin + ": not a binary netpbm raster (expected P5 or P6)");
    Raster raster;
    raster.channels = data[1] == '6' ? 3 : 1;
    std::size_t pos = 2;
    raster.width = parse_header_int(data, pos, origin);
    raster.height = parse_header_int(data, pos, origin);
    const std::size_t maxval = parse_header_int(data, pos, origin);
    if (maxval != 255)
        throw IoError(origin + ": unsupported max value " + std::to_string(maxval) +
                      " (only 255)");
    if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos])))
        throw IoError(origin + ": malformed raster header");
    ++pos;  // single whitespace byte separates header from payload
    const std::size_t expected = raster.width * raster.height * raster.channels;
    if (raster.width == 0 || raster.height == 0)
        throw IoError(origin + ": zero raster extents");
    if (data.size() - pos != expected)
        throw IoError(origin + ": payload holds " + std::to_string(data.size() - pos) +
                      " bytes, expected " + std::to_string(expected));
    raster.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end());
    return raster;
}

std::string encode_netpbm(const Raster& raster) {
    if (raster.channels != 1 && raster.channels != 3)
        throw ConfigError("raster must have 1 or 3 channels, got " +
                          std::to_string(raster.channels));
    if (raster.pixels.size() != raster.width * raster.height * raster.channels)
        throw DimensionError("raster pixel buffer holds " + std::to_string(raster.pixels.size()) +
                             " bytes for " + std::to_string(raster.width) + "x" +
                             std::to_string(raster.height) + "x" +
                             std::to_string(raster.channels));
    std::string out = raster.channels == 3 ? "P6\n" : "P5\n";
    out += std::to_string(raster.width) + " " + std::to_string(raster.height) + "\n255\n";
    out.append(raster.pixels.begin(), raster.pixels.end());
    return out;
}

Raster read_raster(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open '" + path + "' for reading");
    std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return decode_netpbm(data, path);
}

void write_raster(const std::string& path, const Raster& raster) {
    const std::string encoded = encode_netpbm(raster);
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open '" + path + "' for writing");
    file.write(encoded.data(), static_cast<std::streamsize>(encoded.size()));
    if (!file) throw IoError("failed to write raster to '" + path + "'");
}

Tensor<double> raster_to_tensor(const Raster& raster) {
    std::vector<double> values(raster.pixels.size());
    const std::size_t plane = raster.width * raster.height;
    for (std::size_t y = 0; y < raster.height; ++y)
        for (std::size_t x = 0; x < raster.width; ++x)
            for (std::size_t c = 0; c < raster.channels; ++c)
                values[c * plane + y * raster.width + x] = raster.at(x, y, c) / 255.0;
    return Tensor<double>::from_values({raster.channels, raster.height, raster.width},
                                       std::move(values), false);
}

Raster tensor_to_raster(const Tensor<double>& image) {
    const auto& shape = image.shape();
    Raster raster;
    if (shape.size() == 2) {
        raster.channels = 1;
        raster.height = shape[0];
        raster.width = shape[1];
    } else if (shape.size() == 3 && (shape[0] == 1 || shape[0] == 3)) {
        raster.channels = shape[0];
        raster.height = shape[1];
        raster.width = shape[2];
    } else {
        throw DimensionError("tensor_to_raster: expected [h,w] or [1|3,h,w], got " +
                             shape_str(shape));
    }
    raster.pixels.resize(raster.width * raster.height * raster.channels);
    const std::size_t plane = raster.width * raster.height;
    for (std::size_t c = 0; c < raster.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = std::clamp(image.values()[c * plane + i], 0.0, 1.0);
            raster.pixels[i * raster.channels + c] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    return raster;
}

Tensor<double> mask_to_tensor(const Raster& mask) {
    if (mask.channels != 1)
        throw DimensionError("person masks are single-channel, got " +
                             std::to_string(mask.channels) + " channels");
    std::vector<double> values(mask.pixels.size());
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
        values[i] = mask.pixels[i] != 0 ? 1.0 : 0.0;
    return Tensor<double>::from_values({mask.height, mask.width}, std::move(values), false);
}

}  // namespace cohesion
