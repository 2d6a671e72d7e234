#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cohesion/errors.hpp"
#include "cohesion/tensor.hpp"

namespace cohesion {

/// Interleaved row-major 8-bit raster, 1 (grayscale) or 3 (RGB) channels.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;  // width * height * channels bytes

    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
        return pixels[(y * width + x) * channels + c];
    }
    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) {
        return pixels[(y * width + x) * channels + c];
    }
};

/// Binary netpbm I/O: P5 for grayscale, P6 for RGB, maxval 255. The writer
/// emits a canonical header, so write/read/write round-trips are
/// byte-identical.
Raster decode_netpbm(const std::string& data, const std::string& origin);
std::string encode_netpbm(const Raster& raster);
Raster read_raster(const std::string& path);
void write_raster(const std::string& path, const Raster& raster);

/// Planar [channels, height, width] tensor with values in [0,1].
Tensor<double> raster_to_tensor(const Raster& raster);

/// Clamps values to [0,1] and quantizes to bytes (round to nearest).
Raster tensor_to_raster(const Tensor<double>& image);

/// Person-mask convention: any nonzero byte marks a person pixel. Returns a
/// binary [height, width] tensor of 0s and 1s.
Tensor<double> mask_to_tensor(const Raster& mask);

}  // namespace cohesion
