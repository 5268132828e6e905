#pragma once

#include <filesystem>

#include "posediff/tensor.hpp"

namespace posediff {

/// (C, H, W) with values in [-1, 1].
using Image = Tensor<double>;

/// 8-bit RGB (C = 3) or grayscale (C = 1) PNG; values are clamped, then mapped
/// linearly to 0..255 and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
/// Decodes to RGB (C = 3) in [-1, 1]. Throws IoFailure or FormatError.
Image read_png(const std::filesystem::path& path);

/// Binary P5 PGM of values in [0, 1], stored as round(255 v).
void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t h, std::size_t w);

/// [-1, 1] -> 8-bit code -> [-1, 1]: the round trip through write_png/read_png.
double quantize_unit(double v);

}  // namespace posediff
