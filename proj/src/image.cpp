#include "posediff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "posediff/errors.hpp"

namespace posediff {

namespace {

std::uint8_t to_byte(double v) {
  const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5;
  return static_cast<std::uint8_t>(std::lround(u * 255.0));
}

}  // namespace

double quantize_unit(double v) { return static_cast<double>(to_byte(v)) / 255.0 * 2.0 - 1.0; }

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1)) {
    throw ShapeMismatch("write_png expects (3|1, H, W), got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> buf(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) buf[(y * w + x) * c + k] = to_byte(image[(k * h + y) * w + x]);
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoFailure("cannot write " + path.string() + ": " + img.message);
  }
}

Image read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoFailure("no such file " + path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw FormatError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError(path.string() + ": " + img.message);
  }
  const std::size_t h = img.height, w = img.width;
  Image out(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < 3; ++k) {
        out[(k * h + y) * w + x] = static_cast<double>(buf[(y * w + x) * 3 + k]) / 255.0 * 2.0 - 1.0;
      }
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const std::vector<double>& values, std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw ShapeMismatch("write_pgm: " + std::to_string(values.size()) + " values for " +
                                                  std::to_string(h) + "x" + std::to_string(w));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot write " + path.string());
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (const double v : values) {
    os.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  if (!os) throw IoFailure("write failed for " + path.string());
}

}  // namespace posediff
