#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "posediff/rng.hpp"
#include "posediff/tensor.hpp"

namespace testing {

template <typename S = double>
posediff::Tensor<S> random_tensor(const posediff::Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  posediff::Rng rng(seed);
  posediff::Tensor<S> t(shape);
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S>
double max_abs_diff(const posediff::Tensor<S>& a, const posediff::Tensor<S>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("posediff_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
