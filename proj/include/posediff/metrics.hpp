#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "posediff/image.hpp"

namespace posediff::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPeak = 2.0;  // value range of [-1, 1] images

/// 10 log10(peak^2 / MSE), 99 for identical inputs.
double psnr(const Image& a, const Image& b);

/// Mean local SSIM over 11x11 Gaussian windows (sigma 1.5) placed at every
/// fully interior position, averaged over channels. L = 2.
double ssim(const Image& a, const Image& b);

/// Bilinear backward warp: out(p) = x(p + flow(p)), sample positions clamped to
/// the pixel-centre rectangle. flow is (2, H, W) in pixels.
Image warp_image(const Image& x, const Tensor<double>& flow);

/// Mean over consecutive pairs of masked L1 between frame i and frame i-1
/// warped into it, with pixel values in [0, 1] and L1 averaged over channels;
/// normalized by the total masked pixel count. flows[k] and masks[k] map frame
/// k+1 into frame k. Returns 0 when no pixel is masked.
double flow_warp_error(const std::vector<Image>& frames, const std::vector<Tensor<double>>& flows,
                       const std::vector<Tensor<double>>& masks);

struct FrameScore {
  std::size_t frame = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<FrameScore> frames;  // short-term frames compared against ground truth
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double flow_warp_error = 0.0;
  nlohmann::json config = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Scores frames 2..min(n, 1 + short_term) against ground truth (frame 1 is the
/// given input) and E_warp over the whole generated sequence.
EvalReport evaluate_sequence(const std::vector<Image>& generated, const std::vector<Image>& truth,
                             const std::vector<Tensor<double>>& flows, const std::vector<Tensor<double>>& masks,
                             std::size_t short_term = 5);

/// Fixed-format text table of a report.
std::string format_report(const EvalReport& r);

}  // namespace posediff::metrics
