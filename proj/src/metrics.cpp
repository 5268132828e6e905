#include "posediff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "posediff/errors.hpp"

namespace posediff::metrics {

namespace {

void check_pair(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.rank() != 3) throw ShapeMismatch(std::string(what) + ": expected (C, H, W), got " + shape_str(a.shape()));
}

constexpr std::size_t kWindow = 11;

std::array<double, kWindow * kWindow> gaussian_window() {
  std::array<double, kWindow * kWindow> w{};
  const double sigma = 1.5;
  double total = 0.0;
  for (std::size_t y = 0; y < kWindow; ++y) {
    for (std::size_t x = 0; x < kWindow; ++x) {
      const double dy = static_cast<double>(y) - 5.0, dx = static_cast<double>(x) - 5.0;
      w[y * kWindow + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[y * kWindow + x];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("psnr: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.numel());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(kPeak * kPeak / mse));
}

double ssim(const Image& a, const Image& b) {
  check_pair(a, b, "ssim");
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (h < kWindow || w < kWindow) {
    throw TooSmall("ssim needs at least 11x11 pixels, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  static const auto win = gaussian_window();
  const double c1 = (0.01 * kPeak) * (0.01 * kPeak), c2 = (0.03 * kPeak) * (0.03 * kPeak);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const double* pa = a.raw() + k * h * w;
    const double* pb = b.raw() + k * h * w;
    for (std::size_t y0 = 0; y0 + kWindow <= h; ++y0) {
      for (std::size_t x0 = 0; x0 + kWindow <= w; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t y = 0; y < kWindow; ++y) {
          for (std::size_t x = 0; x < kWindow; ++x) {
            const double g = win[y * kWindow + x];
            const double va = pa[(y0 + y) * w + x0 + x], vb = pb[(y0 + y) * w + x0 + x];
            ma += g * va;
            mb += g * vb;
            saa += g * va * va;
            sbb += g * vb * vb;
            sab += g * va * vb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

Image warp_image(const Image& x, const Tensor<double>& flow) {
  if (x.rank() != 3 || flow.rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != x.dim(1) || flow.dim(2) != x.dim(2)) {
    throw ShapeMismatch("warp_image: image " + shape_str(x.shape()) + " vs flow " + shape_str(flow.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Image out(x.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      // continuous grid coordinates: pixel centres at integers
      const double gx = std::clamp(static_cast<double>(xx) + flow[(0 * h + y) * w + xx], 0.0, static_cast<double>(w - 1));
      const double gy = std::clamp(static_cast<double>(y) + flow[(1 * h + y) * w + xx], 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(gx)), y0 = static_cast<std::size_t>(std::floor(gy));
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
      for (std::size_t k = 0; k < c; ++k) {
        const double* p = x.raw() + k * h * w;
        const double top = (1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
        const double bottom = (1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
        out[(k * h + y) * w + xx] = (1 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

double flow_warp_error(const std::vector<Image>& frames, const std::vector<Tensor<double>>& flows,
                       const std::vector<Tensor<double>>& masks) {
  if (frames.size() < 2) throw LengthMismatch("flow warping error needs at least 2 frames");
  if (flows.size() != frames.size() - 1 || masks.size() != frames.size() - 1) {
    throw LengthMismatch(std::to_string(frames.size()) + " frames need " + std::to_string(frames.size() - 1) +
                         " flows and masks, got " + std::to_string(flows.size()) + " and " +
                         std::to_string(masks.size()));
  }
  double total = 0.0, masked = 0.0;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const Image& cur = frames[k + 1];
    const Image warped = warp_image(frames[k], flows[k]);
    check_pair(cur, warped, "flow_warp_error");
    const std::size_t c = cur.dim(0), h = cur.dim(1), w = cur.dim(2);
    if (masks[k].numel() != h * w) throw ShapeMismatch("flow_warp_error: mask " + shape_str(masks[k].shape()));
    for (std::size_t i = 0; i < h * w; ++i) {
      const double m = masks[k][i];
      if (m == 0.0) continue;
      double l1 = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) l1 += std::abs(cur[ch * h * w + i] - warped[ch * h * w + i]);
      total += m * 0.5 * l1 / static_cast<double>(c);  // [-1, 1] differences -> [0, 1] units
      masked += m;
    }
  }
  return masked > 0.0 ? total / masked : 0.0;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : r.frames) frames.push_back({{"frame", f.frame}, {"psnr", f.psnr}, {"ssim", f.ssim}});
  j = nlohmann::json{{"frames", frames},
                     {"mean_psnr", r.mean_psnr},
                     {"mean_ssim", r.mean_ssim},
                     {"flow_warp_error", r.flow_warp_error},
                     {"config", r.config}};
}

EvalReport evaluate_sequence(const std::vector<Image>& generated, const std::vector<Image>& truth,
                             const std::vector<Tensor<double>>& flows, const std::vector<Tensor<double>>& masks,
                             std::size_t short_term) {
  if (generated.size() != truth.size()) {
    throw LengthMismatch(std::to_string(generated.size()) + " generated frames vs " + std::to_string(truth.size()) +
                         " ground-truth frames");
  }
  EvalReport r;
  const std::size_t last = std::min(generated.size(), short_term + 1);
  const bool windowed = !generated.empty() && generated[0].rank() == 3 && generated[0].dim(1) >= 11 &&
                        generated[0].dim(2) >= 11;
  for (std::size_t i = 1; i < last; ++i) {
    FrameScore s;
    s.frame = i + 1;
    s.psnr = psnr(generated[i], truth[i]);
    s.ssim = windowed ? ssim(generated[i], truth[i]) : 0.0;
    r.mean_psnr += s.psnr;
    r.mean_ssim += s.ssim;
    r.frames.push_back(s);
  }
  if (!r.frames.empty()) {
    r.mean_psnr /= static_cast<double>(r.frames.size());
    r.mean_ssim /= static_cast<double>(r.frames.size());
  }
  if (generated.size() >= 2) r.flow_warp_error = flow_warp_error(generated, flows, masks);
  return r;
}

std::string format_report(const EvalReport& r) {
  std::string out = "frame      psnr      ssim\n";
  char buf[96];
  for (const auto& f : r.frames) {
    std::snprintf(buf, sizeof buf, "%5zu %9.3f %9.4f\n", f.frame, f.psnr, f.ssim);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, " mean %9.3f %9.4f\n", r.mean_psnr, r.mean_ssim);
  out += buf;
  std::snprintf(buf, sizeof buf, "E_warp %.6f\n", r.flow_warp_error);
  out += buf;
  return out;
}

}  // namespace posediff::metrics
