#include "posediff/geometry.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace posediff::geometry {

Mat3 make_intrinsics(double fx, double fy, double cx, double cy) {
  Mat3 K;
  K << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return K;
}

Mat3 scale_intrinsics(const Mat3& K, double sx, double sy) {
  Mat3 S = Mat3::Identity();
  S(0, 0) = sx;
  S(1, 1) = sy;
  return S * K;
}

void validate_rotation(const Mat3& R) {
  if (!R.allFinite()) throw InvalidPose("rotation has non-finite entries");
  const double err = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (err >= 1e-9) throw InvalidPose("rotation is not orthonormal (|R^T R - I| = " + std::to_string(err) + ")");
  if (R.determinant() <= 0.0) throw InvalidPose("rotation has non-positive determinant");
}

void validate_intrinsics(const Mat3& K) {
  if (!K.allFinite()) throw InvalidPose("intrinsics have non-finite entries");
  if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0) throw InvalidPose("intrinsics are not upper-triangular");
  if (K(2, 2) != 1.0) throw InvalidPose("intrinsics K(2,2) must be 1");
  if (K(0, 0) <= 0.0 || K(1, 1) <= 0.0) throw InvalidPose("focal lengths must be positive");
}

CameraPose::CameraPose(const Mat3& K, const Mat3& R, const Vec3& t) : K_(K), R_(R), t_(t) {
  validate_intrinsics(K_);
  validate_rotation(R_);
  if (!t_.allFinite()) throw InvalidPose("translation has non-finite entries");
}

CameraPose CameraPose::from_center(const Mat3& K, const Mat3& cam_to_world, const Vec3& center) {
  const Mat3 R = cam_to_world.transpose();
  return CameraPose(K, R, -R * center);
}

RelativePose::RelativePose(const Mat3& R, const Vec3& t) : R_(R), t_(t) {
  validate_rotation(R_);
  if (!t_.allFinite()) throw InvalidPose("translation has non-finite entries");
}

RelativePose RelativePose::inverse() const {
  const Mat3 Rt = R_.transpose();
  return {Rt, -Rt * t_};
}

RelativePose RelativePose::then(const RelativePose& next) const {
  return {next.R_ * R_, next.R_ * t_ + next.t_};
}

RelativePose relative_pose(const CameraPose& src, const CameraPose& dst) {
  const Mat3 R = dst.R() * src.R().transpose();
  return {R, dst.t() - R * src.t()};
}

Vec2 project(const Vec3& point_cam, const Mat3& K) {
  if (!(point_cam.z() > kDepthEpsilon)) {
    throw DegenerateDepth("point depth " + std::to_string(point_cam.z()) + " is not in front of the camera");
  }
  const Vec3 h = K * point_cam;
  return {h.x() / h.z(), h.y() / h.z()};
}

namespace {

double depth_at(const Vec3& dir, const Vec3& t, double d) { return d * dir.z() + t.z(); }

}  // namespace

EpipolarLine epipolar_endpoints(const Vec2& p_i, const RelativePose& rel, const Mat3& K) {
  const Vec3 ray = K.inverse() * Vec3(p_i.x(), p_i.y(), 1.0);
  const Vec3 dir = rel.R() * ray;
  const Vec3& t = rel.t();
  try {
    return {project(dir + t, K), project(t, K), false};
  } catch (const DegenerateDepth&) {
  }

  // Range of depths d for which d * dir + t lies in front of the source camera.
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  if (dir.z() > 0.0) {
    lo = (kDepthEpsilon - t.z()) / dir.z();
  } else if (dir.z() < 0.0) {
    hi = (kDepthEpsilon - t.z()) / dir.z();
  } else if (!(t.z() > kDepthEpsilon)) {
    throw DegenerateLine("ray runs parallel to the source image plane behind the camera");
  }
  const double a = std::max(lo, kNearDepth);
  const double b = std::min(hi, kFarDepth);
  if (!(b > a)) throw DegenerateLine("back-projected ray is never in front of the source camera");
  const bool near_ok = depth_at(dir, t, kNearDepth) > kDepthEpsilon;
  const bool far_ok = depth_at(dir, t, kFarDepth) > kDepthEpsilon;
  const double d_near = near_ok ? kNearDepth : a + 0.1 * (b - a);
  const double d_far = far_ok ? kFarDepth : a + 0.9 * (b - a);
  try {
    return {project(d_far * dir + t, K), project(d_near * dir + t, K), true};
  } catch (const DegenerateDepth&) {
    throw DegenerateLine("two-depth fallback failed");
  }
}

double point_to_line_distance(const Vec2& p, const Vec2& o, const Vec2& p_proj) {
  const Vec2 dir = p_proj - o;
  const double len = dir.norm();
  if (!(len > kLineEpsilon)) throw DegenerateLine("line endpoints coincide");
  const Vec2 rel = p - o;
  return std::abs(rel.x() * dir.y() - rel.y() * dir.x()) / len;
}

Vec2 normalize_pixel(const Vec2& px, std::size_t h, std::size_t w) {
  const double L = static_cast<double>(std::max(h, w));
  return {(2.0 * px.x() - static_cast<double>(w)) / L, (2.0 * px.y() - static_cast<double>(h)) / L};
}

double epipolar_weight(double distance) {
  // 1 - sigmoid(z) == 1 / (1 + exp(z))
  return 1.0 / (1.0 + std::exp(kWeightSteepness * (distance - kWeightBand)));
}

namespace {

// Normalized-space line (or point) that a target pixel's weights are measured against.
struct LineModel {
  bool uniform = true;
  bool point = false;
  Vec2 o, p;
};

bool line_hits_rect(const Vec2& o, const Vec2& p, double hx, double hy) {
  const Vec2 dir = p - o;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const double cx : {-hx, hx}) {
    for (const double cy : {-hy, hy}) {
      const double s = (cx - o.x()) * dir.y() - (cy - o.y()) * dir.x();
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  return lo <= 0.0 && hi >= 0.0;
}

LineModel line_model(const Vec2& p_i, const RelativePose& rel, const Mat3& K, std::size_t h, std::size_t w) {
  LineModel model;
  EpipolarLine line;
  try {
    line = epipolar_endpoints(p_i, rel, K);
  } catch (const DegenerateLine&) {
    return model;
  }
  const double L = static_cast<double>(std::max(h, w));
  const double hx = static_cast<double>(w) / L, hy = static_cast<double>(h) / L;
  model.o = normalize_pixel(line.epipole, h, w);
  model.p = normalize_pixel(line.p_proj, h, w);
  if (line.is_point()) {
    model.point = true;
    model.uniform = !(std::abs(model.o.x()) <= hx && std::abs(model.o.y()) <= hy);
  } else {
    model.uniform = !line_hits_rect(model.o, model.p, hx, hy);
  }
  return model;
}

double model_weight(const LineModel& model, const Vec2& pj_norm) {
  if (model.uniform) return 1.0;
  const double d = model.point ? (pj_norm - model.o).norm() : point_to_line_distance(pj_norm, model.o, model.p);
  return epipolar_weight(d);
}

}  // namespace

double epipolar_weight_at(const Vec2& p_i, const Vec2& p_j, const RelativePose& rel, const Mat3& K, std::size_t h,
                          std::size_t w) {
  return model_weight(line_model(p_i, rel, K, h, w), normalize_pixel(p_j, h, w));
}

std::vector<double> epipolar_weight_map(const Vec2& p_i, const RelativePose& rel, const Mat3& K, std::size_t h,
                                        std::size_t w) {
  if (h == 0 || w == 0) throw ResolutionTooLarge("weight map needs h, w >= 1");
  const LineModel model = line_model(p_i, rel, K, h, w);
  std::vector<double> map(h * w, 1.0);
  if (model.uniform) return map;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) map[y * w + x] = model_weight(model, normalize_pixel(pixel_center(x, y), h, w));
  }
  return map;
}

EpipolarWeightMatrix::EpipolarWeightMatrix(std::size_t h, std::size_t w, std::vector<double> values)
    : h_(h), w_(w), values_(std::move(values)) {
  if (values_.size() != h_ * w_ * h_ * w_) {
    throw ResolutionTooLarge("weight matrix storage does not match " + std::to_string(h_) + "x" + std::to_string(w_));
  }
}

EpipolarWeightMatrix EpipolarWeightMatrix::ones(std::size_t h, std::size_t w) {
  return {h, w, std::vector<double>(h * w * h * w, 1.0)};
}

EpipolarWeightMatrix epipolar_weight_matrix(const RelativePose& rel, const Mat3& K, std::size_t h, std::size_t w,
                                            std::size_t max_pixels) {
  const std::size_t n = h * w;
  if (h == 0 || w == 0 || n > max_pixels) {
    throw ResolutionTooLarge(std::to_string(h) + "x" + std::to_string(w) + " exceeds the limit of " +
                             std::to_string(max_pixels) + " pixels");
  }
  std::vector<double> values(n * n);
#pragma omp parallel for schedule(static) if (n >= 64)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(n); ++r) {
    const auto map = epipolar_weight_map(pixel_center(r % w, r / w), rel, K, h, w);
    std::copy(map.begin(), map.end(), values.begin() + r * n);
  }
  return {h, w, std::move(values)};
}

}  // namespace posediff::geometry
