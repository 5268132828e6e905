#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <vector>

#include "posediff/errors.hpp"

namespace posediff::geometry {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

inline constexpr double kDepthEpsilon = 1e-6;
inline constexpr double kLineEpsilon = 1e-9;
inline constexpr double kNearDepth = 0.1;
inline constexpr double kFarDepth = 100.0;
inline constexpr double kWeightSteepness = 50.0;
inline constexpr double kWeightBand = 0.05;
inline constexpr std::size_t kMaxWeightMatrixPixels = 4096;

Mat3 make_intrinsics(double fx, double fy, double cx, double cy);

/// Intrinsics for the same camera sampled on a grid `sx` times wider and `sy` times taller.
Mat3 scale_intrinsics(const Mat3& K, double sx, double sy);

/// World-to-camera pose: x_cam = R * x_world + t. Camera looks down +z, K maps
/// camera coordinates to pixels. Pixel (x, y) of an image grid has its centre at
/// (x + 0.5, y + 0.5).
class CameraPose {
 public:
  /// Throws InvalidPose unless R is a proper rotation (|R^T R - I|_inf < 1e-9,
  /// det R > 0) and K is upper-triangular with K(2,2) = 1 and positive focals.
  CameraPose(const Mat3& K, const Mat3& R, const Vec3& t);

  const Mat3& K() const { return K_; }
  const Mat3& R() const { return R_; }
  const Vec3& t() const { return t_; }

  Vec3 to_camera(const Vec3& world) const { return R_ * world + t_; }
  /// Camera centre in world coordinates.
  Vec3 center() const { return -R_.transpose() * t_; }

  /// Builds a pose from a camera centre and a camera-to-world rotation.
  static CameraPose from_center(const Mat3& K, const Mat3& cam_to_world, const Vec3& center);

 private:
  Mat3 K_;
  Mat3 R_;
  Vec3 t_;
};

/// Maps coordinates of camera a into camera b: x_b = R * x_a + t.
class RelativePose {
 public:
  RelativePose(const Mat3& R, const Vec3& t);
  static RelativePose identity() { return {Mat3::Identity(), Vec3::Zero()}; }

  const Mat3& R() const { return R_; }
  const Vec3& t() const { return t_; }

  Vec3 apply(const Vec3& x) const { return R_ * x + t_; }
  RelativePose inverse() const;
  /// First this, then `next`.
  RelativePose then(const RelativePose& next) const;

 private:
  Mat3 R_;
  Vec3 t_;
};

/// The relative pose taking `src` camera coordinates to `dst` camera coordinates.
RelativePose relative_pose(const CameraPose& src, const CameraPose& dst);

void validate_rotation(const Mat3& R);
void validate_intrinsics(const Mat3& K);

/// Perspective projection; throws DegenerateDepth when z <= kDepthEpsilon.
Vec2 project(const Vec3& point_cam, const Mat3& K);

/// Two points spanning the epipolar line of a target pixel inside the source view.
struct EpipolarLine {
  Vec2 p_proj;   // projection of the back-projected pixel at unit depth
  Vec2 epipole;  // projection of the target camera centre
  bool fallback = false;  // endpoints come from the two-depth ray sampling

  /// Both endpoints coincide (pure rotation): the "line" is a single pixel.
  bool is_point() const { return (p_proj - epipole).norm() <= kLineEpsilon; }
};

/// Computes the epipolar line of target pixel `p_i`. When the epipole or the
/// unit-depth projection is degenerate, the ray is instead projected at depths
/// 0.1 and 100, each moved inside the part of the ray in front of the source
/// camera if needed. Throws DegenerateLine when no such part exists.
EpipolarLine epipolar_endpoints(const Vec2& p_i, const RelativePose& rel, const Mat3& K);

/// Perpendicular distance of `p` to the infinite line through `o` and `p_proj`.
/// Throws DegenerateLine when the endpoints are closer than kLineEpsilon.
double point_to_line_distance(const Vec2& p, const Vec2& o, const Vec2& p_proj);

/// Maps pixel coordinates of an h x w grid to [-1, 1] along the longer side.
Vec2 normalize_pixel(const Vec2& px, std::size_t h, std::size_t w);

inline Vec2 pixel_center(std::size_t x, std::size_t y) {
  return {static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
}

/// m(d) = 1 - sigmoid(50 (d - 0.05)), evaluated without cancellation.
double epipolar_weight(double distance);

/// h x w weights (row-major) of source pixels for target pixel `p_i`. K is the
/// intrinsics at the h x w grid resolution; distances are in normalized units.
/// A degenerate line, or one missing the source image, yields all ones.
std::vector<double> epipolar_weight_map(const Vec2& p_i, const RelativePose& rel, const Mat3& K, std::size_t h,
                                        std::size_t w);

/// Weight of one (target, source) pixel pair; the same rule as epipolar_weight_map.
double epipolar_weight_at(const Vec2& p_i, const Vec2& p_j, const RelativePose& rel, const Mat3& K, std::size_t h,
                          std::size_t w);

/// hw x hw weights. Row = target pixel (row-major), column = source pixel.
class EpipolarWeightMatrix {
 public:
  EpipolarWeightMatrix(std::size_t h, std::size_t w, std::vector<double> values);
  /// All ones: turns epipolar attention into plain cross-view attention.
  static EpipolarWeightMatrix ones(std::size_t h, std::size_t w);

  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t pixels() const { return h_ * w_; }
  double at(std::size_t row, std::size_t col) const { return values_[row * pixels() + col]; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * pixels(), pixels()}; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::size_t h_, w_;
  std::vector<double> values_;
};

/// Stacks the weight maps of every target pixel. Throws ResolutionTooLarge when
/// h * w exceeds `max_pixels`.
EpipolarWeightMatrix epipolar_weight_matrix(const RelativePose& rel, const Mat3& K, std::size_t h, std::size_t w,
                                            std::size_t max_pixels = kMaxWeightMatrixPixels);

}  // namespace posediff::geometry
