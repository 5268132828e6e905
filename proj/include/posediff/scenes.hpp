#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "posediff/geometry.hpp"
#include "posediff/image.hpp"

/// Procedural scenes of textured axis-aligned quads, ray cast from posed
/// pinhole cameras. World and camera frames: x right, y down, z forward.
namespace posediff::scenes {

using geometry::CameraPose;
using geometry::Mat3;
using geometry::Vec2;
using geometry::Vec3;

inline constexpr double kMissDepth = 1e9;
inline constexpr double kFloorHeight = 1.5;

/// color(u, v) = base + grad_u u + grad_v v + amplitude sin(freq_u u + freq_v v + phase),
/// per channel in [0, 1] before clamping; (u, v) are the in-plane world coordinates.
struct Texture {
  std::array<double, 3> base{0.5, 0.5, 0.5};
  std::array<double, 3> grad_u{}, grad_v{};
  double amplitude = 0.0;
  double freq_u = 0.0, freq_v = 0.0, phase = 0.0;

  std::array<double, 3> color(double u, double v) const;
  friend bool operator==(const Texture&, const Texture&) = default;
};

/// Rectangle on the plane x[axis] = offset; lo/hi bound the other two axes in
/// increasing axis order.
struct Quad {
  int axis = 2;
  double offset = 0.0;
  std::array<double, 2> lo{}, hi{};
  Texture texture;
  friend bool operator==(const Quad&, const Quad&) = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Quad> quads;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  /// Leading quads forming the room (back wall, floor); the rest are objects.
  std::size_t room_quads = 0;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

/// Back wall, floor and 3 to 6 object quads, at least one object visible from
/// the canonical pose (identity rotation at the origin).
SceneSpec generate_scene(std::uint64_t seed);

/// f = w, principal point at the image centre.
Mat3 default_intrinsics(std::size_t h, std::size_t w);

struct Hit {
  int quad = -1;
  double depth = kMissDepth;  // camera-frame z
  Vec3 point = Vec3::Zero();
};

/// Nearest intersection of the ray through continuous pixel coordinate `px`.
Hit cast_ray(const SceneSpec& scene, const CameraPose& pose, const Vec2& px);

struct PosedFrame {
  Image image;                // (3, H, W) in [-1, 1]
  std::vector<double> depth;  // H*W, kMissDepth on misses
  std::vector<int> surface;   // H*W quad index, -1 on misses
  CameraPose pose;
};

PosedFrame render_view(const SceneSpec& scene, const CameraPose& pose, std::size_t h, std::size_t w);

/// Object quads covering at least one pixel centre.
std::size_t visible_objects(const SceneSpec& scene, const CameraPose& pose, std::size_t h, std::size_t w);

/// Correspondence field from view a to view b.
struct Flow {
  Tensor<double> flow;  // (2, H, W): dx, dy in pixels
  Tensor<double> mask;  // (H, W): 1 where the correspondence is valid
};

/// Pixel p of view a maps to p + flow(p) in view b. The mask requires the
/// surface point to be in front of b, unoccluded there, inside the pixel-centre
/// rectangle of b, and every bilinear neighbour of its location in b to lie on
/// the same quad.
Flow gt_flow(const SceneSpec& scene, const CameraPose& pose_a, const CameraPose& pose_b, std::size_t h, std::size_t w);

/// Per-frame motion; each scene scales these by factors in [1 - jitter, 1 + jitter]
/// and draws the lateral and yaw directions at random.
struct TrajectorySpec {
  double forward = 0.15;
  double lateral = 0.3;
  double yaw_deg = 3.0;
  double jitter = 0.3;
  friend bool operator==(const TrajectorySpec&, const TrajectorySpec&) = default;
};

std::vector<CameraPose> make_trajectory(const TrajectorySpec& spec, std::size_t frames, std::uint64_t seed,
                                        const Mat3& K);

struct DatasetSpec {
  std::size_t scenes = 64;
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  TrajectorySpec trajectory;
  std::uint64_t seed = 0;
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

/// Seed of scene `index` in a dataset.
std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index);

/// Writes scene_XXXX/{frame_XXX.png, poses.json, scene.json, flow_*.f32/.json}
/// under `root`. Flow files pair consecutive frames k+1 -> k.
void build_dataset(const std::filesystem::path& root, const DatasetSpec& spec);

struct SceneData {
  std::filesystem::path dir;
  SceneSpec spec;
  Mat3 K;
  std::vector<Image> frames;
  std::vector<CameraPose> poses;
  std::vector<Flow> flows;  // flows[k]: frame k+1 -> frame k
};

SceneData load_scene(const std::filesystem::path& dir);
/// Every scene_* directory under `root`, in name order. Throws IoFailure when none exist.
std::vector<SceneData> load_dataset(const std::filesystem::path& root);

void write_flow(const std::filesystem::path& stem, const Flow& flow, std::size_t from, std::size_t to);
Flow read_flow(const std::filesystem::path& stem);

}  // namespace posediff::scenes
