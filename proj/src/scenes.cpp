#include "posediff/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>

#include <Eigen/LU>

#include "posediff/errors.hpp"
#include "posediff/rng.hpp"

namespace posediff::scenes {

namespace {

// in-plane axes of a quad, increasing order
std::array<int, 2> plane_axes(int axis) {
  if (axis == 0) return {1, 2};
  if (axis == 1) return {0, 2};
  return {0, 1};
}

Texture random_texture(Rng& rng, double grad_scale) {
  Texture t;
  for (int c = 0; c < 3; ++c) {
    t.base[c] = rng.uniform(0.15, 0.85);
    t.grad_u[c] = rng.uniform(-grad_scale, grad_scale);
    t.grad_v[c] = rng.uniform(-grad_scale, grad_scale);
  }
  t.amplitude = rng.uniform(0.0, 0.06);
  t.freq_u = rng.uniform(-1.0, 1.0);
  t.freq_v = rng.uniform(-1.0, 1.0);
  t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return t;
}

Quad random_object(Rng& rng) {
  Quad q;
  const double y_mid = rng.uniform(-0.8, 0.6);
  const double y_half = rng.uniform(0.4, 0.9);
  const double y_lo = y_mid - y_half;
  const double y_hi = std::min(y_mid + y_half, kFloorHeight);
  if (rng.uniform() < 0.7) {
    q.axis = 2;
    q.offset = rng.uniform(3.5, 5.5);
    const double x_mid = rng.uniform(-2.0, 2.0), x_half = rng.uniform(0.4, 1.1);
    q.lo = {x_mid - x_half, y_lo};
    q.hi = {x_mid + x_half, y_hi};
  } else {
    q.axis = 0;
    q.offset = rng.uniform(-2.2, 2.2);
    const double z_lo = rng.uniform(3.5, 5.0);
    q.lo = {y_lo, z_lo};
    q.hi = {y_hi, z_lo + rng.uniform(0.8, 1.8)};
  }
  q.texture = random_texture(rng, 0.08);
  return q;
}

std::array<double, 3> get3(const nlohmann::json& j) { return j.get<std::array<double, 3>>(); }

}  // namespace

std::array<double, 3> Texture::color(double u, double v) const {
  const double wave = amplitude * std::sin(freq_u * u + freq_v * v + phase);
  std::array<double, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = std::clamp(base[k] + grad_u[k] * u + grad_v[k] * v + wave, 0.0, 1.0);
  return c;
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  nlohmann::json quads = nlohmann::json::array();
  for (const auto& q : s.quads) {
    const auto& t = q.texture;
    quads.push_back({{"axis", q.axis},
                     {"offset", q.offset},
                     {"lo", q.lo},
                     {"hi", q.hi},
                     {"texture",
                      {{"base", t.base},
                       {"grad_u", t.grad_u},
                       {"grad_v", t.grad_v},
                       {"amplitude", t.amplitude},
                       {"freq_u", t.freq_u},
                       {"freq_v", t.freq_v},
                       {"phase", t.phase}}}});
  }
  j = nlohmann::json{{"seed", s.seed}, {"background", s.background}, {"room_quads", s.room_quads}, {"quads", quads}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.seed = j.at("seed").get<std::uint64_t>();
  s.background = get3(j.at("background"));
  s.room_quads = j.at("room_quads").get<std::size_t>();
  s.quads.clear();
  for (const auto& qj : j.at("quads")) {
    Quad q;
    q.axis = qj.at("axis").get<int>();
    if (q.axis < 0 || q.axis > 2) throw FormatError("quad axis must be 0, 1 or 2");
    q.offset = qj.at("offset").get<double>();
    q.lo = qj.at("lo").get<std::array<double, 2>>();
    q.hi = qj.at("hi").get<std::array<double, 2>>();
    const auto& tj = qj.at("texture");
    q.texture.base = get3(tj.at("base"));
    q.texture.grad_u = get3(tj.at("grad_u"));
    q.texture.grad_v = get3(tj.at("grad_v"));
    q.texture.amplitude = tj.at("amplitude").get<double>();
    q.texture.freq_u = tj.at("freq_u").get<double>();
    q.texture.freq_v = tj.at("freq_v").get<double>();
    q.texture.phase = tj.at("phase").get<double>();
    s.quads.push_back(q);
  }
}

Mat3 default_intrinsics(std::size_t h, std::size_t w) {
  const double f = static_cast<double>(w);
  return geometry::make_intrinsics(f, f, static_cast<double>(w) / 2.0, static_cast<double>(h) / 2.0);
}

SceneSpec generate_scene(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5ce7e));
  SceneSpec s;
  s.seed = seed;
  for (auto& c : s.background) c = rng.uniform(0.2, 0.8);

  const double wall_z = rng.uniform(7.0, 9.0);
  Quad wall;
  wall.axis = 2;
  wall.offset = wall_z;
  wall.lo = {-30.0, -30.0};
  wall.hi = {30.0, 30.0};
  wall.texture = random_texture(rng, 0.02);
  Quad floor;
  floor.axis = 1;
  floor.offset = kFloorHeight;
  floor.lo = {-30.0, -5.0};
  floor.hi = {30.0, wall_z};
  floor.texture = random_texture(rng, 0.02);
  s.quads = {wall, floor};
  s.room_quads = 2;

  const Mat3 K = default_intrinsics(16, 16);
  const CameraPose canonical(K, Mat3::Identity(), Vec3::Zero());
  const auto count = static_cast<std::size_t>(rng.uniform_int(3, 6));
  for (;;) {
    s.quads.resize(s.room_quads);
    for (std::size_t i = 0; i < count; ++i) s.quads.push_back(random_object(rng));
    if (visible_objects(s, canonical, 16, 16) > 0) break;
  }
  return s;
}

Hit cast_ray(const SceneSpec& scene, const CameraPose& pose, const Vec2& px) {
  const Vec3 d_cam = pose.K().inverse() * Vec3(px.x(), px.y(), 1.0);
  const Vec3 dir = pose.R().transpose() * d_cam;  // z component in camera frame is 1
  const Vec3 origin = pose.center();
  Hit best;
  for (std::size_t i = 0; i < scene.quads.size(); ++i) {
    const Quad& q = scene.quads[i];
    const double dn = dir[q.axis];
    if (std::abs(dn) < 1e-12) continue;
    const double t = (q.offset - origin[q.axis]) / dn;
    if (t <= 1e-9 || t >= best.depth) continue;
    const Vec3 p = origin + t * dir;
    const auto ax = plane_axes(q.axis);
    if (p[ax[0]] < q.lo[0] || p[ax[0]] > q.hi[0] || p[ax[1]] < q.lo[1] || p[ax[1]] > q.hi[1]) continue;
    best.quad = static_cast<int>(i);
    best.depth = t;
    best.point = p;
  }
  return best;
}

PosedFrame render_view(const SceneSpec& scene, const CameraPose& pose, std::size_t h, std::size_t w) {
  PosedFrame f{Image(Shape{3, h, w}), std::vector<double>(h * w, kMissDepth), std::vector<int>(h * w, -1), pose};
#pragma omp parallel for schedule(static)
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Hit hit = cast_ray(scene, pose, geometry::pixel_center(x, y));
      std::array<double, 3> c = scene.background;
      if (hit.quad >= 0) {
        const Quad& q = scene.quads[static_cast<std::size_t>(hit.quad)];
        const auto ax = plane_axes(q.axis);
        c = q.texture.color(hit.point[ax[0]], hit.point[ax[1]]);
        f.depth[y * w + x] = hit.depth;
        f.surface[y * w + x] = hit.quad;
      }
      for (std::size_t k = 0; k < 3; ++k) f.image[(k * h + y) * w + x] = 2.0 * c[k] - 1.0;
    }
  }
  return f;
}

std::size_t visible_objects(const SceneSpec& scene, const CameraPose& pose, std::size_t h, std::size_t w) {
  std::vector<bool> seen(scene.quads.size(), false);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Hit hit = cast_ray(scene, pose, geometry::pixel_center(x, y));
      if (hit.quad >= 0) seen[static_cast<std::size_t>(hit.quad)] = true;
    }
  }
  return static_cast<std::size_t>(std::count(seen.begin() + static_cast<std::ptrdiff_t>(scene.room_quads), seen.end(), true));
}

Flow gt_flow(const SceneSpec& scene, const CameraPose& pose_a, const CameraPose& pose_b, std::size_t h, std::size_t w) {
  Flow out{Tensor<double>(Shape{2, h, w}), Tensor<double>(Shape{h, w})};
  const double wd = static_cast<double>(w), hd = static_cast<double>(h);
  constexpr double slack = 1e-9;
#pragma omp parallel for schedule(static)
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Vec2 p = geometry::pixel_center(x, y);
      const Hit hit = cast_ray(scene, pose_a, p);
      if (hit.quad < 0) continue;
      const Vec3 xb = pose_b.to_camera(hit.point);
      if (xb.z() <= geometry::kDepthEpsilon) continue;
      const Vec2 q = geometry::project(xb, pose_b.K());
      out.flow[(0 * h + y) * w + x] = q.x() - p.x();
      out.flow[(1 * h + y) * w + x] = q.y() - p.y();
      if (q.x() < 0.5 - slack || q.x() > wd - 0.5 + slack || q.y() < 0.5 - slack || q.y() > hd - 0.5 + slack) continue;
      const Hit back = cast_ray(scene, pose_b, q);
      if (back.quad != hit.quad || std::abs(back.depth - xb.z()) > 1e-6 * std::max(1.0, xb.z())) continue;
      // bilinear footprint of q in b must stay on the same surface
      const double gx = std::clamp(q.x() - 0.5, 0.0, wd - 1.0), gy = std::clamp(q.y() - 0.5, 0.0, hd - 1.0);
      const auto x0 = static_cast<std::size_t>(std::floor(gx)), y0 = static_cast<std::size_t>(std::floor(gy));
      const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
      bool same = true;
      for (std::size_t dy = 0; dy < 2 && same; ++dy) {
        for (std::size_t dx = 0; dx < 2 && same; ++dx) {
          const double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          if (wgt <= slack) continue;
          const std::size_t nx = std::min(x0 + dx, w - 1), ny = std::min(y0 + dy, h - 1);
          same = cast_ray(scene, pose_b, geometry::pixel_center(nx, ny)).quad == hit.quad;
        }
      }
      if (same) out.mask[y * w + x] = 1.0;
    }
  }
  return out;
}

std::vector<CameraPose> make_trajectory(const TrajectorySpec& spec, std::size_t frames, std::uint64_t seed,
                                        const Mat3& K) {
  Rng rng(derive_seed(seed, 0x7a7ec));
  auto factor = [&] { return rng.uniform(1.0 - spec.jitter, 1.0 + spec.jitter); };
  const double lateral_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double yaw_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double dx = spec.lateral * lateral_sign * factor();
  const double dz = spec.forward * factor();
  const double dyaw = spec.yaw_deg * yaw_sign * factor() * std::numbers::pi / 180.0;
  std::vector<CameraPose> poses;
  poses.reserve(frames);
  for (std::size_t k = 0; k < frames; ++k) {
    const double kd = static_cast<double>(k);
    const double a = kd * dyaw;
    Mat3 cam_to_world;
    cam_to_world << std::cos(a), 0.0, std::sin(a), 0.0, 1.0, 0.0, -std::sin(a), 0.0, std::cos(a);
    poses.push_back(CameraPose::from_center(K, cam_to_world, Vec3(kd * dx, 0.0, kd * dz)));
  }
  return poses;
}

std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index) { return derive_seed(dataset_seed, index); }

namespace {

std::string numbered(const char* fmt, std::size_t a, std::size_t b = 0) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, a, b);
  return buf;
}

nlohmann::json mat_json(const Mat3& m) {
  nlohmann::json j = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) j.push_back(m(r, c));
  return j;
}

Mat3 mat_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 9) throw FormatError("expected a row-major 3x3 matrix of 9 numbers");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(static_cast<std::size_t>(r * 3 + c)).get<double>();
  return m;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoFailure("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoFailure("write failed for " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoFailure("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_flow(const std::filesystem::path& stem, const Flow& flow, std::size_t from, std::size_t to) {
  const std::size_t h = flow.mask.dim(0), w = flow.mask.dim(1);
  std::vector<float> data(3 * h * w);
  for (std::size_t i = 0; i < 2 * h * w; ++i) data[i] = static_cast<float>(flow.flow[i]);
  for (std::size_t i = 0; i < h * w; ++i) data[2 * h * w + i] = static_cast<float>(flow.mask[i]);
  const auto raw = std::filesystem::path(stem.string() + ".f32");
  std::ofstream os(raw, std::ios::binary);
  if (!os) throw IoFailure("cannot write " + raw.string());
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!os) throw IoFailure("write failed for " + raw.string());
  write_json(stem.string() + ".json", {{"from", from},
                                       {"to", to},
                                       {"height", h},
                                       {"width", w},
                                       {"channels", {"dx", "dy", "mask"}},
                                       {"dtype", "float32"},
                                       {"endianness", "little"}});
}

Flow read_flow(const std::filesystem::path& stem) {
  const auto meta = read_json(stem.string() + ".json");
  const auto h = meta.at("height").get<std::size_t>(), w = meta.at("width").get<std::size_t>();
  std::vector<float> data(3 * h * w);
  const auto raw = std::filesystem::path(stem.string() + ".f32");
  std::ifstream is(raw, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + raw.string());
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw FormatError(raw.string() + ": truncated flow file");
  }
  Flow f{Tensor<double>(Shape{2, h, w}), Tensor<double>(Shape{h, w})};
  for (std::size_t i = 0; i < 2 * h * w; ++i) f.flow[i] = data[i];
  for (std::size_t i = 0; i < h * w; ++i) f.mask[i] = data[2 * h * w + i];
  return f;
}

void build_dataset(const std::filesystem::path& root, const DatasetSpec& spec) {
  if (spec.scenes == 0 || spec.frames == 0 || spec.height == 0 || spec.width == 0) {
    throw InvalidValue("dataset counts and sizes must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoFailure("cannot create " + root.string() + ": " + ec.message());
  const Mat3 K = default_intrinsics(spec.height, spec.width);
  for (std::size_t s = 0; s < spec.scenes; ++s) {
    const auto seed = scene_seed(spec.seed, s);
    const SceneSpec scene = generate_scene(seed);
    const auto poses = make_trajectory(spec.trajectory, spec.frames, seed, K);
    const auto dir = root / numbered("scene_%04zu", s);
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoFailure("cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t k = 0; k < poses.size(); ++k) {
      const auto name = numbered("frame_%03zu.png", k);
      write_png(dir / name, render_view(scene, poses[k], spec.height, spec.width).image);
      frames.push_back({{"file", name}, {"R", mat_json(poses[k].R())}, {"t", {poses[k].t()[0], poses[k].t()[1], poses[k].t()[2]}}});
    }
    write_json(dir / "poses.json", {{"K", mat_json(K)}, {"height", spec.height}, {"width", spec.width}, {"frames", frames}});
    write_json(dir / "scene.json", scene);
    for (std::size_t k = 0; k + 1 < poses.size(); ++k) {
      write_flow(dir / numbered("flow_%03zu_%03zu", k + 1, k), gt_flow(scene, poses[k + 1], poses[k], spec.height, spec.width),
                 k + 1, k);
    }
  }
}

SceneData load_scene(const std::filesystem::path& dir) {
  SceneData d;
  d.dir = dir;
  const auto poses = read_json(dir / "poses.json");
  try {
    d.K = mat_from(poses.at("K"));
    d.spec = read_json(dir / "scene.json").get<SceneSpec>();
    for (const auto& f : poses.at("frames")) {
      const auto t = f.at("t").get<std::array<double, 3>>();
      d.poses.emplace_back(d.K, mat_from(f.at("R")), Vec3(t[0], t[1], t[2]));
      d.frames.push_back(read_png(dir / f.at("file").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  for (std::size_t k = 0; k + 1 < d.poses.size(); ++k) d.flows.push_back(read_flow(dir / numbered("flow_%03zu_%03zu", k + 1, k)));
  return d;
}

std::vector<SceneData> load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoFailure("no dataset directory " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0) dirs.push_back(e.path());
  }
  if (dirs.empty()) throw IoFailure("no scene_* directories under " + root.string());
  std::sort(dirs.begin(), dirs.end());
  std::vector<SceneData> out;
  for (const auto& d : dirs) out.push_back(load_scene(d));
  return out;
}

}  // namespace posediff::scenes
