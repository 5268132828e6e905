#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include "oracles.hpp"
#include "posediff/errors.hpp"
#include "posediff/image.hpp"
#include "posediff/scenes.hpp"
#include "support.hpp"

using namespace posediff;
using namespace posediff::scenes;

namespace {

Quad wall_at(double z, double half, Texture tex = {}) {
  Quad q;
  q.axis = 2;
  q.offset = z;
  q.lo = {-half, -half};
  q.hi = {half, half};
  q.texture = tex;
  return q;
}

Texture graded() {
  Texture t;
  t.base = {0.4, 0.5, 0.6};
  t.grad_u = {0.05, -0.03, 0.02};
  t.grad_v = {-0.02, 0.04, 0.01};
  t.amplitude = 0.05;
  t.freq_u = 0.7;
  t.freq_v = -0.4;
  t.phase = 0.3;
  return t;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Distance of q from the epipolar line of p, with F built from the two absolute poses.
double epipolar_residual(const CameraPose& a, const CameraPose& b, const Vec2& p, const Vec2& q) {
  const Mat3 R = b.R() * a.R().transpose();
  const Vec3 t = b.t() - R * a.t();
  Mat3 tx;
  tx << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  const Mat3 F = b.K().inverse().transpose() * tx * R * a.K().inverse();
  const Vec3 l = F * Vec3(p.x(), p.y(), 1.0);
  return std::abs(l.dot(Vec3(q.x(), q.y(), 1.0))) / std::hypot(l.x(), l.y());
}

}  // namespace

TEST_CASE("scene generation is deterministic and seed dependent") {
  CHECK(generate_scene(5) == generate_scene(5));
  for (std::uint64_t s = 0; s < 20; ++s) CHECK_FALSE(generate_scene(s) == generate_scene(s + 1));
  const auto K = default_intrinsics(16, 16);
  const CameraPose canonical(K, Mat3::Identity(), Vec3::Zero());
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto scene = generate_scene(s);
    CHECK(scene.room_quads == 2);
    CHECK(scene.quads.size() >= 5);
    CHECK(scene.quads.size() <= 8);
    CHECK(visible_objects(scene, canonical, 16, 16) >= 1);
  }
}

TEST_CASE("scene json round trip") {
  const auto scene = generate_scene(42);
  nlohmann::json j = scene;
  CHECK(j.get<SceneSpec>() == scene);
  j["quads"][0]["axis"] = 4;
  CHECK_THROWS_AS(j.get<SceneSpec>(), FormatError);
}

TEST_CASE("empty scene renders background at the miss depth") {
  SceneSpec empty;
  empty.background = {0.25, 0.5, 1.0};
  const auto K = default_intrinsics(6, 6);
  const auto f = render_view(empty, CameraPose(K, Mat3::Identity(), Vec3::Zero()), 6, 6);
  for (std::size_t i = 0; i < 36; ++i) {
    CHECK(f.image[i] == -0.5);
    CHECK(f.image[36 + i] == 0.0);
    CHECK(f.image[72 + i] == 1.0);
    CHECK(f.depth[i] == kMissDepth);
    CHECK(f.surface[i] == -1);
  }
}

TEST_CASE("rendered plane matches the analytic ray intersection") {
  SceneSpec s;
  s.quads = {wall_at(6.0, 50.0, graded())};
  const auto K = default_intrinsics(12, 10);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat3 R = oracle::random_rotation(rng, 0.3);
    const Vec3 c(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const auto pose = CameraPose::from_center(K, R, c);
    const auto f = render_view(s, pose, 12, 10);
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 10; ++x) {
        // world ray of the pixel centre, intersected with z = 6
        const Vec3 d = R * K.inverse() * Vec3(x + 0.5, y + 0.5, 1.0);
        const Vec3 X = c + (6.0 - c.z()) / d.z() * d;
        const auto col = graded().color(X.x(), X.y());
        for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(f.image[(k * 12 + y) * 10 + x] - (2 * col[k] - 1)) < 1e-12);
        CHECK(std::abs(f.depth[y * 10 + x] - (R.transpose() * (X - c)).z()) < 1e-9);
      }
  }
}

TEST_CASE("nearer quads occlude farther ones") {
  Texture red, blue;
  red.base = {1, 0, 0};
  blue.base = {0, 0, 1};
  SceneSpec s;
  s.quads = {wall_at(10.0, 50.0, blue), wall_at(3.0, 0.5, red)};
  const auto K = default_intrinsics(16, 16);
  const auto f = render_view(s, CameraPose(K, Mat3::Identity(), Vec3::Zero()), 16, 16);
  // centre pixels see the small near quad, corners the far wall
  CHECK(f.surface[8 * 16 + 8] == 1);
  CHECK(f.depth[8 * 16 + 8] == doctest::Approx(3.0));
  CHECK(f.image[8 * 16 + 8] == 1.0);
  CHECK(f.surface[0] == 0);
  CHECK(f.depth[0] == doctest::Approx(10.0));
  CHECK(f.image[2 * 256] == 1.0);
}

TEST_CASE("flow examples") {
  SceneSpec s;
  s.quads = {wall_at(5.0, 100.0)};
  const auto K = default_intrinsics(16, 16);
  const CameraPose a(K, Mat3::Identity(), Vec3::Zero());
  const auto same = gt_flow(s, a, a, 16, 16);
  for (std::size_t i = 0; i < 256; ++i) {
    CHECK(same.flow[i] == 0.0);
    CHECK(same.flow[256 + i] == 0.0);
    CHECK(same.mask[i] == 1.0);
  }
  // camera b moved right by 0.5: every point shifts left by f * 0.5 / Z pixels
  const auto b = CameraPose::from_center(K, Mat3::Identity(), Vec3(0.5, 0, 0));
  const auto f = gt_flow(s, a, b, 16, 16);
  std::size_t masked = 0;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      CHECK(f.flow[y * 16 + x] == doctest::Approx(-16.0 * 0.5 / 5.0));
      CHECK(std::abs(f.flow[256 + y * 16 + x]) < 1e-12);
      const bool inside = x + 0.5 - 1.6 >= 0.5;
      CHECK(f.mask[y * 16 + x] == (inside ? 1.0 : 0.0));
      masked += inside;
    }
  CHECK(masked == 16 * 14);
}

TEST_CASE("flow masks exclude occlusions and correspondences hit the same point") {
  SceneSpec s;
  s.quads = {wall_at(10.0, 100.0, graded()), wall_at(3.0, 0.6, graded())};
  const auto K = default_intrinsics(16, 16);
  const CameraPose a(K, Mat3::Identity(), Vec3::Zero());
  const auto b = CameraPose::from_center(K, Mat3::Identity(), Vec3(0.8, 0, 0));
  const auto f = gt_flow(s, a, b, 16, 16);
  std::size_t occluded = 0;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const Vec2 p = geometry::pixel_center(x, y);
      const Vec2 q = p + Vec2(f.flow[y * 16 + x], f.flow[256 + y * 16 + x]);
      const Hit ha = cast_ray(s, a, p), hb = cast_ray(s, b, q);
      const bool inside = q.x() >= 0.5 && q.x() <= 15.5 && q.y() >= 0.5 && q.y() <= 15.5;
      if (inside && hb.quad != ha.quad) {
        ++occluded;
        CHECK(f.mask[y * 16 + x] == 0.0);
      }
      if (f.mask[y * 16 + x] == 1.0) {
        CHECK(hb.quad == ha.quad);
        CHECK((hb.point - ha.point).norm() < 1e-9);
      }
    }
  CHECK(occluded > 0);
}

TEST_CASE("correspondences lie on epipolar lines") {
  const auto K = default_intrinsics(16, 16);
  Rng rng(8);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto scene = generate_scene(100 + s);
    const auto a = CameraPose::from_center(K, oracle::random_rotation(rng, 0.1), Vec3(rng.uniform(-0.5, 0.5), 0, 0));
    const auto b = CameraPose::from_center(K, oracle::random_rotation(rng, 0.1), Vec3(rng.uniform(-0.5, 0.5), 0, 0.3));
    const auto f = gt_flow(scene, a, b, 16, 16);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        if (f.mask[y * 16 + x] == 0.0) continue;
        const Vec2 p = geometry::pixel_center(x, y);
        const Vec2 q = p + Vec2(f.flow[y * 16 + x], f.flow[256 + y * 16 + x]);
        CHECK(epipolar_residual(a, b, p, q) < 1e-3);
      }
  }
}

TEST_CASE("trajectories are smooth and start at the canonical pose") {
  const auto K = default_intrinsics(16, 16);
  const auto poses = make_trajectory(TrajectorySpec{}, 8, 9, K);
  REQUIRE(poses.size() == 8);
  CHECK((poses[0].R() - Mat3::Identity()).norm() < 1e-15);
  CHECK(poses[0].t().norm() < 1e-15);
  const auto step = geometry::relative_pose(poses[0], poses[1]);
  for (std::size_t k = 1; k + 1 < 8; ++k) {
    const auto r = geometry::relative_pose(poses[k], poses[k + 1]);
    CHECK((r.R() - step.R()).norm() < 1e-12);
    CHECK(((poses[k + 1].center() - poses[k].center()) - (poses[1].center() - poses[0].center())).norm() < 1e-12);
  }
  CHECK(poses[7].center().z() > 0.0);
  const auto again = make_trajectory(TrajectorySpec{}, 8, 9, K);
  for (std::size_t k = 0; k < 8; ++k) CHECK(again[k].t() == poses[k].t());
}

TEST_CASE("flow files round trip") {
  const auto dir = testing::scratch_dir("flowio");
  Flow f{testing::random_tensor({2, 4, 5}, 1, -3, 3), Tensor<double>({4, 5})};
  f.mask[3] = 1.0;
  write_flow(dir / "flow", f, 1, 0);
  const auto g = read_flow(dir / "flow");
  for (std::size_t i = 0; i < 40; ++i) CHECK(g.flow[i] == double(float(f.flow[i])));
  CHECK(g.mask == f.mask);
  std::filesystem::resize_file(dir / "flow.f32", 10);
  CHECK_THROWS_AS(read_flow(dir / "flow"), FormatError);
  CHECK_THROWS_AS(read_flow(dir / "absent"), IoFailure);
}

TEST_CASE("datasets are byte-identical across builds and load back") {
  DatasetSpec spec;
  spec.scenes = 2;
  spec.frames = 3;
  spec.seed = 4;
  const auto one = testing::scratch_dir("ds_one"), two = testing::scratch_dir("ds_two");
  build_dataset(one, spec);
  build_dataset(two, spec);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(one)) {
    if (!e.is_regular_file()) continue;
    ++files;
    CHECK(slurp(e.path()) == slurp(two / std::filesystem::relative(e.path(), one)));
  }
  CHECK(files == 2 * (3 + 2 + 2 * 2));

  const auto data = load_dataset(one);
  REQUIRE(data.size() == 2);
  const auto K = default_intrinsics(16, 16);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto scene = generate_scene(scene_seed(4, s));
    const auto poses = make_trajectory(spec.trajectory, 3, scene_seed(4, s), K);
    CHECK(data[s].spec == scene);
    CHECK((data[s].K - K).norm() == 0.0);
    REQUIRE(data[s].frames.size() == 3);
    REQUIRE(data[s].flows.size() == 2);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK((data[s].poses[k].R() - poses[k].R()).norm() == 0.0);
      CHECK((data[s].poses[k].t() - poses[k].t()).norm() == 0.0);
      Image expect = render_view(scene, poses[k], 16, 16).image;
      for (auto& v : expect.data()) v = quantize_unit(v);
      CHECK(testing::max_abs_diff(data[s].frames[k], expect) < 1e-12);
    }
    const auto flow = gt_flow(scene, poses[2], poses[1], 16, 16);
    for (std::size_t i = 0; i < 512; ++i) CHECK(data[s].flows[1].flow[i] == double(float(flow.flow[i])));
    CHECK(data[s].flows[1].mask == flow.mask);
  }

  spec.scenes = 0;
  CHECK_THROWS_AS(build_dataset(testing::scratch_dir("ds_bad"), spec), InvalidValue);
  CHECK_THROWS_AS(load_dataset(testing::scratch_dir("ds_empty")), IoFailure);
}
