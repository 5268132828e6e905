#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "posediff/checkpoint.hpp"
#include "posediff/config.hpp"
#include "posediff/errors.hpp"
#include "posediff/geometry.hpp"
#include "posediff/image.hpp"
#include "posediff/metrics.hpp"
#include "posediff/pipeline.hpp"
#include "posediff/scenes.hpp"
#include "posediff/sequence.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace posediff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string ckpt;
  std::string frames;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

RunConfig load_config(const Options& o) {
  try {
    RunConfig cfg = o.config.empty() ? parse_config_text("{}") : parse_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    return cfg;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

fs::path data_root(const Options& o, const RunConfig& cfg) { return o.data.empty() ? fs::path(cfg.data_dir) : fs::path(o.data); }

fs::path out_dir(const Options& o, const char* fallback) {
  fs::path p = o.out.empty() ? fs::path(fallback) : fs::path(o.out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoFailure("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

json manifest(const std::string& command, const RunConfig& cfg) {
  return {{"command", command}, {"seed", cfg.seed}, {"config_hash", config_hash(cfg)}, {"config", serialize_config(cfg)}};
}

json pose_json(const geometry::CameraPose& p) {
  json R = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R.push_back(p.R()(r, c));
  return {{"R", R}, {"t", {p.t()(0), p.t()(1), p.t()(2)}}};
}

char frame_name_buf[64];
std::string frame_name(std::size_t i) {
  std::snprintf(frame_name_buf, sizeof frame_name_buf, "frame_%03zu.png", i);
  return frame_name_buf;
}

const scenes::SceneData& pick_scene(const std::vector<scenes::SceneData>& scenes, std::size_t index) {
  if (index >= scenes.size()) {
    throw InvalidValue("scene " + std::to_string(index) + " not in dataset of " + std::to_string(scenes.size()));
  }
  return scenes[index];
}

Denoiser<float> load_denoiser(const Options& o, const RunConfig& cfg) {
  if (o.ckpt.empty()) throw InvalidValue("--ckpt is required");
  const auto ckpt = read_checkpoint<float>(o.ckpt);
  if (!(ckpt.header.model == cfg.model)) throw InvalidValue("checkpoint model architecture differs from the config");
  return load_model(ckpt);
}

void write_sequence(const fs::path& dir, const sequence::FrameSequence& seq, const std::vector<std::size_t>& frame_ids,
                    json m) {
  json frames = json::array();
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    write_png(dir / frame_name(i), seq.frames[i]);
    json f = pose_json(seq.poses[i]);
    f["file"] = frame_name(i);
    f["scene_frame"] = frame_ids[i];
    f["sources"] = seq.source_log[i];
    frames.push_back(f);
  }
  m["frames"] = frames;
  m["sequence_seed"] = seq.seed;
  write_json(dir / "manifest.json", m);
}

int cmd_gen_data(const Options& o) {
  const RunConfig cfg = load_config(o);
  const fs::path root = o.out.empty() ? data_root(o, cfg) : fs::path(o.out);
  fs::create_directories(root);
  scenes::build_dataset(root / "train", cfg.train_dataset());
  scenes::build_dataset(root / "eval", cfg.eval_dataset());
  write_json(root / "manifest.json", manifest("gen-data", cfg));
  std::cout << "wrote " << cfg.dataset.train_scenes << " train and " << cfg.dataset.eval_scenes << " eval scenes to "
            << root.string() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = load_config(o);
  const fs::path dir = out_dir(o, "run");
  const auto scenes = scenes::load_dataset(data_root(o, cfg) / "train");
  const pipeline::PairSampler pairs(scenes, cfg.training.max_source_gap);
  auto state = o.ckpt.empty() ? pipeline::init_training(cfg) : pipeline::resume_training(cfg, o.ckpt);
  const fs::path ckpt = dir / "checkpoint.pgdm";

  std::ofstream log(dir / "losses.csv", o.ckpt.empty() ? std::ios::trunc : std::ios::app);
  if (o.ckpt.empty()) log << "step,loss\n";
  double window = 0.0;
  std::size_t in_window = 0;
  pipeline::train(state, cfg, pairs, [&](std::size_t step, double loss) {
    log << step << "," << loss << "\n";
    window += loss;
    ++in_window;
    if (cfg.training.log_every > 0 && step % cfg.training.log_every == 0) {
      std::cout << "step " << step << " loss " << window / static_cast<double>(in_window) << std::endl;
      window = 0.0;
      in_window = 0;
    }
    if (cfg.training.checkpoint_every > 0 && step % cfg.training.checkpoint_every == 0) {
      log.flush();
      pipeline::save_training(ckpt, state, cfg);
    }
  });
  pipeline::save_training(ckpt, state, cfg);
  json m = manifest("train", cfg);
  m["checkpoint"] = ckpt.filename().string();
  m["steps"] = state.trainer->optimizer().steps_taken();
  m["parameters"] = state.model->parameter_count();
  write_json(dir / "manifest.json", m);
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kExitOk;
}

int cmd_sample(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto model = load_denoiser(o, cfg);
  const auto scenes = scenes::load_dataset(data_root(o, cfg) / "eval");
  const auto& scene = pick_scene(scenes, cfg.sample.scene);
  std::size_t n = cfg.sample.frames == 0 ? scene.poses.size() : cfg.sample.frames;
  if (n > scene.poses.size()) throw InvalidValue("sample.frames exceeds the scene trajectory");
  const std::vector<geometry::CameraPose> poses(scene.poses.begin(), scene.poses.begin() + static_cast<std::ptrdiff_t>(n));
  const auto ctx = pipeline::generation_context(model, cfg);
  const auto seq = sequence::generate_sequence(scene.frames[0], poses, ctx, cfg.seed);

  const fs::path dir = out_dir(o, "sample");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  json m = manifest("sample", cfg);
  m["scene"] = scene.dir.string();
  write_sequence(dir, seq, ids, m);
  std::cout << "wrote " << n << " frames to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_interpolate(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto model = load_denoiser(o, cfg);
  const auto scenes = scenes::load_dataset(data_root(o, cfg) / "eval");
  const auto& scene = pick_scene(scenes, cfg.interpolate.scene);
  std::vector<std::pair<Image, geometry::CameraPose>> anchors;
  std::vector<bool> is_anchor(scene.poses.size(), false);
  for (std::size_t a : cfg.interpolate.anchors) {
    if (a >= scene.poses.size()) throw InvalidValue("anchor frame " + std::to_string(a) + " outside the trajectory");
    anchors.emplace_back(scene.frames[a], scene.poses[a]);
    is_anchor[a] = true;
  }
  std::vector<geometry::CameraPose> targets;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scene.poses.size(); ++i) {
    if (!is_anchor[i]) {
      targets.push_back(scene.poses[i]);
      ids.push_back(i);
    }
  }
  const auto ctx = pipeline::generation_context(model, cfg);
  const auto seq = sequence::interpolate_views(anchors, targets, ctx, cfg.seed);

  const fs::path dir = out_dir(o, "interpolate");
  json m = manifest("interpolate", cfg);
  m["scene"] = scene.dir.string();
  m["anchors"] = cfg.interpolate.anchors;
  write_sequence(dir, seq, ids, m);
  std::cout << "wrote " << ids.size() << " frames to " << dir.string() << "\n";
  return kExitOk;
}

std::vector<Tensor<double>> flow_fields(const scenes::SceneData& s, std::size_t n) {
  std::vector<Tensor<double>> out;
  for (std::size_t k = 0; k + 1 < n; ++k) out.push_back(s.flows[k].flow);
  return out;
}

std::vector<Tensor<double>> flow_masks(const scenes::SceneData& s, std::size_t n) {
  std::vector<Tensor<double>> out;
  for (std::size_t k = 0; k + 1 < n; ++k) out.push_back(s.flows[k].mask);
  return out;
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto scenes = scenes::load_dataset(data_root(o, cfg) / "eval");
  json report;
  if (!o.frames.empty()) {
    const auto& scene = pick_scene(scenes, cfg.sample.scene);
    std::vector<Image> generated;
    for (std::size_t i = 0; fs::exists(fs::path(o.frames) / frame_name(i)); ++i) {
      generated.push_back(read_png(fs::path(o.frames) / frame_name(i)));
    }
    if (generated.empty()) throw IoFailure("no frame_000.png in " + o.frames);
    if (generated.size() > scene.frames.size()) throw LengthMismatch("more generated frames than the scene has");
    const std::size_t n = generated.size();
    const std::vector<Image> truth(scene.frames.begin(), scene.frames.begin() + static_cast<std::ptrdiff_t>(n));
    auto r = metrics::evaluate_sequence(generated, truth, flow_fields(scene, n), flow_masks(scene, n));
    r.config = serialize_config(cfg);
    std::cout << metrics::format_report(r);
    report = r;
  } else {
    Rng rng(derive_seed(cfg.seed, 31));
    json rows = json::array();
    for (const auto& s : scenes) {
      const std::size_t n = s.frames.size();
      const double ordered = metrics::flow_warp_error(s.frames, flow_fields(s, n), flow_masks(s, n));
      std::vector<Image> shuffled = s.frames;
      std::shuffle(shuffled.begin(), shuffled.end(), rng.engine());
      const double mixed = metrics::flow_warp_error(shuffled, flow_fields(s, n), flow_masks(s, n));
      std::printf("%-40s E_warp ordered %.5f shuffled %.5f\n", s.dir.filename().string().c_str(), ordered, mixed);
      rows.push_back({{"scene", s.dir.filename().string()}, {"ordered", ordered}, {"shuffled", mixed}});
    }
    report = {{"ground_truth", rows}, {"config", serialize_config(cfg)}};
  }
  write_json(out_dir(o, "eval") / "report.json", report);
  return kExitOk;
}

int cmd_inspect(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto scenes = scenes::load_dataset(data_root(o, cfg) / "eval");
  const auto& scene = pick_scene(scenes, cfg.inspect.scene);
  const auto& in = cfg.inspect;
  if (in.target_frame >= scene.poses.size() || in.source_frame >= scene.poses.size()) {
    throw InvalidValue("inspect frame outside the trajectory");
  }
  const std::size_t r = in.resolution;
  const double h = static_cast<double>(scene.frames[0].shape()[1]);
  const double w = static_cast<double>(scene.frames[0].shape()[2]);
  const auto K = geometry::scale_intrinsics(scene.K, static_cast<double>(r) / w, static_cast<double>(r) / h);
  const auto rel = geometry::relative_pose(scene.poses[in.target_frame], scene.poses[in.source_frame]);

  const fs::path dir = out_dir(o, "inspect");
  write_png(dir / "target.png", scene.frames[in.target_frame]);
  write_png(dir / "source.png", scene.frames[in.source_frame]);
  json maps = json::array();
  for (std::size_t p : in.pixels) {
    if (p >= r * r) throw InvalidValue("inspect pixel " + std::to_string(p) + " outside the grid");
    const auto px = geometry::pixel_center(p % r, p / r);
    const auto weights = geometry::epipolar_weight_map(px, rel, K, r, r);
    char name[64];
    std::snprintf(name, sizeof name, "weights_%04zu.pgm", p);
    write_pgm(dir / name, weights, r, r);
    maps.push_back({{"pixel", p}, {"x", p % r}, {"y", p / r}, {"file", name}, {"weights", weights}});
  }
  json m = manifest("inspect-epipolar", cfg);
  m["resolution"] = r;
  m["maps"] = maps;
  write_json(dir / "manifest.json", m);
  std::cout << "wrote " << maps.size() << " weight maps to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pose-conditioned diffusion for consistent novel views"};
  app.require_subcommand(1);
  Options o;
  int (*handler)(const Options&) = nullptr;

  auto add = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "run configuration (JSON)");
    sub->add_option("--seed", o.seed, "override the configured seed");
    sub->add_option("--threads", o.threads, "worker threads (0 = default)");
    sub->callback([&handler, fn] { handler = fn; });
    return sub;
  };
  auto* gen = add("gen-data", "render the synthetic train and eval datasets", cmd_gen_data);
  gen->add_option("--out", o.out, "dataset root (default: data_dir)");
  auto* train = add("train", "train the denoiser", cmd_train);
  train->add_option("--data", o.data, "dataset root");
  train->add_option("--out", o.out, "run directory");
  train->add_option("--ckpt", o.ckpt, "checkpoint to resume from");
  auto* sample = add("sample", "generate a sequence along an eval trajectory", cmd_sample);
  sample->add_option("--data", o.data, "dataset root");
  sample->add_option("--out", o.out, "output directory");
  sample->add_option("--ckpt", o.ckpt, "model checkpoint")->required();
  auto* interp = add("interpolate", "generate the non-anchor views of an eval trajectory", cmd_interpolate);
  interp->add_option("--data", o.data, "dataset root");
  interp->add_option("--out", o.out, "output directory");
  interp->add_option("--ckpt", o.ckpt, "model checkpoint")->required();
  auto* eval = add("eval", "score a generated sequence, or ground truth when --frames is absent", cmd_eval);
  eval->add_option("--data", o.data, "dataset root");
  eval->add_option("--frames", o.frames, "directory of generated frame_XXX.png");
  eval->add_option("--out", o.out, "output directory for report.json");
  auto* inspect = add("inspect-epipolar", "write epipolar weight maps as PGM images", cmd_inspect);
  inspect->add_option("--data", o.data, "dataset root");
  inspect->add_option("--out", o.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

#ifdef _OPENMP
  if (o.threads > 0) omp_set_num_threads(o.threads);
#endif
  try {
    return handler(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
