#include "posediff/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "posediff/errors.hpp"

namespace posediff {

namespace {

using nlohmann::json;
using Handler = std::function<void(const json&, const std::string&)>;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void for_fields(const json& j, const std::string& path, const std::map<std::string, Handler>& handlers) {
  if (!j.is_object()) throw InvalidValue((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = handlers.find(key);
    if (it == handlers.end()) throw UnknownKey(join(path, key));
    it->second(value, join(path, key));
  }
}

std::size_t as_size(const json& v, const std::string& p) {
  if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) return v.get<std::size_t>();
  throw InvalidValue(p + ": expected a nonnegative integer, got " + v.dump());
}

std::uint64_t as_u64(const json& v, const std::string& p) {
  if (v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0)) return v.get<std::uint64_t>();
  throw InvalidValue(p + ": expected a nonnegative integer, got " + v.dump());
}

double as_double(const json& v, const std::string& p) {
  if (!v.is_number()) throw InvalidValue(p + ": expected a number, got " + v.dump());
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& p) {
  if (!v.is_boolean()) throw InvalidValue(p + ": expected true or false, got " + v.dump());
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& p) {
  if (!v.is_string()) throw InvalidValue(p + ": expected a string, got " + v.dump());
  return v.get<std::string>();
}

std::vector<std::size_t> as_sizes(const json& v, const std::string& p) {
  if (!v.is_array()) throw InvalidValue(p + ": expected an array of nonnegative integers");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_size(v[i], p + "[" + std::to_string(i) + "]"));
  return out;
}

template <typename T>
Handler set_size(T& field) {
  return [&field](const json& v, const std::string& p) { field = as_size(v, p); };
}
Handler set_double(double& field) {
  return [&field](const json& v, const std::string& p) { field = as_double(v, p); };
}
Handler set_bool(bool& field) {
  return [&field](const json& v, const std::string& p) { field = as_bool(v, p); };
}
Handler set_sizes(std::vector<std::size_t>& field) {
  return [&field](const json& v, const std::string& p) { field = as_sizes(v, p); };
}

void read_model(const json& j, const std::string& path, DenoiserConfig& m) {
  for_fields(j, path,
             {{"image_size", set_size(m.image_size)},
              {"in_channels", set_size(m.in_channels)},
              {"base_channels", set_size(m.base_channels)},
              {"channel_multiples", set_sizes(m.channel_multiples)},
              {"res_blocks", set_size(m.res_blocks)},
              {"attention_resolutions", set_sizes(m.attention_resolutions)},
              {"head_channels", set_size(m.head_channels)},
              {"groups", set_size(m.groups)},
              {"attention", [&m](const json& v, const std::string& p) {
                 const auto mode = as_string(v, p);
                 if (mode == "epipolar") m.attention = AttentionMode::epipolar;
                 else if (mode == "cross_view") m.attention = AttentionMode::cross_view;
                 else throw InvalidValue(p + ": expected \"epipolar\" or \"cross_view\", got \"" + mode + "\"");
               }}});
}

RunConfig from_json_tree(const json& root) {
  RunConfig c;
  for_fields(
      root, "",
      {{"seed", [&c](const json& v, const std::string& p) { c.seed = as_u64(v, p); }},
       {"data_dir", [&c](const json& v, const std::string& p) { c.data_dir = as_string(v, p); }},
       {"diffusion",
        [&c](const json& v, const std::string& p) {
          for_fields(v, p, {{"steps", set_size(c.diffusion.steps)}, {"variance_preserving", set_bool(c.diffusion.variance_preserving)}});
        }},
       {"sampler",
        [&c](const json& v, const std::string& p) {
          auto& s = c.sampler;
          for_fields(v, p,
                     {{"inference_steps", set_size(s.inference_steps)},
                      {"refresh_tail", set_size(s.refresh_tail)},
                      {"window", set_size(s.window)},
                      {"per_frame_source", set_bool(s.per_frame_source)},
                      {"clip_denoised", set_bool(s.clip_denoised)}});
        }},
       {"model", [&c](const json& v, const std::string& p) { read_model(v, p, c.model); }},
       {"dataset",
        [&c](const json& v, const std::string& p) {
          auto& d = c.dataset;
          for_fields(v, p,
                     {{"train_scenes", set_size(d.train_scenes)},
                      {"eval_scenes", set_size(d.eval_scenes)},
                      {"frames", set_size(d.frames)},
                      {"height", set_size(d.height)},
                      {"width", set_size(d.width)},
                      {"trajectory", [&d](const json& tv, const std::string& tp) {
                         auto& t = d.trajectory;
                         for_fields(tv, tp,
                                    {{"forward", set_double(t.forward)},
                                     {"lateral", set_double(t.lateral)},
                                     {"yaw_deg", set_double(t.yaw_deg)},
                                     {"jitter", set_double(t.jitter)}});
                       }}});
        }},
       {"training",
        [&c](const json& v, const std::string& p) {
          auto& t = c.training;
          for_fields(v, p,
                     {{"steps", set_size(t.steps)},
                      {"batch_size", set_size(t.batch_size)},
                      {"learning_rate", set_double(t.adam.lr)},
                      {"beta1", set_double(t.adam.beta1)},
                      {"beta2", set_double(t.adam.beta2)},
                      {"eps", set_double(t.adam.eps)},
                      {"max_source_gap", set_size(t.max_source_gap)},
                      {"log_every", set_size(t.log_every)},
                      {"checkpoint_every", set_size(t.checkpoint_every)}});
        }},
       {"sample",
        [&c](const json& v, const std::string& p) {
          for_fields(v, p, {{"scene", set_size(c.sample.scene)}, {"frames", set_size(c.sample.frames)}});
        }},
       {"interpolate",
        [&c](const json& v, const std::string& p) {
          for_fields(v, p, {{"scene", set_size(c.interpolate.scene)}, {"anchors", set_sizes(c.interpolate.anchors)}});
        }},
       {"inspect", [&c](const json& v, const std::string& p) {
          auto& s = c.inspect;
          for_fields(v, p,
                     {{"scene", set_size(s.scene)},
                      {"target_frame", set_size(s.target_frame)},
                      {"source_frame", set_size(s.source_frame)},
                      {"resolution", set_size(s.resolution)},
                      {"pixels", set_sizes(s.pixels)}});
        }}});
  c.validate();
  return c;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidValue(what);
}

}  // namespace

void RunConfig::validate() const {
  require(diffusion.steps >= 1, "diffusion.steps must be at least 1");
  require(sampler.inference_steps >= 1 && sampler.inference_steps <= diffusion.steps,
          "sampler.inference_steps must lie in [1, diffusion.steps]");
  require(sampler.refresh_tail <= sampler.inference_steps, "sampler.refresh_tail must not exceed sampler.inference_steps");
  try {
    model.validate();
  } catch (const InvalidConfig& e) {
    throw InvalidValue(std::string("model: ") + e.what());
  }
  require(model.in_channels == 3, "model.in_channels must be 3 (RGB frames)");
  require(dataset.height == model.image_size && dataset.width == model.image_size,
          "dataset.height and dataset.width must equal model.image_size");
  require(dataset.train_scenes >= 1 && dataset.eval_scenes >= 1, "dataset scene counts must be positive");
  require(dataset.frames >= 2, "dataset.frames must be at least 2");
  require(dataset.trajectory.jitter >= 0.0 && dataset.trajectory.jitter <= 1.0, "dataset.trajectory.jitter must lie in [0, 1]");
  require(training.batch_size >= 1, "training.batch_size must be positive");
  require(training.adam.lr > 0.0, "training.learning_rate must be positive");
  require(training.adam.beta1 >= 0.0 && training.adam.beta1 < 1.0, "training.beta1 must lie in [0, 1)");
  require(training.adam.beta2 >= 0.0 && training.adam.beta2 < 1.0, "training.beta2 must lie in [0, 1)");
  require(training.adam.eps > 0.0, "training.eps must be positive");
  require(sample.scene < dataset.eval_scenes, "sample.scene must index an eval scene");
  require(sample.frames <= dataset.frames, "sample.frames must not exceed dataset.frames");
  require(interpolate.scene < dataset.eval_scenes, "interpolate.scene must index an eval scene");
  require(interpolate.anchors.size() >= 2, "interpolate.anchors needs at least 2 frames");
  for (std::size_t i = 0; i < interpolate.anchors.size(); ++i) {
    require(interpolate.anchors[i] < dataset.frames, "interpolate.anchors must index frames of a scene");
    require(i == 0 || interpolate.anchors[i] > interpolate.anchors[i - 1], "interpolate.anchors must be increasing");
  }
  require(inspect.scene < dataset.eval_scenes, "inspect.scene must index an eval scene");
  require(inspect.target_frame < dataset.frames && inspect.source_frame < dataset.frames,
          "inspect frames must index frames of a scene");
  require(inspect.resolution >= 1 && inspect.resolution <= dataset.height, "inspect.resolution must lie in [1, dataset.height]");
  for (const auto px : inspect.pixels) {
    require(px < inspect.resolution * inspect.resolution, "inspect.pixels must index the inspect.resolution grid");
  }
}

scenes::DatasetSpec RunConfig::train_dataset() const {
  return {dataset.train_scenes, dataset.frames, dataset.height, dataset.width, dataset.trajectory, derive_seed(seed, 101)};
}

scenes::DatasetSpec RunConfig::eval_dataset() const {
  return {dataset.eval_scenes, dataset.frames, dataset.height, dataset.width, dataset.trajectory, derive_seed(seed, 202)};
}

RunConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw ParseError("line " + std::to_string(line) + ": " + e.what());
  }
  return from_json_tree(root);
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoFailure("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

nlohmann::json serialize_config(const RunConfig& c) {
  const auto& t = c.dataset.trajectory;
  return json{{"seed", c.seed},
              {"data_dir", c.data_dir},
              {"diffusion", {{"steps", c.diffusion.steps}, {"variance_preserving", c.diffusion.variance_preserving}}},
              {"sampler",
               {{"inference_steps", c.sampler.inference_steps},
                {"refresh_tail", c.sampler.refresh_tail},
                {"window", c.sampler.window},
                {"per_frame_source", c.sampler.per_frame_source},
                {"clip_denoised", c.sampler.clip_denoised}}},
              {"model", c.model},
              {"dataset",
               {{"train_scenes", c.dataset.train_scenes},
                {"eval_scenes", c.dataset.eval_scenes},
                {"frames", c.dataset.frames},
                {"height", c.dataset.height},
                {"width", c.dataset.width},
                {"trajectory", {{"forward", t.forward}, {"lateral", t.lateral}, {"yaw_deg", t.yaw_deg}, {"jitter", t.jitter}}}}},
              {"training",
               {{"steps", c.training.steps},
                {"batch_size", c.training.batch_size},
                {"learning_rate", c.training.adam.lr},
                {"beta1", c.training.adam.beta1},
                {"beta2", c.training.adam.beta2},
                {"eps", c.training.adam.eps},
                {"max_source_gap", c.training.max_source_gap},
                {"log_every", c.training.log_every},
                {"checkpoint_every", c.training.checkpoint_every}}},
              {"sample", {{"scene", c.sample.scene}, {"frames", c.sample.frames}}},
              {"interpolate", {{"scene", c.interpolate.scene}, {"anchors", c.interpolate.anchors}}},
              {"inspect",
               {{"scene", c.inspect.scene},
                {"target_frame", c.inspect.target_frame},
                {"source_frame", c.inspect.source_frame},
                {"resolution", c.inspect.resolution},
                {"pixels", c.inspect.pixels}}}};
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(serialize_config(cfg).dump())));
  return buf;
}

}  // namespace posediff
