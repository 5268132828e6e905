#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "posediff/denoiser.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/scenes.hpp"

namespace posediff {

struct DiffusionSettings {
  std::size_t steps = 1000;
  bool variance_preserving = false;
};

struct DatasetSettings {
  std::size_t train_scenes = 64;
  std::size_t eval_scenes = 8;
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  scenes::TrajectorySpec trajectory;
};

struct TrainingSettings {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  AdamHyper adam;
  /// Largest frame distance between a training target and its source; 0 = any.
  std::size_t max_source_gap = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 500;
};

struct SampleSettings {
  std::size_t scene = 0;  // eval scene whose first frame and trajectory are used
  std::size_t frames = 0;  // 0 = the whole trajectory
};

struct InterpolateSettings {
  std::size_t scene = 0;
  std::vector<std::size_t> anchors{0, 7};  // frames given as anchors; the others are generated
};

struct InspectSettings {
  std::size_t scene = 0;
  std::size_t target_frame = 1;
  std::size_t source_frame = 0;
  std::size_t resolution = 8;
  std::vector<std::size_t> pixels{0, 27, 63};  // row-major target pixels at that resolution
};

/// Every tunable of a run. Absent keys take the defaults above.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  DiffusionSettings diffusion;
  SamplerConfig sampler;
  DenoiserConfig model;
  DatasetSettings dataset;
  TrainingSettings training;
  SampleSettings sample;
  InterpolateSettings interpolate;
  InspectSettings inspect;

  /// Throws InvalidValue naming the violated constraint.
  void validate() const;
  scenes::DatasetSpec train_dataset() const;
  scenes::DatasetSpec eval_dataset() const;
};

/// Parses and validates. Throws ParseError (with line) on malformed JSON,
/// UnknownKey on unrecognized keys, InvalidValue on bad types or constraints.
RunConfig parse_config_text(const std::string& text);
/// Throws IoFailure when the file cannot be read.
RunConfig parse_config(const std::filesystem::path& path);

/// Canonical form: every key present, defaults filled in.
nlohmann::json serialize_config(const RunConfig& cfg);

/// 64-bit FNV-1a of the canonical JSON text, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);
std::uint64_t fnv1a(const std::string& bytes);

}  // namespace posediff
