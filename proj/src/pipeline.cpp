#include "posediff/pipeline.hpp"

#include <algorithm>

#include "posediff/checkpoint.hpp"
#include "posediff/errors.hpp"

namespace posediff::pipeline {

PairSampler::PairSampler(const std::vector<scenes::SceneData>& scenes, std::size_t max_gap)
    : scenes_(scenes), max_gap_(max_gap) {
  if (scenes_.empty()) throw InvalidValue("training needs at least one scene");
  for (const auto& s : scenes_) {
    if (s.frames.size() < 2) throw InvalidValue(s.dir.string() + ": training scenes need at least 2 frames");
  }
}

std::vector<TrainingExample<float>> PairSampler::draw(std::size_t count, Rng& rng) const {
  std::vector<TrainingExample<float>> batch;
  batch.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const auto& scene = scenes_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(scenes_.size()) - 1))];
    const auto frames = static_cast<std::int64_t>(scene.frames.size());
    const std::int64_t target = rng.uniform_int(0, frames - 1);
    const std::int64_t gap = max_gap_ == 0 ? frames : static_cast<std::int64_t>(max_gap_);
    std::vector<std::int64_t> candidates;
    for (std::int64_t j = std::max<std::int64_t>(0, target - gap); j <= std::min(frames - 1, target + gap); ++j) {
      if (j != target) candidates.push_back(j);
    }
    const std::int64_t source = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
    const auto t = static_cast<std::size_t>(target), s = static_cast<std::size_t>(source);
    batch.push_back({scene.frames[s].cast<float>(), scene.frames[t].cast<float>(),
                     geometry::relative_pose(scene.poses[t], scene.poses[s]), scene.K});
  }
  return batch;
}

ForwardNoise forward_noise(const RunConfig& cfg) { return ForwardNoise{cfg.diffusion.variance_preserving}; }

TrainingState init_training(const RunConfig& cfg) {
  TrainingState st;
  st.model = std::make_unique<Denoiser<float>>(cfg.model, derive_seed(cfg.seed, 11));
  st.trainer = std::make_unique<Trainer<float>>(*st.model, cosine_schedule(cfg.diffusion.steps), forward_noise(cfg),
                                                cfg.training.adam, derive_seed(cfg.seed, 12));
  st.data_rng = Rng(derive_seed(cfg.seed, 13));
  return st;
}

TrainingState resume_training(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  const auto ckpt = read_checkpoint<float>(checkpoint);
  if (!(ckpt.header.model == cfg.model)) throw InvalidValue("checkpoint model architecture differs from the config");
  if (ckpt.header.diffusion_steps != cfg.diffusion.steps ||
      ckpt.header.variance_preserving != cfg.diffusion.variance_preserving) {
    throw InvalidValue("checkpoint diffusion settings differ from the config");
  }
  TrainingState st;
  st.model = std::make_unique<Denoiser<float>>(load_model(ckpt));
  st.trainer = std::make_unique<Trainer<float>>(*st.model, cosine_schedule(cfg.diffusion.steps), forward_noise(cfg),
                                                cfg.training.adam, 0);
  load_optimizer(ckpt, *st.model, st.trainer->optimizer());
  st.trainer->rng().set_state(ckpt.header.rng_state);
  if (!ckpt.header.extra.contains("data_rng")) throw FormatError(checkpoint.string() + ": no data RNG state");
  st.data_rng.set_state(ckpt.header.extra.at("data_rng").get<std::string>());
  return st;
}

void save_training(const std::filesystem::path& path, const TrainingState& state, const RunConfig& cfg) {
  CheckpointHeader h;
  h.diffusion_steps = cfg.diffusion.steps;
  h.variance_preserving = cfg.diffusion.variance_preserving;
  h.rng_state = state.trainer->rng().state();
  h.extra = {{"data_rng", state.data_rng.state()}, {"config_hash", config_hash(cfg)}};
  save_checkpoint(path, *state.model, &state.trainer->optimizer(), h);
}

std::vector<double> train(TrainingState& state, const RunConfig& cfg, const PairSampler& pairs,
                          const StepCallback& on_step) {
  std::vector<double> losses;
  auto& opt = state.trainer->optimizer();
  while (static_cast<std::size_t>(opt.steps_taken()) < cfg.training.steps) {
    const auto batch = pairs.draw(cfg.training.batch_size, state.data_rng);
    const double loss = state.trainer->train_step(batch);
    losses.push_back(loss);
    if (on_step) on_step(static_cast<std::size_t>(opt.steps_taken()), loss);
  }
  return losses;
}

sequence::GenerationContext generation_context(const Denoiser<float>& model, const RunConfig& cfg) {
  return {model, sequence::inference_schedule(cfg.diffusion.steps, cfg.sampler), cfg.sampler, forward_noise(cfg),
          config_hash(cfg)};
}

}  // namespace posediff::pipeline
