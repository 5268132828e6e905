#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "posediff/config.hpp"
#include "posediff/denoiser.hpp"
#include "posediff/scenes.hpp"
#include "posediff/sequence.hpp"

namespace posediff::pipeline {

/// Draws (source, target) pairs from scene sequences: a uniform scene, a
/// uniform target frame, then a uniform source among the other frames within
/// `max_gap` of it (any frame when 0).
class PairSampler {
 public:
  PairSampler(const std::vector<scenes::SceneData>& scenes, std::size_t max_gap);
  std::vector<TrainingExample<float>> draw(std::size_t count, Rng& rng) const;

 private:
  const std::vector<scenes::SceneData>& scenes_;
  std::size_t max_gap_;
};

/// Model, optimizer state and RNG streams of one training run.
struct TrainingState {
  std::unique_ptr<Denoiser<float>> model;
  std::unique_ptr<Trainer<float>> trainer;
  Rng data_rng;
};

/// Fresh state seeded from cfg.seed.
TrainingState init_training(const RunConfig& cfg);
/// Resumes from a checkpoint written by save_training.
TrainingState resume_training(const RunConfig& cfg, const std::filesystem::path& checkpoint);
void save_training(const std::filesystem::path& path, const TrainingState& state, const RunConfig& cfg);

using StepCallback = std::function<void(std::size_t step, double loss)>;

/// Runs training until cfg.training.steps updates have been applied in total;
/// returns the loss of every step run here.
std::vector<double> train(TrainingState& state, const RunConfig& cfg, const PairSampler& pairs,
                          const StepCallback& on_step = {});

ForwardNoise forward_noise(const RunConfig& cfg);
sequence::GenerationContext generation_context(const Denoiser<float>& model, const RunConfig& cfg);

}  // namespace posediff::pipeline
