#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "posediff/denoiser.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/geometry.hpp"
#include "posediff/image.hpp"
#include "posediff/rng.hpp"

/// Frames are indexed from 0; frame 0 is the given input view.
namespace posediff::sequence {

using geometry::CameraPose;

/// Frames a target i may condition on: [max(0, i - window), i - 1], all prior
/// frames when window is 0.
std::vector<std::size_t> prior_window(std::size_t target, std::size_t window);

/// Uniform draw from `prior`. Throws EmptyHistory when it is empty.
std::size_t sample_source_view(std::span<const std::size_t> prior, Rng& rng);

/// x_T and the backward noises of respaced steps k = steps .. refresh_tail + 1,
/// shared by every frame of a sequence. Steps k <= refresh_tail draw fresh noise.
struct NoiseBank {
  std::uint64_t seed = 0;
  Shape shape;
  std::size_t steps = 0;
  std::size_t refresh_tail = 0;
  Tensor<float> x_T;
  std::vector<Tensor<float>> noises;  // noises[j] belongs to step steps - j

  bool covers(std::size_t k) const { return k > refresh_tail && k <= steps; }
  const Tensor<float>& noise(std::size_t k) const;
};

/// Throws StepOutOfRange when refresh_tail > steps.
NoiseBank make_noise_bank(std::uint64_t seed, std::size_t steps, std::size_t refresh_tail, const Shape& shape);

struct FrameSequence {
  std::vector<Image> frames;
  std::vector<CameraPose> poses;
  std::uint64_t seed = 0;
  std::string config_hash;
  /// source_log[f][s]: source frame drawn at backward step s (counting from the
  /// first, noisiest step) while generating frame f; empty for given frames.
  std::vector<std::vector<std::size_t>> source_log;
};

/// Draw probabilities proportional to 1 / (|c_anchor - c_target| + 1e-6) over
/// camera centres. Throws TooFewAnchors with fewer than 2 anchors.
std::vector<double> interpolation_weights(std::span<const CameraPose> anchors, const CameraPose& target);

/// Index drawn from unnormalized nonnegative weights.
std::size_t sample_weighted(std::span<const double> weights, Rng& rng);

struct GenerationContext {
  const Denoiser<float>& model;
  NoiseSchedule schedule;  // respaced inference schedule
  SamplerConfig sampler;
  ForwardNoise form;  // the training forward process, for the x0 estimate
  std::string config_hash;
};

/// Builds the respaced inference schedule of a T-step cosine training schedule.
NoiseSchedule inference_schedule(std::size_t training_steps, const SamplerConfig& sampler);

/// Autoregressive generation: frame 0 is x1 verbatim, then every later pose is
/// sampled with stochastic conditioning on prior frames and the shared noise bank.
/// Throws PoseCountMismatch for an empty pose list and InvalidPose when the
/// poses do not share intrinsics.
FrameSequence generate_sequence(const Image& x1, const std::vector<CameraPose>& poses, const GenerationContext& ctx,
                                std::uint64_t seed);

/// Samples each target pose, drawing the source anchor per backward step with
/// interpolation_weights. The result holds only the target frames.
FrameSequence interpolate_views(const std::vector<std::pair<Image, CameraPose>>& anchors,
                                const std::vector<CameraPose>& targets, const GenerationContext& ctx,
                                std::uint64_t seed);

/// Independent single-source next-view samples, batched through the network.
/// sources[n] is seen from the camera with target_to_source[n] relative pose.
std::vector<Image> sample_views(const std::vector<Image>& sources,
                                const std::vector<geometry::RelativePose>& target_to_source, const geometry::Mat3& K,
                                const GenerationContext& ctx, std::uint64_t seed);

/// Float image tensors for the network.
Tensor<float> to_network(const Image& image);
Image from_network(const Tensor<float>& x);

}  // namespace posediff::sequence
