#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posediff/attention.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/geometry.hpp"
#include "posediff/optim.hpp"
#include "posediff/rng.hpp"

namespace posediff {

enum class AttentionMode {
  epipolar,    // logits reweighted by the epipolar weight matrix
  cross_view,  // ablation: plain cross-view attention, weights ignored
};

/// Architecture of the conditional UNet. Level l runs at image_size / 2^l with
/// base_channels * channel_multiples[l] channels; the middle block runs one level
/// below the last, at the last level's width.
struct DenoiserConfig {
  std::size_t image_size = 16;
  std::size_t in_channels = 3;
  std::size_t base_channels = 32;
  std::vector<std::size_t> channel_multiples{1, 2};
  std::size_t res_blocks = 1;
  std::vector<std::size_t> attention_resolutions{8, 4};
  std::size_t head_channels = 16;
  std::size_t groups = 8;
  AttentionMode attention = AttentionMode::epipolar;

  /// Throws InvalidConfig when the architecture cannot be built.
  void validate() const;

  std::size_t levels() const { return channel_multiples.size(); }
  /// Resolution of level l in [0, levels()]; levels() is the middle block.
  std::size_t resolution(std::size_t level) const { return image_size >> level; }
  std::size_t channels(std::size_t level) const;
  bool has_attention(std::size_t level) const;
  /// Levels carrying attention, in increasing level order (decreasing resolution).
  std::vector<std::size_t> attention_levels() const;
  std::size_t time_embedding_channels() const { return 4 * base_channels; }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Closed-form parameter count of the architecture described by `cfg`.
///
///   conv(i,o,k) = o*i*k^2 + o      norm(c) = 2c      linear(i,o) = i*o + o
///   res(i,o)    = norm(i) + conv(i,o,3) + linear(4b,2o) + norm(o) + conv(o,o,3)
///                 + [i != o] conv(i,o,1)
///   attn(c)     = norm(c) + 4c^2 (self) + 2 norm(c) + 4c^2 (cross-view)
///
///   total = linear(b,4b) + linear(4b,4b) + conv(in,c0,3)
///         + sum_l [res chain into c_l, attn(c_l) if attended, conv(c_l,c_l,3)]
///         + 2 res(cL,cL) + attn(cL) if attended
///         + sum_l [res(c_up + c_l, c_l) + (n-1) res(c_l,c_l), attn(c_l) if attended]
///         + norm(c0) + conv(c0,in,3)
///         + conv(in,c0,3) + sum_{l=1..L} [conv(c_{l-1},c_l,3) + conv(c_l,c_l,3)]
std::size_t parameter_count(const DenoiserConfig& cfg);

/// Sinusoidal embedding of (original) timesteps: (N, dim), cos half then sin half.
template <typename S>
Tensor<S> timestep_embedding(std::span<const std::size_t> timesteps, std::size_t dim);

/// Conditional epsilon-predictor: a UNet with self-attention followed by
/// epipolar (or cross-view) attention at every attention resolution, plus a
/// strided-convolution source-view encoder trained jointly.
template <typename S>
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Var<S>>>& named_parameters() const { return params_; }
  std::vector<Var<S>> parameters() const;
  std::size_t parameter_count() const;

  /// x_src: (N, C, H, W) in [-1, 1]. One feature map per attention level, in
  /// attention_levels() order, with the UNet's channel width at that level.
  std::vector<Var<S>> encode_source(const Var<S>& x_src) const;

  /// Predicts the noise in x_t (N, C, H, W). `timesteps` holds one original
  /// timestep per batch element; `weights` one (N, L, L) matrix per attention
  /// level (may be empty in cross-view mode).
  Var<S> denoise(const Var<S>& x_t, std::span<const std::size_t> timesteps, const std::vector<Var<S>>& source_features,
                 const std::vector<Var<S>>& weights) const;

  /// Per-level (N, L, L) weight matrices for target->source relative poses with
  /// image-resolution intrinsics K.
  std::vector<Var<S>> weight_matrices(std::span<const geometry::RelativePose> target_to_source,
                                      std::span<const geometry::Mat3> K) const;

  /// Overwrites parameter values by name; throws FormatError on unknown names or shapes.
  void load_parameters(const std::vector<std::pair<std::string, Tensor<S>>>& values);

 private:
  struct Conv {
    Var<S> w, b;
    std::size_t stride = 1, pad = 1;
  };
  struct Norm {
    Var<S> gamma, beta;
  };
  struct Linear {
    Var<S> w, b;
  };
  struct ResBlock {
    Norm norm1;
    Conv conv1;
    Linear modulation;
    Norm norm2;
    Conv conv2;
    bool has_skip = false;
    Conv skip;
  };
  struct AttentionPair {
    Norm self_norm;
    AttentionParams<S> self;
    Norm target_norm, source_norm;
    AttentionParams<S> cross;
  };

  Var<S> add_param(const std::string& name, Tensor<S> value);
  Conv make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                 bool zero = false);
  Norm make_norm(const std::string& name, std::size_t c);
  Linear make_linear(const std::string& name, std::size_t in, std::size_t out);
  ResBlock make_res(const std::string& name, std::size_t in, std::size_t out);
  AttentionPair make_attention(const std::string& name, std::size_t c);

  Var<S> conv(const Conv& c, const Var<S>& x) const;
  Var<S> norm(const Norm& n, const Var<S>& x) const;
  Var<S> linear(const Linear& l, const Var<S>& x) const;
  Var<S> res(const ResBlock& r, const Var<S>& x, const Var<S>& emb) const;
  Var<S> attend(const AttentionPair& a, const Var<S>& x, const Var<S>& source, const Var<S>* weights) const;

  DenoiserConfig cfg_;
  Rng init_rng_;
  std::vector<std::pair<std::string, Var<S>>> params_;

  Linear time1_, time2_;
  Conv in_conv_;
  std::vector<std::vector<ResBlock>> enc_res_;
  std::vector<AttentionPair> enc_attn_;  // indexed by level, empty when unattended
  std::vector<Conv> down_;
  ResBlock mid1_, mid2_;
  AttentionPair mid_attn_;
  std::vector<std::vector<ResBlock>> dec_res_;
  std::vector<AttentionPair> dec_attn_;
  Norm out_norm_;
  Conv out_conv_;
  Conv src_stem_;
  std::vector<Conv> src_down_, src_conv_;
};

/// One (source view, target view) training pair.
template <typename S>
struct TrainingExample {
  Tensor<S> source;  // (C, H, W)
  Tensor<S> target;  // (C, H, W)
  geometry::RelativePose target_to_source;
  geometry::Mat3 K;
};

/// Optimizes a denoiser on the epsilon-prediction objective.
template <typename S>
class Trainer {
 public:
  Trainer(Denoiser<S>& model, NoiseSchedule schedule, ForwardNoise form, AdamHyper hyper, std::uint64_t seed);

  /// Samples t ~ U[1, T] and eps ~ N(0, I) per example, noises the targets,
  /// predicts eps and applies one Adam update. Returns the batch loss.
  double train_step(std::span<const TrainingExample<S>> batch);

  /// Loss under caller-provided timesteps and noises, without updating anything.
  double evaluate(std::span<const TrainingExample<S>> batch, std::span<const std::size_t> timesteps,
                  std::span<const Tensor<S>> noises) const;

  Rng& rng() { return rng_; }
  Adam<S>& optimizer() { return optimizer_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ForwardNoise forward_noise() const { return form_; }

 private:
  Var<S> batch_loss(std::span<const TrainingExample<S>> batch, std::span<const std::size_t> timesteps,
                    std::span<const Tensor<S>> noises) const;

  Denoiser<S>& model_;
  NoiseSchedule schedule_;
  ForwardNoise form_;
  Adam<S> optimizer_;
  Rng rng_;
};

/// Stacks (C, H, W) tensors into (N, C, H, W).
template <typename S>
Tensor<S> stack_images(std::span<const Tensor<S>> images);

}  // namespace posediff
