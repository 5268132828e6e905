#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "posediff/autograd.hpp"

namespace posediff {

/// Per-step scalars of a DDPM chain, 1-based: step t in [1, steps()].
/// alpha_bar(0) is 1 by convention.
class NoiseSchedule {
 public:
  /// Builds alphas = 1 - betas and alpha_bars as their running product.
  static NoiseSchedule from_betas(std::vector<double> betas);

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const { return betas_.at(index(t)); }
  double alpha(std::size_t t) const { return alphas_.at(index(t)); }
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }
  /// Timestep of the training chain that step t corresponds to (identity unless respaced).
  std::size_t original_timestep(std::size_t t) const { return timesteps_.at(index(t)); }
  std::size_t original_steps() const { return original_steps_; }

  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }
  std::span<const std::size_t> timesteps() const { return timesteps_; }

  /// DDPM posterior variance ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t.
  double posterior_variance(std::size_t t) const;

  /// Throws StepOutOfRange unless 1 <= t <= steps().
  void check_step(std::size_t t) const;

 private:
  friend NoiseSchedule respace(const NoiseSchedule& sched, std::size_t inference_steps);
  std::size_t index(std::size_t t) const {
    check_step(t);
    return t - 1;
  }

  std::vector<double> betas_, alphas_, alpha_bars_;
  std::vector<std::size_t> timesteps_;
  std::size_t original_steps_ = 0;
};

/// abar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2), s = 0.008,
/// betas clipped at 0.999.
NoiseSchedule cosine_schedule(std::size_t T);

/// Evenly strided subsequence t_k = floor(k T / n), k = 1..n. The retained
/// alpha_bars equal the originals; betas are recomputed from their ratios.
NoiseSchedule respace(const NoiseSchedule& sched, std::size_t inference_steps);

/// Noise coefficient of the forward process. The verbatim form multiplies the
/// noise by (1 - alpha); the variance-preserving form by sqrt(1 - alpha).
struct ForwardNoise {
  bool variance_preserving = false;
  double coefficient(double one_minus_alpha) const;
};

/// x_t = sqrt(abar_t) x0 + c(1 - abar_t) eps
template <typename S>
Tensor<S> forward_marginal(const Tensor<S>& x0, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched,
                           ForwardNoise form = {});

/// x_t = sqrt(alpha_t) x_{t-1} + c(1 - alpha_t) eps
template <typename S>
Tensor<S> forward_step(const Tensor<S>& x_prev, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched,
                       ForwardNoise form = {});

/// mu = (x_t - ((1 - alpha_t) / sqrt(1 - abar_t)) eps_pred) / sqrt(alpha_t)
template <typename S>
Tensor<S> mu_from_eps(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const NoiseSchedule& sched);

/// x_{t-1} = mu + sigma_t noise with sigma_t^2 the posterior variance; at t = 1
/// the noise is ignored.
template <typename S>
Tensor<S> backward_step(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const Tensor<S>& noise,
                        const NoiseSchedule& sched);

/// x0 implied by a noise prediction: (x_t - c(1 - abar_t) eps) / sqrt(abar_t).
template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const NoiseSchedule& sched,
                     ForwardNoise form = {});

/// Mean of q(x_{t-1} | x_t, x0):
/// sqrt(abar_{t-1}) beta_t / (1 - abar_t) x0 + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) x_t.
template <typename S>
Tensor<S> posterior_mean(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& x0, const NoiseSchedule& sched);

/// backward_step with the mean taken through the x0 estimate clipped to [-1, 1].
/// Equals backward_step (variance-preserving form) whenever no entry is clipped.
template <typename S>
Tensor<S> backward_step_clipped(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const Tensor<S>& noise,
                                const NoiseSchedule& sched, ForwardNoise form = {});

/// Mean of squared differences.
template <typename S>
Var<S> diffusion_loss(const Var<S>& eps_true, const Var<S>& eps_pred);

struct SamplerConfig {
  std::size_t inference_steps = 250;
  /// Backward steps at the end of each chain whose noise is drawn fresh per frame.
  std::size_t refresh_tail = 100;
  /// Conditioning window over prior frames; 0 means all prior frames.
  std::size_t window = 0;
  /// Draw the source frame once per frame instead of once per backward step.
  bool per_frame_source = false;
  /// Sample through the clipped x0 estimate (backward_step_clipped).
  bool clip_denoised = true;

  /// Throws InvalidConfig on inconsistent values.
  void validate(std::size_t training_steps) const;
};

}  // namespace posediff
