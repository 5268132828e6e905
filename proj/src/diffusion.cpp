#include "posediff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "posediff/ops.hpp"

namespace posediff {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.betas_ = std::move(betas);
  const std::size_t n = s.betas_.size();
  s.alphas_.resize(n);
  s.alpha_bars_.resize(n);
  s.timesteps_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    running *= s.alphas_[i];
    s.alpha_bars_[i] = running;
    s.timesteps_[i] = i + 1;
  }
  s.original_steps_ = n;
  return s;
}

void NoiseSchedule::check_step(std::size_t t) const {
  if (t < 1 || t > betas_.size()) {
    throw StepOutOfRange("step " + std::to_string(t) + " outside [1, " + std::to_string(betas_.size()) + "]");
  }
}

double NoiseSchedule::posterior_variance(std::size_t t) const {
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

NoiseSchedule cosine_schedule(std::size_t T) {
  if (T < 1) throw StepOutOfRange("cosine schedule needs T >= 1");
  constexpr double s = 0.008;
  const double Td = static_cast<double>(T);
  auto f = [&](double t) {
    const double c = std::cos(((t / Td + s) / (1.0 + s)) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> betas(T);
  double prev = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double abar = f(static_cast<double>(t)) / f0;
    betas[t - 1] = std::min(1.0 - abar / prev, 0.999);
    prev = abar;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

NoiseSchedule respace(const NoiseSchedule& sched, std::size_t inference_steps) {
  const std::size_t T = sched.steps();
  if (inference_steps < 1 || inference_steps > T) {
    throw StepOutOfRange("inference steps " + std::to_string(inference_steps) + " outside [1, " + std::to_string(T) +
                         "]");
  }
  NoiseSchedule out;
  out.original_steps_ = sched.original_steps_;
  double prev = 1.0;
  for (std::size_t k = 1; k <= inference_steps; ++k) {
    const std::size_t t = (k * T) / inference_steps;
    const double abar = sched.alpha_bar(t);
    const double beta = 1.0 - abar / prev;
    out.betas_.push_back(beta);
    out.alphas_.push_back(1.0 - beta);
    out.alpha_bars_.push_back(abar);
    out.timesteps_.push_back(sched.original_timestep(t));
    prev = abar;
  }
  return out;
}

double ForwardNoise::coefficient(double one_minus_alpha) const {
  return variance_preserving ? std::sqrt(one_minus_alpha) : one_minus_alpha;
}

namespace {

template <typename S>
void check_same(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename S>
Tensor<S> affine(const Tensor<S>& a, double ca, const Tensor<S>& b, double cb) {
  Tensor<S> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    out[i] = static_cast<S>(ca * static_cast<double>(a[i]) + cb * static_cast<double>(b[i]));
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> forward_marginal(const Tensor<S>& x0, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched,
                           ForwardNoise form) {
  check_same(x0, eps, "forward_marginal");
  sched.check_step(t);
  const double abar = sched.alpha_bar(t);
  return affine(x0, std::sqrt(abar), eps, form.coefficient(1.0 - abar));
}

template <typename S>
Tensor<S> forward_step(const Tensor<S>& x_prev, std::size_t t, const Tensor<S>& eps, const NoiseSchedule& sched,
                       ForwardNoise form) {
  check_same(x_prev, eps, "forward_step");
  const double a = sched.alpha(t);
  return affine(x_prev, std::sqrt(a), eps, form.coefficient(1.0 - a));
}

template <typename S>
Tensor<S> mu_from_eps(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const NoiseSchedule& sched) {
  check_same(x_t, eps_pred, "mu_from_eps");
  const double a = sched.alpha(t);
  const double abar = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(a);
  return affine(x_t, inv, eps_pred, -inv * (1.0 - a) / std::sqrt(1.0 - abar));
}

template <typename S>
Tensor<S> backward_step(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const Tensor<S>& noise,
                        const NoiseSchedule& sched) {
  check_same(x_t, noise, "backward_step");
  Tensor<S> mu = mu_from_eps(x_t, t, eps_pred, sched);
  if (t == 1) return mu;
  const double sigma = std::sqrt(sched.posterior_variance(t));
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    mu[i] = static_cast<S>(static_cast<double>(mu[i]) + sigma * static_cast<double>(noise[i]));
  }
  return mu;
}

template <typename S>
Tensor<S> predict_x0(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const NoiseSchedule& sched,
                     ForwardNoise form) {
  check_same(x_t, eps_pred, "predict_x0");
  const double abar = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(abar);
  return affine(x_t, inv, eps_pred, -inv * form.coefficient(1.0 - abar));
}

template <typename S>
Tensor<S> posterior_mean(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& x0, const NoiseSchedule& sched) {
  check_same(x_t, x0, "posterior_mean");
  const double abar = sched.alpha_bar(t), abar_prev = sched.alpha_bar(t - 1);
  const double c0 = std::sqrt(abar_prev) * sched.beta(t) / (1.0 - abar);
  const double ct = std::sqrt(sched.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar);
  return affine(x0, c0, x_t, ct);
}

template <typename S>
Tensor<S> backward_step_clipped(const Tensor<S>& x_t, std::size_t t, const Tensor<S>& eps_pred, const Tensor<S>& noise,
                                const NoiseSchedule& sched, ForwardNoise form) {
  check_same(x_t, noise, "backward_step_clipped");
  Tensor<S> x0 = predict_x0(x_t, t, eps_pred, sched, form);
  for (auto& v : x0.data()) v = std::clamp(v, S(-1), S(1));
  Tensor<S> mu = posterior_mean(x_t, t, x0, sched);
  if (t == 1) return mu;
  const double sigma = std::sqrt(sched.posterior_variance(t));
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    mu[i] = static_cast<S>(static_cast<double>(mu[i]) + sigma * static_cast<double>(noise[i]));
  }
  return mu;
}

template <typename S>
Var<S> diffusion_loss(const Var<S>& eps_true, const Var<S>& eps_pred) {
  if (eps_true.shape() != eps_pred.shape()) {
    throw ShapeMismatch("diffusion_loss: " + shape_str(eps_true.shape()) + " vs " + shape_str(eps_pred.shape()));
  }
  const auto diff = ops::sub(eps_pred, eps_true);
  return ops::mean(ops::mul(diff, diff));
}

void SamplerConfig::validate(std::size_t training_steps) const {
  if (inference_steps < 1 || inference_steps > training_steps) {
    throw InvalidConfig("inference_steps must lie in [1, " + std::to_string(training_steps) + "]");
  }
  if (refresh_tail > inference_steps) throw InvalidConfig("refresh tail t' must not exceed inference_steps");
}

#define POSEDIFF_INSTANTIATE_DIFFUSION(S)                                                                        \
  template Tensor<S> forward_marginal<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const NoiseSchedule&,   \
                                         ForwardNoise);                                                         \
  template Tensor<S> forward_step<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const NoiseSchedule&,       \
                                     ForwardNoise);                                                             \
  template Tensor<S> mu_from_eps<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const NoiseSchedule&);       \
  template Tensor<S> backward_step<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const Tensor<S>&,          \
                                      const NoiseSchedule&);                                                    \
  template Tensor<S> predict_x0<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const NoiseSchedule&,          \
                                   ForwardNoise);                                                               \
  template Tensor<S> posterior_mean<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const NoiseSchedule&);    \
  template Tensor<S> backward_step_clipped<S>(const Tensor<S>&, std::size_t, const Tensor<S>&, const Tensor<S>&,  \
                                              const NoiseSchedule&, ForwardNoise);                              \
  template Var<S> diffusion_loss<S>(const Var<S>&, const Var<S>&);

POSEDIFF_INSTANTIATE_DIFFUSION(float)
POSEDIFF_INSTANTIATE_DIFFUSION(double)

}  // namespace posediff
