#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "posediff/autograd.hpp"

namespace posediff {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter tensor.
template <typename S>
struct AdamMoments {
  Tensor<S> m;
  Tensor<S> v;
};

/// One bias-corrected Adam update of `param` in place. `step` is the 1-based
/// update count after this step. Throws ShapeMismatch when shapes disagree.
template <typename S>
void adam_step(Tensor<S>& param, const Tensor<S>& grad, AdamMoments<S>& state, std::int64_t step,
               const AdamHyper& hyper);

template <typename S>
class Adam {
 public:
  Adam(std::vector<Var<S>> params, AdamHyper hyper);

  /// Applies one update using the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  std::int64_t steps_taken() const { return steps_; }
  void set_steps_taken(std::int64_t s) { steps_ = s; }
  const AdamHyper& hyper() const { return hyper_; }
  std::vector<AdamMoments<S>>& moments() { return moments_; }
  const std::vector<AdamMoments<S>>& moments() const { return moments_; }

 private:
  std::vector<Var<S>> params_;
  AdamHyper hyper_;
  std::vector<AdamMoments<S>> moments_;
  std::int64_t steps_ = 0;
};

}  // namespace posediff
