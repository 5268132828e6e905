#include "posediff/optim.hpp"

#include <cmath>

namespace posediff {

template <typename S>
void adam_step(Tensor<S>& param, const Tensor<S>& grad, AdamMoments<S>& state, std::int64_t step,
               const AdamHyper& hyper) {
  if (state.m.numel() == 0) state.m = Tensor<S>(param.shape());
  if (state.v.numel() == 0) state.v = Tensor<S>(param.shape());
  if (grad.shape() != param.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ShapeMismatch("adam: param " + shape_str(param.shape()) + ", grad " + shape_str(grad.shape()) +
                        ", m " + shape_str(state.m.shape()) + ", v " + shape_str(state.v.shape()));
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const S b1 = static_cast<S>(hyper.beta1), b2 = static_cast<S>(hyper.beta2);
  S* p = param.raw();
  S* m = state.m.raw();
  S* v = state.v.raw();
  const S* g = grad.raw();
  for (std::size_t i = 0; i < param.numel(); ++i) {
    m[i] = b1 * m[i] + (S(1) - b1) * g[i];
    v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
    const double mhat = static_cast<double>(m[i]) / c1;
    const double vhat = static_cast<double>(v[i]) / c2;
    p[i] -= static_cast<S>(hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
  }
}

template <typename S>
Adam<S>::Adam(std::vector<Var<S>> params, AdamHyper hyper)
    : params_(std::move(params)), hyper_(hyper), moments_(params_.size()) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    moments_[i].m = Tensor<S>(params_[i].shape());
    moments_[i].v = Tensor<S>(params_[i].shape());
  }
}

template <typename S>
void Adam<S>::step() {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) {
      // zero gradient: moments still decay
      adam_step(p.mutable_value(), Tensor<S>(p.shape()), moments_[i], steps_, hyper_);
    } else {
      adam_step(p.mutable_value(), p.grad(), moments_[i], steps_, hyper_);
    }
  }
  zero_grad();
}

template <typename S>
void Adam<S>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adam_step<float>(Tensor<float>&, const Tensor<float>&, AdamMoments<float>&, std::int64_t,
                               const AdamHyper&);
template void adam_step<double>(Tensor<double>&, const Tensor<double>&, AdamMoments<double>&, std::int64_t,
                                const AdamHyper&);
template class Adam<float>;
template class Adam<double>;

}  // namespace posediff
