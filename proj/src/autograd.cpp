#include "posediff/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "posediff/ops.hpp"
#include "posediff/rng.hpp"

namespace posediff {

namespace detail {

std::uint64_t next_sequence_number() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

template <typename S>
Tape<S>::Tape(const Var<S>& root) : root_(root.node()) {
  std::unordered_set<const detail::Node<S>*> seen;
  std::vector<detail::Node<S>*> stack{root_.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || n->is_leaf || !seen.insert(n).second) continue;
    records_.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(records_.begin(), records_.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
}

template <typename S>
void Tape<S>::run_backward() {
  root_->grad_buffer().fill(S(1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    detail::Node<S>& n = **it;
    if (n.grad.numel() == n.value.numel() && n.backward) n.backward(n);
    n.grad = Tensor<S>();
  }
}

template <typename S>
void backward(const Var<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw NotScalar("loss must hold exactly one element, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw DisconnectedLoss("loss does not depend on any tensor requiring gradients");
  if (loss.node()->is_leaf) {
    loss.node()->grad_buffer().fill(S(1));
    return;
  }
  Tape<S> tape(loss);
  tape.run_backward();
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

double finite_diff_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                         double step) {
  Tensor<double> probe;
  {
    NoGradGuard ng;
    const auto y = f(Var<double>::constant(x));
    probe = Tensor<double>(y.shape());
    Rng rng(0x5eedF00Dull);
    for (auto& v : probe.data()) v = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  const auto r = Var<double>::constant(probe);
  auto objective = [&](const Var<double>& in) { return ops::sum(ops::mul(f(in), r)); };

  auto leaf = Var<double>::parameter(x);
  backward(objective(leaf));
  const Tensor<double> analytic = leaf.grad();

  NoGradGuard ng;
  double worst = 0.0;
  Tensor<double> probe_x = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe_x[i];
    const volatile double hi = orig + step;
    const volatile double lo = orig - step;
    probe_x[i] = hi;
    const Tensor<double> up = f(Var<double>::constant(probe_x)).value();
    probe_x[i] = lo;
    const Tensor<double> down = f(Var<double>::constant(probe_x)).value();
    probe_x[i] = orig;
    // difference before reducing keeps cancellation out of the sum
    double diff = 0.0;
    for (std::size_t j = 0; j < up.numel(); ++j) diff += probe[j] * (up[j] - down[j]);
    const double numeric = diff / (hi - lo);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace posediff
