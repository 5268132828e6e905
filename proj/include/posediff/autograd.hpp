#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "posediff/tensor.hpp"

namespace posediff {

namespace detail {

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;  // registration order of the producing primitive
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad, accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Tensor<S>& grad_buffer() {
    if (grad.numel() != value.numel()) grad = Tensor<S>(value.shape());
    return grad;
  }
};

std::uint64_t next_sequence_number();
bool& grad_mode_flag();

}  // namespace detail

/// Whether primitives record themselves for differentiation on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a tensor participating (optionally) in reverse-mode differentiation.
/// Copies share the underlying node.
template <typename S>
class Var {
 public:
  using Node = detail::Node<S>;

  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor<S> value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var parameter(Tensor<S> value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  S item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad.numel() == node_->value.numel() && node_->value.numel() > 0; }
  /// Accumulated gradient; zeros if nothing has flowed into this tensor.
  const Tensor<S>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<S>(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates the result of a primitive. The backward closure is kept only when
/// recording is enabled and at least one parent requires gradients.
template <typename S>
Var<S> make_result(Tensor<S> value, const char* op, std::vector<Var<S>> parents,
                   std::function<void(detail::Node<S>&)> backward) {
  auto n = std::make_shared<detail::Node<S>>();
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any && grad_enabled()) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->seq = detail::next_sequence_number();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var<S>(std::move(n));
}

/// Ordered record of the primitive applications reachable from a root, sorted
/// by registration order.
template <typename S>
class Tape {
 public:
  explicit Tape(const Var<S>& root);

  const std::vector<detail::Node<S>*>& records() const { return records_; }

  /// Seeds the root gradient with ones and runs every record in exact reverse
  /// registration order. Intermediate gradients are released as they are consumed.
  void run_backward();

 private:
  std::shared_ptr<detail::Node<S>> root_;
  std::vector<detail::Node<S>*> records_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
template <typename S>
void backward(const Var<S>& loss);

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// where the scalar objective is sum(r * f(x)) for a fixed pseudo-random r and the
/// numeric gradient uses central differences.
double finite_diff_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                         double step);

}  // namespace posediff
