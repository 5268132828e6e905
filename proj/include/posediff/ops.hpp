#pragma once

#include <cstddef>
#include <vector>

#include "posediff/autograd.hpp"

/// Differentiable primitives. Every function throws ShapeMismatch (naming both
/// shapes) on incompatible inputs. Reductions inside each output element run in a
/// fixed sequential order, so results do not depend on the thread count.
namespace posediff::ops {

/// Elementwise a + b. `b` may broadcast into `a`: same rank, each extent equal or 1.
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
/// Hadamard product with the same broadcasting rule as add.
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);

/// (M,K)x(K,N), (B,M,K)x(B,K,N) or (B,M,K)x(K,N) with the right operand shared across the batch.
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);

template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
template <typename S> Var<S> permute(const Var<S>& a, const std::vector<std::size_t>& axes);
template <typename S> Var<S> transpose(const Var<S>& a, std::size_t d0, std::size_t d1);

template <typename S> Var<S> softmax(const Var<S>& a, std::size_t axis);

/// x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), bias: (Cout) or undefined.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, std::size_t stride, std::size_t pad);

/// Half-pixel-centred bilinear resampling of (N,C,H,W) to (N,C,out_h,out_w), edges clamped.
template <typename S> Var<S> bilinear_resize(const Var<S>& x, std::size_t out_h, std::size_t out_w);

/// x: (N,C,...) normalized over each group of C/groups channels; gamma, beta: (C).
template <typename S>
Var<S> group_norm(const Var<S>& x, std::size_t groups, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5));

template <typename S> Var<S> silu(const Var<S>& a);

template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
template <typename S> Var<S> slice(const Var<S>& a, std::size_t axis, std::size_t begin, std::size_t end);

template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);

}  // namespace posediff::ops
