#include "posediff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace posediff::ops {

namespace {

template <typename S>
using NodeT = detail::Node<S>;

template <typename S>
Tensor<S>* grad_of(NodeT<S>& n, std::size_t parent) {
  auto& p = n.parents[parent];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

template <typename S>
const Tensor<S>& value_of(NodeT<S>& n, std::size_t parent) {
  return n.parents[parent]->value;
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] != a[i] && b[i] != 1) return false;
  }
  return true;
}

// Visits every element of shape `sa`, passing its offset and the matching offset
// into a tensor of shape `sb` broadcast into `sa`. Row-major order.
template <typename Fn>
void broadcast_walk(const Shape& sa, const Shape& sb, Fn&& fn) {
  const std::size_t r = sa.size();
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> bstride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    bstride[i] = sb[i] == 1 ? 0 : s;
    s *= sb[i];
  }
  const std::size_t inner = sa[r - 1];
  const std::size_t inner_bs = bstride[r - 1];
  const std::size_t total = shape_numel(sa);
  if (total == 0) return;
  const std::size_t outer = total / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ib_base = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t ia = o * inner;
    for (std::size_t j = 0; j < inner; ++j) fn(ia + j, ib_base + j * inner_bs);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ib_base += bstride[d];
      if (idx[d] < sa[d]) break;
      ib_base -= bstride[d] * sa[d];
      idx[d] = 0;
    }
  }
}

template <typename S>
void check_binary(const Var<S>& a, const Var<S>& b, const char* op) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeMismatch(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " into " +
                        shape_str(a.shape()));
  }
}

// C(MxN) = A(MxK) * B(KxN), k-innermost accumulation per element.
template <typename S>
void gemm_nn(const S* A, const S* B, S* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    S* c = C + i * N;
    std::fill(c, c + N, S(0));
    const S* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const S av = a[k];
      const S* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C(MxK) += G(MxN) * B(KxN)^T
template <typename S>
void gemm_nt_acc(const S* G, const S* B, S* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const S* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const S* b = B + k * N;
      S acc = S(0);
      for (std::size_t j = 0; j < N; ++j) acc += g[j] * b[j];
      C[i * K + k] += acc;
    }
  }
}

// C(KxN) += A(MxK)^T * G(MxN), accumulated row k by row k.
template <typename S>
void gemm_tn_acc_row(const S* A, const S* G, S* crow, std::size_t k, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const S av = A[i * K + k];
    const S* g = G + i * N;
    for (std::size_t j = 0; j < N; ++j) crow[j] += av * g[j];
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_binary(a, b, "add");
  Tensor<S> out = a.value();
  const S* bv = b.value().raw();
  S* o = out.raw();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] += bv[i];
  } else {
    broadcast_walk(a.shape(), b.shape(), [&](std::size_t ia, std::size_t ib) { o[ia] += bv[ib]; });
  }
  return make_result<S>(std::move(out), "add", {a, b}, [](NodeT<S>& n) {
    const S* g = n.grad.raw();
    if (auto* ga = grad_of(n, 0)) {
      S* d = ga->raw();
      for (std::size_t i = 0; i < ga->numel(); ++i) d[i] += g[i];
    }
    if (auto* gb = grad_of(n, 1)) {
      S* d = gb->raw();
      broadcast_walk(n.value.shape(), gb->shape(), [&](std::size_t ia, std::size_t ib) { d[ib] += g[ia]; });
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_binary(a, b, "sub");
  Tensor<S> out = a.value();
  const S* bv = b.value().raw();
  S* o = out.raw();
  broadcast_walk(a.shape(), b.shape(), [&](std::size_t ia, std::size_t ib) { o[ia] -= bv[ib]; });
  return make_result<S>(std::move(out), "sub", {a, b}, [](NodeT<S>& n) {
    const S* g = n.grad.raw();
    if (auto* ga = grad_of(n, 0)) {
      S* d = ga->raw();
      for (std::size_t i = 0; i < ga->numel(); ++i) d[i] += g[i];
    }
    if (auto* gb = grad_of(n, 1)) {
      S* d = gb->raw();
      broadcast_walk(n.value.shape(), gb->shape(), [&](std::size_t ia, std::size_t ib) { d[ib] -= g[ia]; });
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_binary(a, b, "mul");
  Tensor<S> out = a.value();
  const S* bv = b.value().raw();
  S* o = out.raw();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.numel(); ++i) o[i] *= bv[i];
  } else {
    broadcast_walk(a.shape(), b.shape(), [&](std::size_t ia, std::size_t ib) { o[ia] *= bv[ib]; });
  }
  return make_result<S>(std::move(out), "mul", {a, b}, [](NodeT<S>& n) {
    const S* g = n.grad.raw();
    const S* av = value_of(n, 0).raw();
    const S* bv = value_of(n, 1).raw();
    const Shape& sb = value_of(n, 1).shape();
    if (auto* ga = grad_of(n, 0)) {
      S* d = ga->raw();
      broadcast_walk(n.value.shape(), sb, [&](std::size_t ia, std::size_t ib) { d[ia] += g[ia] * bv[ib]; });
    }
    if (auto* gb = grad_of(n, 1)) {
      S* d = gb->raw();
      broadcast_walk(n.value.shape(), sb, [&](std::size_t ia, std::size_t ib) { d[ib] += g[ia] * av[ia]; });
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return make_result<S>(std::move(out), "scale", {a}, [factor](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      S* d = ga->raw();
      for (std::size_t i = 0; i < ga->numel(); ++i) d[i] += g[i] * factor;
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  Tensor<S> out(a.shape());
  const S* x = a.value().raw();
  S* o = out.raw();
  for (std::size_t i = 0; i < out.numel(); ++i) o[i] = x[i] / (S(1) + std::exp(-x[i]));
  return make_result<S>(std::move(out), "silu", {a}, [](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      const S* x = value_of(n, 0).raw();
      S* d = ga->raw();
      for (std::size_t i = 0; i < ga->numel(); ++i) {
        const S s = S(1) / (S(1) + std::exp(-x[i]));
        d[i] += g[i] * s * (S(1) + x[i] * (S(1) - s));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// matmul

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok = (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) ||
                  (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) ||
                  (sa.size() == 3 && sb.size() == 2 && sa[2] == sb[0]);
  if (!ok) throw ShapeMismatch("matmul: " + shape_str(sa) + " x " + shape_str(sb));

  const std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  const std::size_t M = sa[sa.size() - 2];
  const std::size_t K = sa[sa.size() - 1];
  const std::size_t N = sb[sb.size() - 1];
  const bool shared_b = sb.size() == 2;
  Shape so = sa.size() == 3 ? Shape{batch, M, N} : Shape{M, N};
  Tensor<S> out(so);
  const S* A = a.value().raw();
  const S* B = b.value().raw();
  S* C = out.raw();

#pragma omp parallel for schedule(static) if (batch * M * K * N > 32768)
  for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
    gemm_nn(A + bi * M * K, B + (shared_b ? 0 : bi * K * N), C + bi * M * N, M, K, N);
  }

  return make_result<S>(std::move(out), "matmul", {a, b}, [batch, M, K, N, shared_b](NodeT<S>& n) {
    const S* G = n.grad.raw();
    const S* A = value_of(n, 0).raw();
    const S* B = value_of(n, 1).raw();
    if (auto* ga = grad_of(n, 0)) {
      S* dA = ga->raw();
#pragma omp parallel for schedule(static) if (batch * M * K * N > 32768)
      for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
        gemm_nt_acc(G + bi * M * N, B + (shared_b ? 0 : bi * K * N), dA + bi * M * K, M, K, N);
      }
    }
    if (auto* gb = grad_of(n, 1)) {
      S* dB = gb->raw();
      if (shared_b) {
#pragma omp parallel for schedule(static) if (batch * M * K * N > 32768)
        for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(K); ++k) {
          for (std::size_t bi = 0; bi < batch; ++bi) {
            gemm_tn_acc_row(A + bi * M * K, G + bi * M * N, dB + k * N, k, M, K, N);
          }
        }
      } else {
#pragma omp parallel for collapse(2) schedule(static) if (batch * M * K * N > 32768)
        for (std::ptrdiff_t bi = 0; bi < static_cast<std::ptrdiff_t>(batch); ++bi) {
          for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(K); ++k) {
            gemm_tn_acc_row(A + bi * M * K, G + bi * M * N, dB + bi * K * N + k * N, k, M, K, N);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// layout

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> out = a.value().reshaped(std::move(shape));
  return make_result<S>(std::move(out), "reshape", {a}, [](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      S* d = ga->raw();
      for (std::size_t i = 0; i < ga->numel(); ++i) d[i] += g[i];
    }
  });
}

namespace {

// For each output offset (row-major over out_shape), calls fn(out_off, in_off).
template <typename Fn>
void permute_walk(const Shape& in_shape, const std::vector<std::size_t>& axes, Fn&& fn) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t total = shape_numel(in_shape);
  if (total == 0) return;
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_s = stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t base = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(o + j, base + j * inner_s);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      base += stride[d];
      if (idx[d] < out_shape[d]) break;
      base -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename S>
Var<S> permute(const Var<S>& a, const std::vector<std::size_t>& axes) {
  const Shape& sa = a.shape();
  std::vector<std::size_t> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(sa.size());
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  if (sorted != iota) throw ShapeMismatch("permute: axes do not form a permutation of rank " + shape_str(sa));
  Shape so(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i) so[i] = sa[axes[i]];
  Tensor<S> out(so);
  const S* x = a.value().raw();
  S* o = out.raw();
  permute_walk(sa, axes, [&](std::size_t oo, std::size_t io) { o[oo] = x[io]; });
  return make_result<S>(std::move(out), "permute", {a}, [axes](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      S* d = ga->raw();
      permute_walk(ga->shape(), axes, [&](std::size_t oo, std::size_t io) { d[io] += g[oo]; });
    }
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a, std::size_t d0, std::size_t d1) {
  if (d0 >= a.shape().size() || d1 >= a.shape().size()) {
    throw ShapeMismatch("transpose: axes out of range for " + shape_str(a.shape()));
  }
  std::vector<std::size_t> axes(a.shape().size());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[d0], axes[d1]);
  return permute(a, axes);
}

// ---------------------------------------------------------------------------
// softmax

template <typename S>
Var<S> softmax(const Var<S>& a, std::size_t axis) {
  const Shape& sa = a.shape();
  if (axis >= sa.size()) throw ShapeMismatch("softmax: axis out of range for " + shape_str(sa));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t len = sa[axis];
  Tensor<S> out(sa);
  const S* x = a.value().raw();
  S* y = out.raw();
#pragma omp parallel for schedule(static) if (outer * len * inner > 65536)
  for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(outer); ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      S mx = x[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      S total = S(0);
      for (std::size_t k = 0; k < len; ++k) {
        const S e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= total;
    }
  }
  return make_result<S>(std::move(out), "softmax", {a}, [outer, inner, len](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      const S* y = n.value.raw();
      S* d = ga->raw();
#pragma omp parallel for schedule(static) if (outer * len * inner > 65536)
      for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(outer); ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          S dot = S(0);
          for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t at = base + k * inner;
            d[at] += y[at] * (g[at] - dot);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d (im2col)

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, std::size_t stride, std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1] || stride == 0) {
    throw ShapeMismatch("conv2d: input " + shape_str(sx) + " vs kernel " + shape_str(sw));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != sw[0])) {
    throw ShapeMismatch("conv2d: bias " + shape_str(bias.shape()) + " vs kernel " + shape_str(sw));
  }
  const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3];
  const std::size_t Co = sw[0], KH = sw[2], KW = sw[3];
  if (H + 2 * pad < KH || W + 2 * pad < KW) {
    throw ShapeMismatch("conv2d: kernel " + shape_str(sw) + " larger than padded input " + shape_str(sx));
  }
  const std::size_t Ho = (H + 2 * pad - KH) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - KW) / stride + 1;
  const std::size_t P = Ho * Wo;
  const std::size_t CK = Ci * KH * KW;

  auto cols = std::make_shared<std::vector<S>>(N * CK * P);
  const S* xv = x.value().raw();
#pragma omp parallel for schedule(static) if (N * CK * P > 65536)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
    S* col = cols->data() + n * CK * P;
    const S* img = xv + n * Ci * H * W;
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      for (std::size_t ky = 0; ky < KH; ++ky) {
        for (std::size_t kx = 0; kx < KW; ++kx) {
          S* row = col + ((ci * KH + ky) * KW + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              row[oy * Wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                                   ix >= static_cast<std::ptrdiff_t>(W))
                                      ? S(0)
                                      : img[(ci * H + iy) * W + ix];
            }
          }
        }
      }
    }
  }

  Tensor<S> out(Shape{N, Co, Ho, Wo});
  const S* wv = w.value().raw();
  const S* bv = has_bias ? bias.value().raw() : nullptr;
  S* ov = out.raw();
#pragma omp parallel for collapse(2) schedule(static) if (N * Co * CK * P > 65536)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
    for (std::ptrdiff_t co = 0; co < static_cast<std::ptrdiff_t>(Co); ++co) {
      S* row = ov + (n * Co + co) * P;
      std::fill(row, row + P, bv ? bv[co] : S(0));
      const S* col = cols->data() + n * CK * P;
      const S* wrow = wv + co * CK;
      for (std::size_t k = 0; k < CK; ++k) {
        const S wk = wrow[k];
        const S* c = col + k * P;
        for (std::size_t p = 0; p < P; ++p) row[p] += wk * c[p];
      }
    }
  }

  std::vector<Var<S>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<S>(
      std::move(out), "conv2d", std::move(parents),
      [=](NodeT<S>& nd) {
        const S* G = nd.grad.raw();
        if (auto* gw = grad_of(nd, 1)) {
          S* dW = gw->raw();
#pragma omp parallel for schedule(static) if (N * Co * CK * P > 65536)
          for (std::ptrdiff_t co = 0; co < static_cast<std::ptrdiff_t>(Co); ++co) {
            for (std::size_t n = 0; n < N; ++n) {
              gemm_nt_acc(G + (n * Co + co) * P, cols->data() + n * CK * P, dW + co * CK, 1, CK, P);
            }
          }
        }
        if (has_bias) {
          if (auto* gb = grad_of(nd, 2)) {
            S* db = gb->raw();
            for (std::size_t co = 0; co < Co; ++co) {
              S acc = S(0);
              for (std::size_t n = 0; n < N; ++n) {
                const S* g = G + (n * Co + co) * P;
                for (std::size_t p = 0; p < P; ++p) acc += g[p];
              }
              db[co] += acc;
            }
          }
        }
        if (auto* gx = grad_of(nd, 0)) {
          const S* wv = value_of(nd, 1).raw();
          S* dX = gx->raw();
#pragma omp parallel for schedule(static) if (N * Co * CK * P > 65536)
          for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
            std::vector<S> dcol(CK * P, S(0));
            const S* g = G + n * Co * P;
            for (std::size_t co = 0; co < Co; ++co) {
              const S* wrow = wv + co * CK;
              const S* grow = g + co * P;
              for (std::size_t k = 0; k < CK; ++k) {
                const S wk = wrow[k];
                S* dc = dcol.data() + k * P;
                for (std::size_t p = 0; p < P; ++p) dc[p] += wk * grow[p];
              }
            }
            S* dimg = dX + n * Ci * H * W;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              for (std::size_t ky = 0; ky < KH; ++ky) {
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const S* row = dcol.data() + ((ci * KH + ky) * KW + kx) * P;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const std::ptrdiff_t ix =
                          static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      dimg[(ci * H + iy) * W + ix] += row[oy * Wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// bilinear resize

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename S>
Var<S> bilinear_resize(const Var<S>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& sx = x.shape();
  if (sx.size() != 4 || out_h == 0 || out_w == 0 || sx[2] == 0 || sx[3] == 0) {
    throw ShapeMismatch("bilinear_resize: input " + shape_str(sx) + " to " + std::to_string(out_h) + "x" +
                        std::to_string(out_w));
  }
  const std::size_t planes = sx[0] * sx[1], H = sx[2], W = sx[3];
  const auto ty = resize_taps(H, out_h);
  const auto tx = resize_taps(W, out_w);
  Tensor<S> out(Shape{sx[0], sx[1], out_h, out_w});
  const S* xv = x.value().raw();
  S* ov = out.raw();
  for (std::size_t p = 0; p < planes; ++p) {
    const S* src = xv + p * H * W;
    S* dst = ov + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const S wy = static_cast<S>(ty[oy].w1);
      const S* r0 = src + ty[oy].i0 * W;
      const S* r1 = src + ty[oy].i1 * W;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const S wx = static_cast<S>(tx[ox].w1);
        const S top = r0[tx[ox].i0] * (S(1) - wx) + r0[tx[ox].i1] * wx;
        const S bot = r1[tx[ox].i0] * (S(1) - wx) + r1[tx[ox].i1] * wx;
        dst[oy * out_w + ox] = top * (S(1) - wy) + bot * wy;
      }
    }
  }
  return make_result<S>(std::move(out), "bilinear_resize", {x}, [=](NodeT<S>& n) {
    if (auto* gx = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      S* d = gx->raw();
      for (std::size_t p = 0; p < planes; ++p) {
        S* dst = d + p * H * W;
        const S* gp = g + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const S wy = static_cast<S>(ty[oy].w1);
          S* r0 = dst + ty[oy].i0 * W;
          S* r1 = dst + ty[oy].i1 * W;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const S wx = static_cast<S>(tx[ox].w1);
            const S gv = gp[oy * out_w + ox];
            r0[tx[ox].i0] += gv * (S(1) - wy) * (S(1) - wx);
            r0[tx[ox].i1] += gv * (S(1) - wy) * wx;
            r1[tx[ox].i0] += gv * wy * (S(1) - wx);
            r1[tx[ox].i1] += gv * wy * wx;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// group norm

template <typename S>
Var<S> group_norm(const Var<S>& x, std::size_t groups, const Var<S>& gamma, const Var<S>& beta, S eps) {
  const Shape& sx = x.shape();
  if (sx.size() < 2 || groups == 0 || sx[1] % groups != 0 || gamma.shape() != Shape{sx[1]} ||
      beta.shape() != Shape{sx[1]}) {
    throw ShapeMismatch("group_norm: input " + shape_str(sx) + " with " + std::to_string(groups) +
                        " groups, gamma " + shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t N = sx[0], C = sx[1];
  const std::size_t spatial = x.numel() / (N * C);
  const std::size_t cpg = C / groups;
  const std::size_t m = cpg * spatial;
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto rstd = std::make_shared<std::vector<S>>(N * groups);
  Tensor<S> out(sx);
  const S* xv = x.value().raw();
  const S* gv = gamma.value().raw();
  const S* bv = beta.value().raw();
  S* ov = out.raw();
#pragma omp parallel for schedule(static) if (x.numel() > 65536)
  for (std::ptrdiff_t ng = 0; ng < static_cast<std::ptrdiff_t>(N * groups); ++ng) {
    const std::size_t n = ng / groups, g = ng % groups;
    const std::size_t base = (n * C + g * cpg) * spatial;
    S mu = S(0);
    for (std::size_t i = 0; i < m; ++i) mu += xv[base + i];
    mu /= static_cast<S>(m);
    S var = S(0);
    for (std::size_t i = 0; i < m; ++i) {
      const S dv = xv[base + i] - mu;
      var += dv * dv;
    }
    var /= static_cast<S>(m);
    const S r = S(1) / std::sqrt(var + eps);
    (*rstd)[ng] = r;
    for (std::size_t c = 0; c < cpg; ++c) {
      const std::size_t ch = g * cpg + c;
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t at = base + c * spatial + s;
        const S xh = (xv[at] - mu) * r;
        (*xhat)[at] = xh;
        ov[at] = xh * gv[ch] + bv[ch];
      }
    }
  }
  return make_result<S>(std::move(out), "group_norm", {x, gamma, beta}, [=](NodeT<S>& nd) {
    const S* G = nd.grad.raw();
    const S* xh = xhat->data();
    if (auto* gx = grad_of(nd, 0)) {
      const S* gv = value_of(nd, 1).raw();
      S* d = gx->raw();
#pragma omp parallel for schedule(static) if (N * C * spatial > 65536)
      for (std::ptrdiff_t ng = 0; ng < static_cast<std::ptrdiff_t>(N * groups); ++ng) {
        const std::size_t n = ng / groups, g = ng % groups;
        const std::size_t base = (n * C + g * cpg) * spatial;
        S m1 = S(0), m2 = S(0);
        for (std::size_t c = 0; c < cpg; ++c) {
          const S gam = gv[g * cpg + c];
          for (std::size_t s = 0; s < spatial; ++s) {
            const std::size_t at = base + c * spatial + s;
            const S dxh = G[at] * gam;
            m1 += dxh;
            m2 += dxh * xh[at];
          }
        }
        m1 /= static_cast<S>(m);
        m2 /= static_cast<S>(m);
        const S r = (*rstd)[ng];
        for (std::size_t c = 0; c < cpg; ++c) {
          const S gam = gv[g * cpg + c];
          for (std::size_t s = 0; s < spatial; ++s) {
            const std::size_t at = base + c * spatial + s;
            d[at] += r * (G[at] * gam - m1 - xh[at] * m2);
          }
        }
      }
    }
    auto* ggam = grad_of(nd, 1);
    auto* gbet = grad_of(nd, 2);
    if (ggam || gbet) {
      for (std::size_t c = 0; c < C; ++c) {
        S sg = S(0), sb = S(0);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = (n * C + c) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) {
            sg += G[base + s] * xh[base + s];
            sb += G[base + s];
          }
        }
        if (ggam) (*ggam)[c] += sg;
        if (gbet) (*gbet)[c] += sb;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// concat / slice

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeMismatch("concat: axis out of range for " + shape_str(s0));
  Shape so = s0;
  so[axis] = 0;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    bool ok = sp.size() == s0.size();
    for (std::size_t i = 0; ok && i < sp.size(); ++i) ok = (i == axis) || sp[i] == s0[i];
    if (!ok) throw ShapeMismatch("concat: " + shape_str(sp) + " incompatible with " + shape_str(s0));
    so[axis] += sp[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t out_row = so[axis] * inner;
  Tensor<S> out(so);
  S* ov = out.raw();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const S* src = parts[k].value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * widths[k], src + (o + 1) * widths[k], ov + o * out_row + offset);
    }
    offset += widths[k];
  }
  return make_result<S>(std::move(out), "concat", parts, [=](NodeT<S>& n) {
    const S* g = n.grad.raw();
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* gp = grad_of(n, k)) {
        S* d = gp->raw();
        for (std::size_t o = 0; o < outer; ++o) {
          const S* src = g + o * out_row + off;
          for (std::size_t j = 0; j < widths[k]; ++j) d[o * widths[k] + j] += src[j];
        }
      }
      off += widths[k];
    }
  });
}

template <typename S>
Var<S> slice(const Var<S>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& sa = a.shape();
  if (axis >= sa.size() || begin > end || end > sa[axis]) {
    throw ShapeMismatch("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                        std::to_string(axis) + " of " + shape_str(sa));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  Shape so = sa;
  so[axis] = end - begin;
  const std::size_t in_row = sa[axis] * inner;
  const std::size_t out_row = so[axis] * inner;
  const std::size_t off = begin * inner;
  Tensor<S> out(so);
  const S* src = a.value().raw();
  S* ov = out.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(src + o * in_row + off, src + o * in_row + off + out_row, ov + o * out_row);
  }
  return make_result<S>(std::move(out), "slice", {a}, [=](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S* g = n.grad.raw();
      S* d = ga->raw();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_row; ++j) d[o * in_row + off + j] += g[o * out_row + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Var<S> sum(const Var<S>& a) {
  S total = S(0);
  for (const S v : a.value().data()) total += v;
  return make_result<S>(Tensor<S>::scalar(total), "sum", {a}, [](NodeT<S>& n) {
    if (auto* ga = grad_of(n, 0)) {
      const S g = n.grad[0];
      for (auto& v : ga->data()) v += g;
    }
  });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  if (a.numel() == 0) throw ShapeMismatch("mean: empty tensor " + shape_str(a.shape()));
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

#define POSEDIFF_INSTANTIATE_OPS(S)                                                                      \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> scale<S>(const Var<S>&, S);                                                            \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                               \
  template Var<S> reshape<S>(const Var<S>&, Shape);                                                      \
  template Var<S> permute<S>(const Var<S>&, const std::vector<std::size_t>&);                            \
  template Var<S> transpose<S>(const Var<S>&, std::size_t, std::size_t);                                 \
  template Var<S> softmax<S>(const Var<S>&, std::size_t);                                                \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>&, std::size_t, std::size_t);      \
  template Var<S> bilinear_resize<S>(const Var<S>&, std::size_t, std::size_t);                           \
  template Var<S> group_norm<S>(const Var<S>&, std::size_t, const Var<S>&, const Var<S>&, S);            \
  template Var<S> silu<S>(const Var<S>&);                                                                \
  template Var<S> concat<S>(const std::vector<Var<S>>&, std::size_t);                                    \
  template Var<S> slice<S>(const Var<S>&, std::size_t, std::size_t, std::size_t);                        \
  template Var<S> sum<S>(const Var<S>&);                                                                 \
  template Var<S> mean<S>(const Var<S>&);

POSEDIFF_INSTANTIATE_OPS(float)
POSEDIFF_INSTANTIATE_OPS(double)

}  // namespace posediff::ops
