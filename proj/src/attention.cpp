#include "posediff/attention.hpp"

#include <cmath>
#include <string>

#include "posediff/ops.hpp"

namespace posediff {

template <typename S>
void AttentionParams<S>::validate() const {
  const std::size_t c = channels();
  for (const Var<S>* m : {&wq, &wk, &wv, &wo}) {
    if (!m->defined() || m->shape() != Shape{c, c}) {
      throw InvalidConfig("attention projection must be " + std::to_string(c) + "x" + std::to_string(c));
    }
    for (const S v : m->value().data()) {
      if (!std::isfinite(static_cast<double>(v))) throw InvalidConfig("attention projection has non-finite entries");
    }
  }
}

template <typename S>
AttentionParams<S> make_attention_params(std::size_t channels, std::size_t head_channels, Rng& rng,
                                         bool zero_output) {
  if (head_channels == 0 || channels % head_channels != 0) {
    throw InvalidConfig("channels " + std::to_string(channels) + " not divisible by head width " +
                        std::to_string(head_channels));
  }
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(channels));
  auto random_matrix = [&](bool zero) {
    Tensor<S> t(Shape{channels, channels});
    if (!zero) {
      for (auto& v : t.data()) v = static_cast<S>(rng.normal() * std_dev);
    }
    return Var<S>::parameter(std::move(t));
  };
  AttentionParams<S> p;
  p.wq = random_matrix(false);
  p.wk = random_matrix(false);
  p.wv = random_matrix(false);
  p.wo = random_matrix(zero_output);
  p.head_channels = head_channels;
  p.heads = channels / head_channels;
  return p;
}

namespace {

// (N, C, H, W) -> (N, L, C)
template <typename S>
Var<S> to_tokens(const Var<S>& x) {
  const Shape& s = x.shape();
  return ops::transpose(ops::reshape(x, Shape{s[0], s[1], s[2] * s[3]}), 1, 2);
}

// (N, L, C) -> (N*heads, L, D)
template <typename S>
Var<S> split_heads(const Var<S>& x, std::size_t heads, std::size_t d) {
  const std::size_t n = x.shape()[0], l = x.shape()[1];
  auto y = ops::permute(ops::reshape(x, Shape{n, l, heads, d}), {0, 2, 1, 3});
  return ops::reshape(y, Shape{n * heads, l, d});
}

// (N*heads, L, D) -> (N, L, C)
template <typename S>
Var<S> merge_heads(const Var<S>& x, std::size_t n, std::size_t heads) {
  const std::size_t l = x.shape()[1], d = x.shape()[2];
  auto y = ops::permute(ops::reshape(x, Shape{n, heads, l, d}), {0, 2, 1, 3});
  return ops::reshape(y, Shape{n, l, heads * d});
}

template <typename S>
Var<S> attend(const Var<S>& target, const Var<S>& source, const Var<S>* weights, const AttentionParams<S>& params,
              AttentionTrace<S>* trace) {
  const Shape& st = target.shape();
  if (st.size() != 4 || source.shape() != st) {
    throw ShapeMismatch("attention: target " + shape_str(st) + " vs source " + shape_str(source.shape()));
  }
  if (st[1] != params.channels()) {
    throw ShapeMismatch("attention: feature channels " + std::to_string(st[1]) + " vs projection width " +
                        std::to_string(params.channels()));
  }
  const std::size_t n = st[0], c = st[1], h = st[2], w = st[3], l = h * w;
  const std::size_t heads = params.heads, d = params.head_channels;

  const auto tgt = to_tokens(target);
  const auto src = &target == &source ? tgt : to_tokens(source);
  const auto q = ops::scale(split_heads(ops::matmul(tgt, params.wq), heads, d),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(d))));
  const auto k = split_heads(ops::matmul(src, params.wk), heads, d);
  const auto v = split_heads(ops::matmul(src, params.wv), heads, d);

  auto logits = ops::matmul(q, ops::transpose(k, 1, 2));  // (N*heads, L, L)
  if (weights) {
    const Shape& se = weights->shape();
    if (se.size() != 3 || se[1] != l || se[2] != l || (se[0] != n && se[0] != 1)) {
      throw ShapeMismatch("epipolar attention: weights " + shape_str(se) + " vs " + std::to_string(n) + " maps of " +
                          std::to_string(l) + " pixels");
    }
    const auto e4 = ops::reshape(*weights, Shape{se[0], 1, l, l});
    logits = ops::reshape(ops::mul(ops::reshape(logits, Shape{n, heads, l, l}), e4), Shape{n * heads, l, l});
  }
  const auto probs = ops::softmax(logits, 2);
  if (trace) {
    trace->logits = logits;
    trace->probabilities = probs;
  }
  const auto mixed = merge_heads(ops::matmul(probs, v), n, heads);  // (N, L, C)
  const auto out = ops::matmul(mixed, params.wo);
  return ops::reshape(ops::transpose(out, 1, 2), Shape{n, c, h, w});
}

}  // namespace

template <typename S>
Var<S> cross_view_attention(const Var<S>& target, const Var<S>& source, const AttentionParams<S>& params,
                            AttentionTrace<S>* trace) {
  return attend<S>(target, source, nullptr, params, trace);
}

template <typename S>
Var<S> epipolar_attention(const Var<S>& target, const Var<S>& source, const Var<S>& weights,
                          const AttentionParams<S>& params, AttentionTrace<S>* trace) {
  if (weights.requires_grad()) {
    // weights depend only on camera poses
    const auto frozen = Var<S>::constant(weights.value());
    return attend<S>(target, source, &frozen, params, trace);
  }
  return attend<S>(target, source, &weights, params, trace);
}

template <typename S>
Var<S> weight_matrix_batch(std::span<const geometry::EpipolarWeightMatrix> matrices) {
  if (matrices.empty()) throw MissingWeightMatrix("no weight matrices given");
  const std::size_t l = matrices[0].pixels();
  Tensor<S> t(Shape{matrices.size(), l, l});
  S* out = t.raw();
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    if (matrices[i].pixels() != l) throw ShapeMismatch("weight matrices in a batch must share a resolution");
    const auto& vals = matrices[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) out[i * l * l + j] = static_cast<S>(vals[j]);
  }
  return Var<S>::constant(std::move(t));
}

template <typename S>
Var<S> epipolar_attention(const Var<S>& target, const Var<S>& source, const geometry::EpipolarWeightMatrix& weights,
                          const AttentionParams<S>& params, AttentionTrace<S>* trace) {
  const auto e = weight_matrix_batch<S>(std::span<const geometry::EpipolarWeightMatrix>(&weights, 1));
  return attend<S>(target, source, &e, params, trace);
}

template <typename S>
Var<S> self_attention(const Var<S>& features, const AttentionParams<S>& params, AttentionTrace<S>* trace) {
  return attend<S>(features, features, nullptr, params, trace);
}

#define POSEDIFF_INSTANTIATE_ATTENTION(S)                                                                            \
  template struct AttentionParams<S>;                                                                                \
  template AttentionParams<S> make_attention_params<S>(std::size_t, std::size_t, Rng&, bool);                        \
  template Var<S> cross_view_attention<S>(const Var<S>&, const Var<S>&, const AttentionParams<S>&,                    \
                                          AttentionTrace<S>*);                                                       \
  template Var<S> epipolar_attention<S>(const Var<S>&, const Var<S>&, const Var<S>&, const AttentionParams<S>&,      \
                                        AttentionTrace<S>*);                                                         \
  template Var<S> epipolar_attention<S>(const Var<S>&, const Var<S>&, const geometry::EpipolarWeightMatrix&,         \
                                        const AttentionParams<S>&, AttentionTrace<S>*);                              \
  template Var<S> self_attention<S>(const Var<S>&, const AttentionParams<S>&, AttentionTrace<S>*);                   \
  template Var<S> weight_matrix_batch<S>(std::span<const geometry::EpipolarWeightMatrix>);

POSEDIFF_INSTANTIATE_ATTENTION(float)
POSEDIFF_INSTANTIATE_ATTENTION(double)

}  // namespace posediff
