#pragma once

#include <cstddef>
#include <span>

#include "posediff/autograd.hpp"
#include "posediff/geometry.hpp"
#include "posediff/rng.hpp"

namespace posediff {

/// Projection weights of one attention layer. Token rows are multiplied on the
/// right: q = tokens * wq, each matrix c x c.
template <typename S>
struct AttentionParams {
  Var<S> wq, wk, wv, wo;
  std::size_t heads = 1;
  std::size_t head_channels = 1;

  std::size_t channels() const { return heads * head_channels; }
  /// Throws InvalidConfig unless every matrix is c x c and finite.
  void validate() const;
};

/// Random projections (std 1/sqrt(c)); `zero_output` zeroes wo so a residual
/// layer starts as the identity.
template <typename S>
AttentionParams<S> make_attention_params(std::size_t channels, std::size_t head_channels, Rng& rng,
                                         bool zero_output = false);

/// Optional taps on the intermediate affinities for inspection and tests.
template <typename S>
struct AttentionTrace {
  Var<S> logits;         // (N*heads, L, L) scaled q k^T, after reweighting if any
  Var<S> probabilities;  // softmax of logits along the last axis
};

/// Feature maps are (N, C, H, W). Queries come from `target`, keys and values from
/// `source`. Logits are scaled by 1/sqrt(head_channels).
template <typename S>
Var<S> cross_view_attention(const Var<S>& target, const Var<S>& source, const AttentionParams<S>& params,
                            AttentionTrace<S>* trace = nullptr);

/// Cross-view attention with logits reweighted by the epipolar weight matrix
/// (Hadamard product) before the softmax. `weights` has shape (N, L, L) or
/// (1, L, L) and is shared by all heads; it is treated as a constant.
template <typename S>
Var<S> epipolar_attention(const Var<S>& target, const Var<S>& source, const Var<S>& weights,
                          const AttentionParams<S>& params, AttentionTrace<S>* trace = nullptr);

template <typename S>
Var<S> epipolar_attention(const Var<S>& target, const Var<S>& source, const geometry::EpipolarWeightMatrix& weights,
                          const AttentionParams<S>& params, AttentionTrace<S>* trace = nullptr);

template <typename S>
Var<S> self_attention(const Var<S>& features, const AttentionParams<S>& params, AttentionTrace<S>* trace = nullptr);

/// Stacks one weight matrix per batch element into an (N, L, L) constant.
template <typename S>
Var<S> weight_matrix_batch(std::span<const geometry::EpipolarWeightMatrix> matrices);

}  // namespace posediff
