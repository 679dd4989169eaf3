#pragma once

#include <cstdint>
#include <vector>

#include "p2v/rng.hpp"
#include "p2v/tensor.hpp"

namespace p2v {

// Per-sample index lists, e.g. the visible token indices of each batch item.
using IndexLists = std::vector<std::vector<int32_t>>;

// ----- arithmetic -----------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor);
// x: [..., E], bias: [E]
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias);

// ----- linear algebra -------------------------------------------------------

// [.., M, K] x [.., K, N] -> [.., M, N]. Supports 2Dx2D, 3Dx3D with equal
// batch, and 3Dx2D (the right operand broadcast over the batch).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// a: [B, M, K], b: [B, N, K] -> alpha * (a @ b^T): [B, M, N]
template <typename T>
TensorT<T> bmm_nt(const TensorT<T>& a, const TensorT<T>& b, T alpha = T(1));

// a: [B, M, S], b: [B, S, N] -> [B, M, N], contracting with a canonical
// (sorted) summation order: permuting the S axis of both inputs leaves the
// result bit-identical. Used where the contraction runs over tokens, so the
// encoder is exactly permutation-equivariant.
template <typename T>
TensorT<T> bmm_stable(const TensorT<T>& a, const TensorT<T>& b);

// ----- activations / normalization ------------------------------------------

// Parameter-free layer norm over the last axis (population variance).
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, T eps);
// Affine layer norm; gamma and beta have shape [E].
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, T eps, const TensorT<T>& gamma,
                      const TensorT<T>& beta);

template <typename T>
TensorT<T> softmax_last(const TensorT<T>& x);

// tanh approximation
template <typename T>
TensorT<T> gelu(const TensorT<T>& x);

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, bool training, Rng& rng);

// Zeroes the whole tensor slice of each leading-axis sample with probability
// `rate` and rescales survivors by 1/(1-rate).
template <typename T>
TensorT<T> drop_path(const TensorT<T>& x, double rate, bool training,
                     Rng& rng);

// ----- reductions -----------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);
template <typename T>
TensorT<T> mean_all(const TensorT<T>& x);
// [A, B, C] -> [A, C]; ties keep the lowest index.
template <typename T>
TensorT<T> reduce_max_mid(const TensorT<T>& x);
template <typename T>
TensorT<T> reduce_mean_mid(const TensorT<T>& x);
// [A, C] -> [A, B, C], repeating each row B times.
template <typename T>
TensorT<T> expand_mid(const TensorT<T>& x, int64_t repeat);

// ----- shape / indexing -----------------------------------------------------

template <typename T>
TensorT<T> concat_last(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> slice_last(const TensorT<T>& x, int64_t offset, int64_t length);

// x: [B, S, E], indices[b] selects rows of sample b -> [B, L, E]; every list
// must have the same length L.
template <typename T>
TensorT<T> gather_tokens(const TensorT<T>& x, const IndexLists& indices);

// Inverse of gather_tokens: visible rows are scattered back into a [B, n, E]
// sequence at `indices`, remaining slots take the shared `fill` vector [E].
template <typename T>
TensorT<T> assemble_tokens(const TensorT<T>& visible, const TensorT<T>& fill,
                           const IndexLists& indices, int64_t total_tokens);

// [B, S, E] -> [B*H, S, E/H] and back.
template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, int64_t heads);
template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x, int64_t heads);

// ----- losses ---------------------------------------------------------------

// Mean Smooth L1 with threshold beta; gradients flow to pred only.
template <typename T>
TensorT<T> smooth_l1(const TensorT<T>& pred, const TensorT<T>& target, T beta);

// Cross entropy of logits [B, C] against (1-eps) on the label and eps/(C-1)
// on every other class, averaged over the batch.
template <typename T>
TensorT<T> label_smoothing_loss(const TensorT<T>& logits,
                                const std::vector<int>& labels, T eps);

// ----- initialization (leaf tensors, no graph) -------------------------------

template <typename T>
TensorT<T> randn(std::vector<int64_t> shape, Rng& rng, T stddev = T(1),
                 bool requires_grad = false);
template <typename T>
TensorT<T> trunc_normal(std::vector<int64_t> shape, Rng& rng, T stddev,
                        T bound, bool requires_grad = false);

// Throws NumericError naming `context` if any value is NaN or infinite.
template <typename T>
void check_finite(const TensorT<T>& x, const char* context);

}  // namespace p2v
