#pragma once

#include <cstdint>
#include <vector>

#include "p2v/nn.hpp"
#include "p2v/rng.hpp"
#include "p2v/tensor.hpp"

namespace p2v {

struct MiniPointNetConfig {
  std::vector<int64_t> first_mlp = {128, 256};    // widths after the 3-d input
  std::vector<int64_t> second_hidden = {512};     // hidden widths of MLP 2
  int64_t out_dim = 384;

  void validate() const;
  // Input width of the second MLP: pooled features are concatenated to each
  // per-point feature, doubling the width.
  int64_t second_in() const { return 2 * first_mlp.back(); }
};

// Permutation-invariant patch encoder: shared MLP per point, max-pool,
// concatenate the pooled vector back to every point, second shared MLP,
// final max-pool.
template <typename T>
struct MiniPointNetT {
  MiniPointNetConfig cfg;
  std::vector<LinearT<T>> first;
  std::vector<LayerNormLayerT<T>> first_norm;
  std::vector<LinearT<T>> second;                 // hidden... then output
  std::vector<LayerNormLayerT<T>> second_norm;    // hidden layers only

  static MiniPointNetT init(const MiniPointNetConfig& cfg, Rng& rng);

  // patches: [P, k, 3] -> [P, out_dim]
  TensorT<T> forward(const TensorT<T>& patches) const;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// Two-layer MLP mapping center coordinates to position embeddings.
template <typename T>
struct PosEncoderT {
  LinearT<T> fc1;  // 3 -> hidden
  LinearT<T> fc2;  // hidden -> out

  static PosEncoderT init(int64_t hidden, int64_t out, Rng& rng);

  // centers: [..., 3] -> [..., out]
  TensorT<T> forward(const TensorT<T>& centers) const;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

using MiniPointNet = MiniPointNetT<float>;
using PosEncoder = PosEncoderT<float>;

}  // namespace p2v
