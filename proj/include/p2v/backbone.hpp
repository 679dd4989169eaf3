#pragma once

#include <cstdint>
#include <vector>

#include "p2v/embedding.hpp"
#include "p2v/geometry.hpp"
#include "p2v/nn.hpp"
#include "p2v/rng.hpp"
#include "p2v/tensor.hpp"

namespace p2v {

struct EncoderConfig {
  int64_t depth = 12;
  int64_t dim = 384;
  int64_t heads = 6;
  double mlp_ratio = 4.0;
  double max_drop_path = 0.0;   // per-block rates linearly spaced 0..max
  double attn_dropout = 0.0;
  double proj_dropout = 0.0;
  bool qkv_bias = true;

  void validate() const;
  double drop_path_rate(int64_t block) const;
  int64_t mlp_hidden() const {
    return static_cast<int64_t>(static_cast<double>(dim) * mlp_ratio);
  }
};

// Scaled dot-product multi-head self-attention with output projection.
template <typename T>
TensorT<T> multi_head_attention(const TensorT<T>& x, const LinearT<T>& qkv,
                                const LinearT<T>& proj, int64_t heads,
                                double attn_dropout, double proj_dropout,
                                bool training, Rng& rng);

// Pre-norm Transformer block: x + drop_path(attn(ln(x))), then
// x + drop_path(mlp(ln(x))).
template <typename T>
struct TransformerBlockT {
  LayerNormLayerT<T> norm1;
  LinearT<T> qkv;
  LinearT<T> proj;
  LayerNormLayerT<T> norm2;
  LinearT<T> fc1;
  LinearT<T> fc2;
  double drop_path_rate = 0.0;

  static TransformerBlockT init(const EncoderConfig& cfg, int64_t block_index,
                                Rng& rng);
  TensorT<T> forward(const TensorT<T>& x, const EncoderConfig& cfg,
                     bool training, Rng& rng) const;
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// Standard Transformer encoder. Position embeddings are re-added before
// every block; all block outputs are returned (the consumer picks what it
// needs: the last for downstream heads, the last K for teacher targets).
template <typename T>
struct EncoderT {
  EncoderConfig cfg;
  std::vector<TransformerBlockT<T>> blocks;

  static EncoderT init(const EncoderConfig& cfg, Rng& rng);

  // tokens, pos: [B, S, E] -> depth outputs of the same shape.
  std::vector<TensorT<T>> forward(const TensorT<T>& tokens,
                                  const TensorT<T>& pos, bool training,
                                  Rng& rng) const;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// The full student-side trunk: patch embedder, positional encoder, encoder,
// and the final norm used by downstream heads.
template <typename T>
struct PointTrunkT {
  MiniPointNetT<T> pointnet;
  PosEncoderT<T> pos_encoder;
  EncoderT<T> encoder;
  LayerNormLayerT<T> final_norm;

  struct Config {
    MiniPointNetConfig pointnet;
    int64_t pos_hidden = 128;
    EncoderConfig encoder;
    void validate() const;
  };

  static PointTrunkT init(const Config& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// Patch + position embeddings for a tokenized batch: [B, n, E] each.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> embed_patch_batch(
    const PointTrunkT<T>& trunk, const std::vector<PatchSet>& batch);

using Encoder = EncoderT<float>;
using PointTrunk = PointTrunkT<float>;

}  // namespace p2v
