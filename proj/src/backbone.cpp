#include "p2v/backbone.hpp"

#include <cmath>

#include "p2v/common.hpp"
#include "p2v/ops.hpp"

namespace p2v {

void EncoderConfig::validate() const {
  check<ConfigError>(depth >= 1, "encoder: depth must be >= 1, got ", depth);
  check<ConfigError>(dim >= 1 && heads >= 1 && dim % heads == 0,
                     "encoder: dim ", dim, " must be divisible by ", heads,
                     " heads");
  check<ConfigError>(mlp_ratio > 0.0, "encoder: mlp_ratio must be positive");
  check<ConfigError>(max_drop_path >= 0.0 && max_drop_path < 1.0,
                     "encoder: drop path rate must be in [0, 1)");
  check<ConfigError>(attn_dropout >= 0.0 && attn_dropout < 1.0 &&
                         proj_dropout >= 0.0 && proj_dropout < 1.0,
                     "encoder: dropout rates must be in [0, 1)");
}

double EncoderConfig::drop_path_rate(int64_t block) const {
  if (depth <= 1) return max_drop_path;
  return max_drop_path * static_cast<double>(block) /
         static_cast<double>(depth - 1);
}

template <typename T>
TensorT<T> multi_head_attention(const TensorT<T>& x, const LinearT<T>& qkv,
                                const LinearT<T>& proj, int64_t heads,
                                double attn_dropout, double proj_dropout,
                                bool training, Rng& rng) {
  check(x.rank() == 3, "attention: expected [B, S, E], got ",
        shape_string(x.shape()));
  const int64_t e = x.dim(2);
  check(e % heads == 0, "attention: width not divisible by heads");
  const int64_t head_dim = e / heads;

  TensorT<T> fused = qkv.forward(x);  // [B, S, 3E]
  TensorT<T> q = split_heads(slice_last(fused, 0, e), heads);
  TensorT<T> k = split_heads(slice_last(fused, e, e), heads);
  TensorT<T> v = split_heads(slice_last(fused, 2 * e, e), heads);

  const T scaling = T(1) / static_cast<T>(std::sqrt(static_cast<double>(head_dim)));
  TensorT<T> scores = bmm_nt(q, k, scaling);      // [B*H, S, S]
  TensorT<T> attn = softmax_last(scores);
  attn = dropout(attn, attn_dropout, training, rng);
  TensorT<T> ctx = bmm_stable(attn, v);           // [B*H, S, head_dim]
  TensorT<T> out = proj.forward(merge_heads(ctx, heads));
  return dropout(out, proj_dropout, training, rng);
}

template <typename T>
TransformerBlockT<T> TransformerBlockT<T>::init(const EncoderConfig& cfg,
                                                int64_t block_index,
                                                Rng& rng) {
  TransformerBlockT block;
  block.norm1 = LayerNormLayerT<T>::init(cfg.dim);
  block.qkv = LinearT<T>::init(cfg.dim, 3 * cfg.dim, rng);
  if (!cfg.qkv_bias) {
    block.qkv.bias = TensorT<T>::zeros({3 * cfg.dim}, true);
  }
  block.proj = LinearT<T>::init(cfg.dim, cfg.dim, rng);
  block.norm2 = LayerNormLayerT<T>::init(cfg.dim);
  block.fc1 = LinearT<T>::init(cfg.dim, cfg.mlp_hidden(), rng);
  block.fc2 = LinearT<T>::init(cfg.mlp_hidden(), cfg.dim, rng);
  block.drop_path_rate = cfg.drop_path_rate(block_index);
  return block;
}

template <typename T>
TensorT<T> TransformerBlockT<T>::forward(const TensorT<T>& x,
                                         const EncoderConfig& cfg,
                                         bool training, Rng& rng) const {
  TensorT<T> attn_out =
      multi_head_attention(norm1.forward(x), qkv, proj, cfg.heads,
                           cfg.attn_dropout, cfg.proj_dropout, training, rng);
  TensorT<T> h = add(x, drop_path(attn_out, drop_path_rate, training, rng));
  TensorT<T> mlp_out = fc2.forward(gelu(fc1.forward(norm2.forward(h))));
  mlp_out = dropout(mlp_out, cfg.proj_dropout, training, rng);
  return add(h, drop_path(mlp_out, drop_path_rate, training, rng));
}

template <typename T>
void TransformerBlockT<T>::visit(const std::string& prefix,
                                 const ParamVisitor<T>& fn) {
  norm1.visit(prefix + ".norm1", fn);
  qkv.visit(prefix + ".qkv", fn);
  proj.visit(prefix + ".proj", fn);
  norm2.visit(prefix + ".norm2", fn);
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

template <typename T>
EncoderT<T> EncoderT<T>::init(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderT enc;
  enc.cfg = cfg;
  enc.blocks.reserve(cfg.depth);
  for (int64_t b = 0; b < cfg.depth; ++b) {
    enc.blocks.push_back(TransformerBlockT<T>::init(cfg, b, rng));
  }
  return enc;
}

template <typename T>
std::vector<TensorT<T>> EncoderT<T>::forward(const TensorT<T>& tokens,
                                             const TensorT<T>& pos,
                                             bool training, Rng& rng) const {
  check(tokens.shape() == pos.shape(),
        "encoder: tokens and positions must have equal shapes, got ",
        shape_string(tokens.shape()), " vs ", shape_string(pos.shape()));
  std::vector<TensorT<T>> outputs;
  outputs.reserve(blocks.size());
  TensorT<T> h = tokens;
  for (const auto& block : blocks) {
    h = block.forward(add(h, pos), cfg, training, rng);
    outputs.push_back(h);
  }
  return outputs;
}

template <typename T>
void EncoderT<T>::visit(const std::string& prefix, const ParamVisitor<T>& fn) {
  for (size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].visit(prefix + ".block" + std::to_string(b), fn);
  }
}

template <typename T>
void PointTrunkT<T>::Config::validate() const {
  pointnet.validate();
  encoder.validate();
  check<ConfigError>(pos_hidden >= 1, "trunk: bad positional hidden width");
  check<ConfigError>(pointnet.out_dim == encoder.dim,
                     "trunk: patch embedding width ", pointnet.out_dim,
                     " must equal encoder dim ", encoder.dim);
}

template <typename T>
PointTrunkT<T> PointTrunkT<T>::init(const Config& cfg, Rng& rng) {
  cfg.validate();
  PointTrunkT trunk;
  trunk.pointnet = MiniPointNetT<T>::init(cfg.pointnet, rng);
  trunk.pos_encoder = PosEncoderT<T>::init(cfg.pos_hidden, cfg.encoder.dim, rng);
  trunk.encoder = EncoderT<T>::init(cfg.encoder, rng);
  trunk.final_norm = LayerNormLayerT<T>::init(cfg.encoder.dim);
  return trunk;
}

template <typename T>
void PointTrunkT<T>::visit(const std::string& prefix,
                           const ParamVisitor<T>& fn) {
  pointnet.visit(prefix + ".pointnet", fn);
  pos_encoder.visit(prefix + ".pos", fn);
  encoder.visit(prefix + ".encoder", fn);
  final_norm.visit(prefix + ".final_norm", fn);
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> embed_patch_batch(
    const PointTrunkT<T>& trunk, const std::vector<PatchSet>& batch) {
  check(!batch.empty(), "embed_patch_batch: empty batch");
  const int64_t b = static_cast<int64_t>(batch.size());
  const int64_t n = batch[0].num_patches;
  const int64_t k = batch[0].group_size;
  std::vector<T> patches;
  patches.reserve(b * n * k * 3);
  std::vector<T> centers;
  centers.reserve(b * n * 3);
  for (const auto& set : batch) {
    check(set.num_patches == n && set.group_size == k,
          "embed_patch_batch: inconsistent tokenization across the batch");
    for (const float v : set.normalized_patches) {
      patches.push_back(static_cast<T>(v));
    }
    for (const auto& c : set.centers) {
      centers.push_back(static_cast<T>(c[0]));
      centers.push_back(static_cast<T>(c[1]));
      centers.push_back(static_cast<T>(c[2]));
    }
  }
  TensorT<T> patch_tensor =
      TensorT<T>::from_values({b * n, k, 3}, std::move(patches));
  TensorT<T> center_tensor =
      TensorT<T>::from_values({b, n, 3}, std::move(centers));
  const int64_t e = trunk.encoder.cfg.dim;
  TensorT<T> patch_emb =
      trunk.pointnet.forward(patch_tensor).reshaped({b, n, e});
  TensorT<T> pos = trunk.pos_encoder.forward(center_tensor);
  return {patch_emb, pos};
}

template std::pair<TensorT<float>, TensorT<float>> embed_patch_batch(
    const PointTrunkT<float>&, const std::vector<PatchSet>&);
template std::pair<TensorT<double>, TensorT<double>> embed_patch_batch(
    const PointTrunkT<double>&, const std::vector<PatchSet>&);

template TensorT<float> multi_head_attention(const TensorT<float>&,
                                             const LinearT<float>&,
                                             const LinearT<float>&, int64_t,
                                             double, double, bool, Rng&);
template TensorT<double> multi_head_attention(const TensorT<double>&,
                                              const LinearT<double>&,
                                              const LinearT<double>&, int64_t,
                                              double, double, bool, Rng&);
template struct TransformerBlockT<float>;
template struct TransformerBlockT<double>;
template struct EncoderT<float>;
template struct EncoderT<double>;
template struct PointTrunkT<float>;
template struct PointTrunkT<double>;

}  // namespace p2v
