#include "p2v/pretraining.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p2v/common.hpp"
#include "p2v/ops.hpp"

namespace p2v {

MaskStrategy mask_strategy_from_string(const std::string& name) {
  if (name == "random") return MaskStrategy::kRandom;
  if (name == "block") return MaskStrategy::kBlock;
  throw ConfigError(concat("unknown mask strategy '", name,
                           "' (expected 'random' or 'block')"));
}

std::string to_string(MaskStrategy strategy) {
  return strategy == MaskStrategy::kRandom ? "random" : "block";
}

PretrainMode pretrain_mode_from_string(const std::string& name) {
  if (name == "point2vec") return PretrainMode::kPoint2Vec;
  if (name == "data2vec_pc") return PretrainMode::kData2VecPc;
  throw ConfigError(concat("unknown pretrain mode '", name,
                           "' (expected 'point2vec' or 'data2vec_pc')"));
}

std::string to_string(PretrainMode mode) {
  return mode == PretrainMode::kPoint2Vec ? "point2vec" : "data2vec_pc";
}

int64_t MaskLayout::masked_count() const {
  return std::count(mask.begin(), mask.end(), uint8_t(1));
}

std::vector<int32_t> MaskLayout::masked_indices() const {
  std::vector<int32_t> out;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(static_cast<int32_t>(i));
  }
  return out;
}

std::vector<int32_t> MaskLayout::visible_indices() const {
  std::vector<int32_t> out;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) out.push_back(static_cast<int32_t>(i));
  }
  return out;
}

int64_t mask_count(double ratio, int64_t n) {
  check<ConfigError>(n >= 2, "mask_count: need at least 2 tokens, got ", n);
  const int64_t rounded = static_cast<int64_t>(
      std::llround(ratio * static_cast<double>(n)));
  return std::clamp<int64_t>(rounded, 1, n - 1);
}

MaskLayout generate_mask(const std::vector<Point3>& centers,
                         MaskStrategy strategy, double ratio, Rng& rng) {
  const int64_t n = static_cast<int64_t>(centers.size());
  check<ConfigError>(n >= 2, "generate_mask: need at least 2 tokens, got ", n);
  const int64_t m = mask_count(ratio, n);
  MaskLayout layout;
  layout.mask.assign(n, 0);
  layout.strategy = strategy;
  layout.ratio = ratio;
  if (strategy == MaskStrategy::kRandom) {
    // Partial Fisher-Yates over the index list: first m entries are the
    // masked set.
    std::vector<int32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = 0; i < m; ++i) {
      const int64_t j = i + rng.uniform_int(n - i);
      std::swap(order[i], order[j]);
      layout.mask[order[i]] = 1;
    }
  } else {
    const int64_t seed_token = rng.uniform_int(n);
    // Masked set = the seed plus its m-1 nearest centers.
    std::vector<std::pair<float, int32_t>> dist;
    dist.reserve(n - 1);
    for (int64_t i = 0; i < n; ++i) {
      if (i == seed_token) continue;
      dist.emplace_back(
          squared_distance(centers[i], centers[seed_token]),
          static_cast<int32_t>(i));
    }
    std::sort(dist.begin(), dist.end());
    layout.mask[seed_token] = 1;
    for (int64_t j = 0; j < m - 1; ++j) layout.mask[dist[j].second] = 1;
  }
  return layout;
}

double ema_decay_at(int64_t step, double tau0, double tau_end,
                    int64_t warmup_steps) {
  check<ConfigError>(step >= 0, "ema_decay_at: negative step");
  if (warmup_steps <= 0 || step >= warmup_steps) return tau_end;
  const double t = static_cast<double>(step) / static_cast<double>(warmup_steps);
  return tau0 + (tau_end - tau0) * t;
}

template <typename T>
PretrainModelT<T> PretrainModelT<T>::init(
    PretrainMode mode, const typename PointTrunkT<T>::Config& cfg,
    int64_t decoder_depth, Rng& rng) {
  if (mode == PretrainMode::kPoint2Vec) {
    check<ConfigError>(decoder_depth >= 1,
                       "point2vec mode requires a decoder depth >= 1");
  } else {
    check<ConfigError>(decoder_depth == 0,
                       "data2vec_pc mode does not use a decoder");
  }
  PretrainModelT model;
  model.mode = mode;
  model.trunk_cfg = cfg;
  model.student = PointTrunkT<T>::init(cfg, rng);
  model.mask_embedding =
      trunc_normal<T>({cfg.encoder.dim}, rng, T(0.02), T(0.04), true);
  if (mode == PretrainMode::kPoint2Vec) {
    EncoderConfig dec_cfg = cfg.encoder;
    dec_cfg.depth = decoder_depth;
    dec_cfg.max_drop_path = 0.0;
    model.decoder = EncoderT<T>::init(dec_cfg, rng);
    model.has_decoder = true;
  }
  // Teacher mirrors the student trunk with untracked tensors.
  model.teacher = PointTrunkT<T>::init(cfg, rng);
  model.teacher.visit("", [](const std::string&, TensorT<T>& t) {
    t = t.detached().clone();
  });
  model.copy_student_to_teacher();
  return model;
}

template <typename T>
void PretrainModelT<T>::visit_trainable(const ParamVisitor<T>& fn) {
  student.visit("student", fn);
  fn("mask_embedding", mask_embedding);
  if (has_decoder) decoder.visit("decoder", fn);
}

template <typename T>
void PretrainModelT<T>::visit_teacher(const ParamVisitor<T>& fn) {
  teacher.visit("teacher", fn);
}

namespace {

template <typename T>
std::vector<TensorT<T>> collect_params(PointTrunkT<T>& trunk) {
  std::vector<TensorT<T>> out;
  trunk.visit("", [&out](const std::string&, TensorT<T>& t) {
    out.push_back(t);
  });
  return out;
}

}  // namespace

template <typename T>
void PretrainModelT<T>::copy_student_to_teacher() {
  auto src = collect_params(student);
  auto dst = collect_params(teacher);
  check(src.size() == dst.size(), "teacher/student parameter count mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    check(src[i].shape() == dst[i].shape(),
          "teacher/student parameter shape mismatch");
    auto d = dst[i].mutable_values();
    const auto s = src[i].values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

template <typename T>
void PretrainModelT<T>::ema_update(double tau) {
  check<ConfigError>(tau >= 0.0 && tau <= 1.0, "ema_update: tau outside [0, 1]");
  auto src = collect_params(student);
  auto dst = collect_params(teacher);
  check(src.size() == dst.size(), "teacher/student parameter count mismatch");
  const T t = static_cast<T>(tau);
  const T one_minus = T(1) - t;
  for (size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].mutable_values();
    const auto s = src[i].values();
    check(d.size() == s.size(), "teacher/student parameter size mismatch");
    for (size_t j = 0; j < d.size(); ++j) d[j] = t * d[j] + one_minus * s[j];
  }
}

template <typename T>
std::pair<TensorT<T>, TensorT<T>> PretrainModelT<T>::embed_batch(
    const std::vector<PatchSet>& batch) const {
  return embed_patch_batch(student, batch);
}

template <typename T>
TensorT<T> build_targets(const TensorT<T>& patch_emb, const TensorT<T>& pos,
                         const PointTrunkT<T>& teacher, int64_t k_layers,
                         T ln_eps) {
  const int64_t depth = teacher.encoder.cfg.depth;
  check<ConfigError>(k_layers >= 1 && k_layers <= depth,
                     "build_targets: K = ", k_layers, " outside [1, ", depth,
                     "]");
  NoGradGuard no_grad;
  Rng unused(0);
  const auto layers =
      teacher.encoder.forward(patch_emb, pos, /*training=*/false, unused);
  // LN each of the last K outputs, average, LN the average.
  TensorT<T> sum;
  for (int64_t i = depth - k_layers; i < depth; ++i) {
    TensorT<T> normed = layer_norm(layers[i], ln_eps);
    sum = sum.defined() ? add(sum, normed) : normed;
  }
  TensorT<T> avg = scale(sum, T(1) / static_cast<T>(k_layers));
  return layer_norm(avg, ln_eps);
}

template <typename T>
TensorT<T> student_forward(const PretrainModelT<T>& model,
                           const TensorT<T>& patch_emb, const TensorT<T>& pos,
                           const std::vector<MaskLayout>& layouts,
                           bool training, Rng& rng) {
  check(patch_emb.rank() == 3, "student_forward: expected [B, n, E]");
  const int64_t b = patch_emb.dim(0);
  const int64_t n = patch_emb.dim(1);
  check(static_cast<int64_t>(layouts.size()) == b,
        "student_forward: need one mask layout per sample");
  IndexLists visible(b);
  for (int64_t i = 0; i < b; ++i) {
    check(layouts[i].size() == n,
          "student_forward: layout token count mismatch");
    visible[i] = layouts[i].visible_indices();
  }
  if (model.mode == PretrainMode::kPoint2Vec) {
    // Masked embeddings and their positions never reach the student.
    TensorT<T> tokens = gather_tokens(patch_emb, visible);
    TensorT<T> vis_pos = gather_tokens(pos, visible);
    return model.student.encoder.forward(tokens, vis_pos, training, rng).back();
  }
  // data2vec_pc: masked slots take the learned mask embedding; positions are
  // added to every token, disclosing the masked patch centers to the student.
  TensorT<T> vis_tokens = gather_tokens(patch_emb, visible);
  TensorT<T> tokens =
      assemble_tokens(vis_tokens, model.mask_embedding, visible, n);
  return model.student.encoder.forward(tokens, pos, training, rng).back();
}

template <typename T>
TensorT<T> decoder_forward(const PretrainModelT<T>& model,
                           const TensorT<T>& student_tokens,
                           const TensorT<T>& pos,
                           const std::vector<MaskLayout>& layouts,
                           bool training, Rng& rng) {
  check<ConfigError>(model.mode == PretrainMode::kPoint2Vec && model.has_decoder,
                     "decoder_forward: only defined in point2vec mode");
  check(student_tokens.rank() == 3 && pos.rank() == 3,
        "decoder_forward: expected [B, v, E] student tokens and [B, n, E] pos");
  const int64_t b = student_tokens.dim(0);
  const int64_t n = pos.dim(1);
  check(static_cast<int64_t>(layouts.size()) == b,
        "decoder_forward: need one mask layout per sample");
  IndexLists visible(b);
  for (int64_t i = 0; i < b; ++i) {
    check(layouts[i].size() == n, "decoder_forward: layout token count mismatch");
    visible[i] = layouts[i].visible_indices();
    check(static_cast<int64_t>(visible[i].size()) == student_tokens.dim(1),
          "decoder_forward: visible count does not match student tokens");
  }
  TensorT<T> full =
      assemble_tokens(student_tokens, model.mask_embedding, visible, n);
  return model.decoder.forward(full, pos, training, rng).back();
}

template <typename T>
T pretrain_step_tokenized(PretrainModelT<T>& model, AdamWT<T>& optimizer,
                          const std::vector<PatchSet>& batch,
                          const PretrainStepOptions& options) {
  check(!batch.empty(), "pretrain_step: empty batch");
  try {
    auto [patch_emb, pos] = model.embed_batch(batch);
    const int64_t b = patch_emb.dim(0);

    TensorT<T> targets = build_targets(patch_emb, pos, model.teacher,
                                       options.target_layers);

    std::vector<MaskLayout> layouts;
    layouts.reserve(b);
    IndexLists masked(b);
    for (int64_t i = 0; i < b; ++i) {
      Rng mask_rng = Rng::derive(options.run_seed, "mask",
                                 static_cast<uint64_t>(options.step_index),
                                 static_cast<uint64_t>(i));
      layouts.push_back(generate_mask(batch[i].centers, options.strategy,
                                      options.mask_ratio, mask_rng));
      masked[i] = layouts.back().masked_indices();
    }

    Rng path_rng = Rng::derive(options.run_seed, "droppath",
                               static_cast<uint64_t>(options.step_index));
    TensorT<T> student_out = student_forward(model, patch_emb, pos, layouts,
                                             options.training, path_rng);
    TensorT<T> predictions =
        model.mode == PretrainMode::kPoint2Vec
            ? decoder_forward(model, student_out, pos, layouts,
                              options.training, path_rng)
            : student_out;

    TensorT<T> pred_masked = gather_tokens(predictions, masked);
    TensorT<T> target_masked = gather_tokens(targets, masked);
    TensorT<T> loss = smooth_l1(pred_masked, target_masked,
                                static_cast<T>(options.smooth_l1_beta));
    const T loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("pretrain loss is non-finite");
    }
    loss.backward();
    optimizer.step(options.lr);
    model.ema_update(options.tau);
    return loss_value;
  } catch (const NumericError& err) {
    throw NumericError(concat("step ", options.step_index, ": ", err.what()));
  }
}

template <typename T>
T pretrain_step(PretrainModelT<T>& model, AdamWT<T>& optimizer,
                const std::vector<const PointCloud*>& batch,
                const PretrainStepOptions& options) {
  std::vector<PatchSet> tokenized;
  tokenized.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    Rng fps_rng = Rng::derive(options.run_seed, "fps",
                              static_cast<uint64_t>(options.step_index),
                              static_cast<uint64_t>(i));
    tokenized.push_back(tokenize(*batch[i], options.num_centers,
                                 options.group_size, fps_rng.next_u64()));
  }
  return pretrain_step_tokenized(model, optimizer, tokenized, options);
}

#define P2V_INSTANTIATE_PRETRAIN(T)                                           \
  template struct PretrainModelT<T>;                                          \
  template TensorT<T> build_targets(const TensorT<T>&, const TensorT<T>&,     \
                                    const PointTrunkT<T>&, int64_t, T);       \
  template TensorT<T> student_forward(const PretrainModelT<T>&,               \
                                      const TensorT<T>&, const TensorT<T>&,   \
                                      const std::vector<MaskLayout>&, bool,   \
                                      Rng&);                                  \
  template TensorT<T> decoder_forward(const PretrainModelT<T>&,               \
                                      const TensorT<T>&, const TensorT<T>&,   \
                                      const std::vector<MaskLayout>&, bool,   \
                                      Rng&);                                  \
  template T pretrain_step_tokenized(PretrainModelT<T>&, AdamWT<T>&,          \
                                     const std::vector<PatchSet>&,            \
                                     const PretrainStepOptions&);             \
  template T pretrain_step(PretrainModelT<T>&, AdamWT<T>&,                    \
                           const std::vector<const PointCloud*>&,             \
                           const PretrainStepOptions&);

P2V_INSTANTIATE_PRETRAIN(float)
P2V_INSTANTIATE_PRETRAIN(double)

#undef P2V_INSTANTIATE_PRETRAIN

}  // namespace p2v
