#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2v/backbone.hpp"
#include "p2v/geometry.hpp"
#include "p2v/optim.hpp"

namespace p2v {

enum class MaskStrategy { kRandom, kBlock };
enum class PretrainMode { kPoint2Vec, kData2VecPc };

MaskStrategy mask_strategy_from_string(const std::string& name);
std::string to_string(MaskStrategy strategy);
PretrainMode pretrain_mode_from_string(const std::string& name);
std::string to_string(PretrainMode mode);

// Boolean partition of n patch tokens into masked and visible.
struct MaskLayout {
  std::vector<uint8_t> mask;  // true = masked
  MaskStrategy strategy = MaskStrategy::kRandom;
  double ratio = 0.65;

  int64_t size() const { return static_cast<int64_t>(mask.size()); }
  int64_t masked_count() const;
  std::vector<int32_t> masked_indices() const;
  std::vector<int32_t> visible_indices() const;
};

// round(ratio * n) clamped to [1, n-1]: always at least one masked token and
// one visible token.
int64_t mask_count(double ratio, int64_t n);

// random: m indices drawn without replacement. block: a uniformly drawn seed
// token plus its m-1 nearest centers (ties toward the lower index).
MaskLayout generate_mask(const std::vector<Point3>& centers,
                         MaskStrategy strategy, double ratio, Rng& rng);

// Linear interpolation tau0 -> tau_end over warmup_steps, constant after.
double ema_decay_at(int64_t step, double tau0, double tau_end,
                    int64_t warmup_steps);

// Student, EMA teacher, shared mask embedding, and (in point2vec mode) the
// shallow decoder.
template <typename T>
struct PretrainModelT {
  PretrainMode mode = PretrainMode::kPoint2Vec;
  typename PointTrunkT<T>::Config trunk_cfg;
  PointTrunkT<T> student;
  PointTrunkT<T> teacher;  // untracked mirror of the student trunk
  TensorT<T> mask_embedding;  // [E]
  EncoderT<T> decoder;
  bool has_decoder = false;

  static PretrainModelT init(PretrainMode mode,
                             const typename PointTrunkT<T>::Config& cfg,
                             int64_t decoder_depth, Rng& rng);

  // All gradient-carrying parameters (student trunk, mask embedding, decoder).
  void visit_trainable(const ParamVisitor<T>& fn);
  void visit_teacher(const ParamVisitor<T>& fn);

  void copy_student_to_teacher();
  // teacher <- tau * teacher + (1 - tau) * student, elementwise over every
  // mirrored parameter.
  void ema_update(double tau);

  // Patch + position embeddings for a tokenized batch: [B, n, E] each.
  std::pair<TensorT<T>, TensorT<T>> embed_batch(
      const std::vector<PatchSet>& batch) const;
};

// Teacher targets: encoder over all tokens, parameter-free layer norm on each
// of the last K block outputs, average, layer norm again. Built without
// gradient tracking.
template <typename T>
TensorT<T> build_targets(const TensorT<T>& patch_emb, const TensorT<T>& pos,
                         const PointTrunkT<T>& teacher, int64_t k_layers,
                         T ln_eps = T(1e-5));

// The masked view of the student. point2vec: encoder over the visible tokens
// only -> [B, n-m, E]. data2vec_pc: masked slots replaced by the mask
// embedding, positions added to all tokens -> [B, n, E].
template <typename T>
TensorT<T> student_forward(const PretrainModelT<T>& model,
                           const TensorT<T>& patch_emb, const TensorT<T>& pos,
                           const std::vector<MaskLayout>& layouts,
                           bool training, Rng& rng);

// point2vec only: scatter student outputs back into a full sequence, fill
// masked slots with the mask embedding, run the shallow decoder -> [B, n, E].
template <typename T>
TensorT<T> decoder_forward(const PretrainModelT<T>& model,
                           const TensorT<T>& student_tokens,
                           const TensorT<T>& pos,
                           const std::vector<MaskLayout>& layouts,
                           bool training, Rng& rng);

struct PretrainStepOptions {
  MaskStrategy strategy = MaskStrategy::kRandom;
  double mask_ratio = 0.65;
  int64_t target_layers = 6;
  double smooth_l1_beta = 2.0;
  double lr = 1e-3;
  double tau = 0.9998;
  int64_t num_centers = 64;
  int64_t group_size = 32;
  uint64_t run_seed = 0;
  int64_t step_index = 0;
  bool training = true;
};

// One full optimization step on a batch of clouds: tokenize, embed, teacher
// targets, mask, student (+ decoder), Smooth L1 on masked positions,
// backward, optimizer step, EMA update. Returns the loss.
template <typename T>
T pretrain_step(PretrainModelT<T>& model, AdamWT<T>& optimizer,
                const std::vector<const PointCloud*>& batch,
                const PretrainStepOptions& options);

// Same, starting from already-tokenized patches (the loss path only is
// shared with pretrain_step; tokenization seeds come from the options).
template <typename T>
T pretrain_step_tokenized(PretrainModelT<T>& model, AdamWT<T>& optimizer,
                          const std::vector<PatchSet>& batch,
                          const PretrainStepOptions& options);

using PretrainModel = PretrainModelT<float>;

}  // namespace p2v
