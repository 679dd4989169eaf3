#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "p2v/backbone.hpp"
#include "p2v/geometry.hpp"
#include "p2v/nn.hpp"

namespace p2v {

// ----- classification --------------------------------------------------------

// MLP on the concatenated mean- and max-pooled encoder output.
template <typename T>
struct ClassificationHeadT {
  std::vector<LinearT<T>> layers;  // 2E -> hidden... -> classes
  double dropout_rate = 0.5;

  static ClassificationHeadT init(int64_t encoder_dim,
                                  const std::vector<int64_t>& hidden,
                                  int64_t num_classes, double dropout,
                                  Rng& rng);

  // tokens: [B, S, E] (after the trunk's final norm) -> logits [B, C]
  TensorT<T> forward(const TensorT<T>& tokens, bool training, Rng& rng) const;

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// ----- part segmentation -----------------------------------------------------

// Upsamples averaged token features to every point with inverse-distance
// weighting, concatenates a global vector (mean-pool, max-pool, one-hot
// object class), and classifies each point with a shared MLP.
template <typename T>
struct PartSegHeadT {
  LinearT<T> prop_mlp;             // E -> prop_dim, applied after upsampling
  std::vector<LinearT<T>> layers;  // (2E + classes + prop_dim) -> ... -> parts
  double dropout_rate = 0.5;
  int64_t num_object_classes = 1;
  int64_t k_interp = 3;
  double prop_power = 2.0;
  double prop_eps = 1e-8;

  static PartSegHeadT init(int64_t encoder_dim, int64_t prop_dim,
                           const std::vector<int64_t>& hidden,
                           int64_t num_object_classes, int64_t num_parts,
                           double dropout, Rng& rng);

  void visit(const std::string& prefix, const ParamVisitor<T>& fn);
};

// layer_outputs: all encoder block outputs for one sample, each [1, S, E].
// Averages blocks 4, 8, 12 (1-indexed), builds global and per-point local
// feature vectors, and returns per-point part logits [M, parts].
template <typename T>
TensorT<T> partseg_forward(const std::vector<TensorT<T>>& layer_outputs,
                           const std::vector<Point3>& centers,
                           const std::vector<Point3>& all_points,
                           int object_class, const PartSegHeadT<T>& head,
                           bool training, Rng& rng);

// ----- evaluation protocol ----------------------------------------------------

struct FewShotEpisode {
  int64_t way = 0;
  int64_t shot = 0;
  std::vector<int> classes;            // the m sampled class ids
  std::vector<int64_t> support;        // dataset indices, m*n entries
  std::vector<int64_t> query;          // dataset indices, m*20 entries
};

// m classes without replacement; per class, n support + 20 query instances,
// disjoint. Labels index into `labels`; every chosen class needs at least
// n + 20 instances.
FewShotEpisode sample_fewshot_episode(const std::vector<int>& labels,
                                      int64_t num_classes, int64_t way,
                                      int64_t shot, Rng& rng);

struct ConfusionMatrix {
  int64_t num_classes = 0;
  std::vector<int64_t> counts;  // [C, C], row = label, column = prediction

  int64_t& at(int64_t label, int64_t predicted);
  int64_t at(int64_t label, int64_t predicted) const;
  double accuracy() const;
  std::vector<double> row_normalized() const;  // diagonal = per-class recall
  std::vector<double> col_normalized() const;  // diagonal = precision
  std::vector<double> per_class_recall() const;
  std::vector<double> per_class_precision() const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                 const std::vector<int>& labels,
                                 int64_t num_classes);

// ----- PCA -> RGB -------------------------------------------------------------

// Jointly fits a 3-component PCA over all rows of all feature matrices
// (each [n_i, E]) and returns per-matrix colors min-max scaled to [0, 1]
// across the whole set. Rank-deficient directions pad with 0.5.
std::vector<std::vector<std::array<float, 3>>> pca_rgb(
    const std::vector<Tensor>& token_features);

// ----- mIoU -------------------------------------------------------------------

// Per-instance mean IoU over the parts present in (label union prediction).
double instance_miou(const std::vector<int>& predictions,
                     const std::vector<int32_t>& labels, int64_t num_parts);

using ClassificationHead = ClassificationHeadT<float>;
using PartSegHead = PartSegHeadT<float>;

}  // namespace p2v
