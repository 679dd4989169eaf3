#include "p2v/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p2v/common.hpp"
#include "p2v/ops.hpp"

namespace p2v {

// ---------------------------------------------------------------------------
// classification head
// ---------------------------------------------------------------------------

template <typename T>
ClassificationHeadT<T> ClassificationHeadT<T>::init(
    int64_t encoder_dim, const std::vector<int64_t>& hidden,
    int64_t num_classes, double dropout, Rng& rng) {
  check<ConfigError>(num_classes >= 2, "classification head: need >= 2 classes");
  ClassificationHeadT head;
  head.dropout_rate = dropout;
  int64_t in = 2 * encoder_dim;  // mean-pool concatenated with max-pool
  for (const int64_t width : hidden) {
    head.layers.push_back(LinearT<T>::init(in, width, rng));
    in = width;
  }
  head.layers.push_back(LinearT<T>::init(in, num_classes, rng));
  return head;
}

template <typename T>
TensorT<T> ClassificationHeadT<T>::forward(const TensorT<T>& tokens,
                                           bool training, Rng& rng) const {
  check(tokens.rank() == 3, "classification head: expected [B, S, E], got ",
        shape_string(tokens.shape()));
  TensorT<T> pooled =
      concat_last(reduce_mean_mid(tokens), reduce_max_mid(tokens));
  TensorT<T> x = pooled;
  for (size_t i = 0; i + 1 < layers.size(); ++i) {
    x = dropout(gelu(layers[i].forward(x)), dropout_rate, training, rng);
  }
  return layers.back().forward(x);
}

template <typename T>
void ClassificationHeadT<T>::visit(const std::string& prefix,
                                   const ParamVisitor<T>& fn) {
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i].visit(prefix + ".fc" + std::to_string(i), fn);
  }
}

// ---------------------------------------------------------------------------
// part segmentation head
// ---------------------------------------------------------------------------

template <typename T>
PartSegHeadT<T> PartSegHeadT<T>::init(int64_t encoder_dim, int64_t prop_dim,
                                      const std::vector<int64_t>& hidden,
                                      int64_t num_object_classes,
                                      int64_t num_parts, double dropout,
                                      Rng& rng) {
  check<ConfigError>(num_parts >= 2, "partseg head: need >= 2 part classes");
  PartSegHeadT head;
  head.dropout_rate = dropout;
  head.num_object_classes = num_object_classes;
  head.prop_mlp = LinearT<T>::init(encoder_dim, prop_dim, rng);
  int64_t in = 2 * encoder_dim + num_object_classes + prop_dim;
  for (const int64_t width : hidden) {
    head.layers.push_back(LinearT<T>::init(in, width, rng));
    in = width;
  }
  head.layers.push_back(LinearT<T>::init(in, num_parts, rng));
  return head;
}

template <typename T>
void PartSegHeadT<T>::visit(const std::string& prefix,
                            const ParamVisitor<T>& fn) {
  prop_mlp.visit(prefix + ".prop", fn);
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i].visit(prefix + ".fc" + std::to_string(i), fn);
  }
}

template <typename T>
TensorT<T> partseg_forward(const std::vector<TensorT<T>>& layer_outputs,
                           const std::vector<Point3>& centers,
                           const std::vector<Point3>& all_points,
                           int object_class, const PartSegHeadT<T>& head,
                           bool training, Rng& rng) {
  check<ConfigError>(layer_outputs.size() >= 12,
                     "partseg head needs encoder depth >= 12, got ",
                     layer_outputs.size());
  check(object_class >= 0 && object_class < head.num_object_classes,
        "partseg: object class out of range");
  // Average the 4th, 8th, and 12th block outputs (1-indexed).
  TensorT<T> avg = scale(
      add(add(layer_outputs[3], layer_outputs[7]), layer_outputs[11]),
      T(1) / T(3));
  check(avg.rank() == 3 && avg.dim(0) == 1, "partseg: expected [1, S, E]");
  const int64_t s = avg.dim(1);
  const int64_t e = avg.dim(2);
  check(static_cast<int64_t>(centers.size()) == s,
        "partseg: token count does not match centers");

  const int64_t m = static_cast<int64_t>(all_points.size());

  // Global vector: mean-pool, max-pool, one-hot object class.
  TensorT<T> pooled = concat_last(reduce_mean_mid(avg), reduce_max_mid(avg));
  std::vector<T> onehot(head.num_object_classes, T(0));
  onehot[object_class] = T(1);
  TensorT<T> class_vec =
      TensorT<T>::from_values({1, head.num_object_classes}, std::move(onehot));
  TensorT<T> global = concat_last(pooled, class_vec);  // [1, 2E + C]

  // Local vectors: inverse-distance upsampling then the shared MLP.
  TensorT<T> tokens2d = avg.reshaped({s, e});
  TensorT<T> local =
      feature_propagation(all_points, centers, tokens2d, head.k_interp,
                          head.prop_power, head.prop_eps);
  local = gelu(head.prop_mlp.forward(local));  // [M, prop_dim]

  TensorT<T> global_rows =
      expand_mid(global, m).reshaped({m, global.dim(1)});
  TensorT<T> x = concat_last(global_rows, local);
  for (size_t i = 0; i + 1 < head.layers.size(); ++i) {
    x = dropout(gelu(head.layers[i].forward(x)), head.dropout_rate, training,
                rng);
  }
  return head.layers.back().forward(x);  // [M, parts]
}

// ---------------------------------------------------------------------------
// few-shot episodes
// ---------------------------------------------------------------------------

FewShotEpisode sample_fewshot_episode(const std::vector<int>& labels,
                                      int64_t num_classes, int64_t way,
                                      int64_t shot, Rng& rng) {
  constexpr int64_t kQueryPerClass = 20;
  check<ConfigError>(way >= 2 && way <= num_classes,
                     "fewshot: way must be in [2, ", num_classes, "]");
  check<ConfigError>(shot >= 1, "fewshot: shot must be >= 1");

  std::vector<std::vector<int64_t>> by_class(num_classes);
  for (size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < num_classes,
          "fewshot: label out of range");
    by_class[labels[i]].push_back(static_cast<int64_t>(i));
  }

  std::vector<int> class_ids(num_classes);
  std::iota(class_ids.begin(), class_ids.end(), 0);
  rng.shuffle(class_ids.begin(), class_ids.end());

  FewShotEpisode episode;
  episode.way = way;
  episode.shot = shot;
  for (int64_t c = 0; c < way; ++c) {
    const int cls = class_ids[c];
    auto& pool = by_class[cls];
    if (static_cast<int64_t>(pool.size()) < shot + kQueryPerClass) {
      throw DataError(concat("fewshot: class ", cls, " has only ",
                             pool.size(), " instances, need ",
                             shot + kQueryPerClass));
    }
    episode.classes.push_back(cls);
    rng.shuffle(pool.begin(), pool.end());
    for (int64_t i = 0; i < shot; ++i) episode.support.push_back(pool[i]);
    for (int64_t i = 0; i < kQueryPerClass; ++i) {
      episode.query.push_back(pool[shot + i]);
    }
  }
  return episode;
}

// ---------------------------------------------------------------------------
// confusion matrix
// ---------------------------------------------------------------------------

int64_t& ConfusionMatrix::at(int64_t label, int64_t predicted) {
  return counts[label * num_classes + predicted];
}

int64_t ConfusionMatrix::at(int64_t label, int64_t predicted) const {
  return counts[label * num_classes + predicted];
}

double ConfusionMatrix::accuracy() const {
  int64_t correct = 0, total = 0;
  for (int64_t i = 0; i < num_classes; ++i) {
    correct += at(i, i);
    for (int64_t j = 0; j < num_classes; ++j) total += at(i, j);
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (int64_t i = 0; i < num_classes; ++i) {
    int64_t row_total = 0;
    for (int64_t j = 0; j < num_classes; ++j) row_total += at(i, j);
    if (row_total == 0) continue;
    for (int64_t j = 0; j < num_classes; ++j) {
      out[i * num_classes + j] =
          static_cast<double>(at(i, j)) / static_cast<double>(row_total);
    }
  }
  return out;
}

std::vector<double> ConfusionMatrix::col_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (int64_t j = 0; j < num_classes; ++j) {
    int64_t col_total = 0;
    for (int64_t i = 0; i < num_classes; ++i) col_total += at(i, j);
    if (col_total == 0) continue;
    for (int64_t i = 0; i < num_classes; ++i) {
      out[i * num_classes + j] =
          static_cast<double>(at(i, j)) / static_cast<double>(col_total);
    }
  }
  return out;
}

std::vector<double> ConfusionMatrix::per_class_recall() const {
  const auto rows = row_normalized();
  std::vector<double> out(num_classes);
  for (int64_t i = 0; i < num_classes; ++i) out[i] = rows[i * num_classes + i];
  return out;
}

std::vector<double> ConfusionMatrix::per_class_precision() const {
  const auto cols = col_normalized();
  std::vector<double> out(num_classes);
  for (int64_t i = 0; i < num_classes; ++i) out[i] = cols[i * num_classes + i];
  return out;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& predictions,
                                 const std::vector<int>& labels,
                                 int64_t num_classes) {
  check(predictions.size() == labels.size(),
        "confusion_matrix: length mismatch");
  ConfusionMatrix cm;
  cm.num_classes = num_classes;
  cm.counts.assign(num_classes * num_classes, 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    check(labels[i] >= 0 && labels[i] < num_classes,
          "confusion_matrix: label ", labels[i], " out of range");
    check(predictions[i] >= 0 && predictions[i] < num_classes,
          "confusion_matrix: prediction ", predictions[i], " out of range");
    ++cm.at(labels[i], predictions[i]);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// PCA to RGB
// ---------------------------------------------------------------------------

namespace {

// Top-k eigenvectors of a symmetric matrix by power iteration with
// deflation. Returns eigenvalues alongside.
void top_eigenvectors(const std::vector<double>& cov, int64_t dim, int64_t k,
                      std::vector<std::vector<double>>& vectors,
                      std::vector<double>& values) {
  Rng rng(20240229);
  vectors.clear();
  values.clear();
  for (int64_t comp = 0; comp < k; ++comp) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (int iter = 0; iter < 300; ++iter) {
      // orthogonalize against found components
      for (const auto& prev : vectors) {
        double dot = 0.0;
        for (int64_t i = 0; i < dim; ++i) dot += v[i] * prev[i];
        for (int64_t i = 0; i < dim; ++i) v[i] -= dot * prev[i];
      }
      std::vector<double> next(dim, 0.0);
      for (int64_t i = 0; i < dim; ++i) {
        const double* row = cov.data() + i * dim;
        double acc = 0.0;
        for (int64_t j = 0; j < dim; ++j) acc += row[j] * v[j];
        next[i] = acc;
      }
      double norm = 0.0;
      for (const double x : next) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-300) break;  // lives in the null space
      for (int64_t i = 0; i < dim; ++i) v[i] = next[i] / norm;
    }
    // final orthogonalization + Rayleigh quotient
    for (const auto& prev : vectors) {
      double dot = 0.0;
      for (int64_t i = 0; i < dim; ++i) dot += v[i] * prev[i];
      for (int64_t i = 0; i < dim; ++i) v[i] -= dot * prev[i];
    }
    double norm = 0.0;
    for (const double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      for (auto& x : v) x /= norm;
    } else {
      std::fill(v.begin(), v.end(), 0.0);
    }
    double lambda = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
      const double* row = cov.data() + i * dim;
      double acc = 0.0;
      for (int64_t j = 0; j < dim; ++j) acc += row[j] * v[j];
      lambda += v[i] * acc;
    }
    vectors.push_back(std::move(v));
    values.push_back(lambda);
  }
}

}  // namespace

std::vector<std::vector<std::array<float, 3>>> pca_rgb(
    const std::vector<Tensor>& token_features) {
  check(!token_features.empty(), "pca_rgb: empty feature set");
  const int64_t dim = token_features[0].dim(-1);
  int64_t total = 0;
  for (const auto& f : token_features) {
    check(f.rank() == 2 && f.dim(1) == dim,
          "pca_rgb: features must all be [n_i, E] with equal E");
    total += f.dim(0);
  }
  check(total >= 3, "pca_rgb: need at least 3 tokens in the fitted set");

  // joint mean
  std::vector<double> mean(dim, 0.0);
  for (const auto& f : token_features) {
    const auto v = f.values();
    for (int64_t r = 0; r < f.dim(0); ++r) {
      for (int64_t j = 0; j < dim; ++j) mean[j] += v[r * dim + j];
    }
  }
  for (auto& m : mean) m /= static_cast<double>(total);

  // covariance
  std::vector<double> cov(dim * dim, 0.0);
  for (const auto& f : token_features) {
    const auto v = f.values();
    std::vector<double> centered(dim);
    for (int64_t r = 0; r < f.dim(0); ++r) {
      for (int64_t j = 0; j < dim; ++j) centered[j] = v[r * dim + j] - mean[j];
      for (int64_t i = 0; i < dim; ++i) {
        double* row = cov.data() + i * dim;
        const double ci = centered[i];
        for (int64_t j = 0; j < dim; ++j) row[j] += ci * centered[j];
      }
    }
  }
  for (auto& c : cov) c /= static_cast<double>(total);

  double trace = 0.0;
  for (int64_t i = 0; i < dim; ++i) trace += cov[i * dim + i];

  std::vector<std::vector<double>> vectors;
  std::vector<double> values;
  top_eigenvectors(cov, dim, std::min<int64_t>(3, dim), vectors, values);
  while (vectors.size() < 3) {
    vectors.emplace_back(dim, 0.0);
    values.push_back(0.0);
  }

  // degenerate directions carry no signal; flag them to pad with 0.5 later
  const double floor = std::max(trace, 1.0) * 1e-12;
  std::array<bool, 3> live{};
  for (int c = 0; c < 3; ++c) live[c] = values[c] > floor;

  // project and track joint min/max per component
  std::array<double, 3> lo{1e300, 1e300, 1e300};
  std::array<double, 3> hi{-1e300, -1e300, -1e300};
  std::vector<std::vector<std::array<double, 3>>> projected;
  projected.reserve(token_features.size());
  for (const auto& f : token_features) {
    const auto v = f.values();
    std::vector<std::array<double, 3>> rows(f.dim(0));
    for (int64_t r = 0; r < f.dim(0); ++r) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j < dim; ++j) {
          acc += (v[r * dim + j] - mean[j]) * vectors[c][j];
        }
        rows[r][c] = acc;
        lo[c] = std::min(lo[c], acc);
        hi[c] = std::max(hi[c], acc);
      }
    }
    projected.push_back(std::move(rows));
  }

  std::vector<std::vector<std::array<float, 3>>> colors;
  colors.reserve(projected.size());
  for (const auto& rows : projected) {
    std::vector<std::array<float, 3>> out(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
      for (int c = 0; c < 3; ++c) {
        if (!live[c] || hi[c] - lo[c] < 1e-30) {
          out[r][c] = 0.5f;
        } else {
          out[r][c] =
              static_cast<float>((rows[r][c] - lo[c]) / (hi[c] - lo[c]));
        }
      }
    }
    colors.push_back(std::move(out));
  }
  return colors;
}

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

double instance_miou(const std::vector<int>& predictions,
                     const std::vector<int32_t>& labels, int64_t num_parts) {
  check(predictions.size() == labels.size(), "instance_miou: length mismatch");
  check(num_parts >= 1, "instance_miou: need at least one part");
  double total = 0.0;
  for (int64_t part = 0; part < num_parts; ++part) {
    int64_t intersection = 0, unions = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool in_label = labels[i] == part;
      const bool in_pred = predictions[i] == part;
      intersection += in_label && in_pred;
      unions += in_label || in_pred;
    }
    // a part absent from both the labels and the prediction counts as
    // perfectly segmented (ShapeNetPart convention)
    total += unions == 0
                 ? 1.0
                 : static_cast<double>(intersection) / static_cast<double>(unions);
  }
  return total / static_cast<double>(num_parts);
}

template struct ClassificationHeadT<float>;
template struct ClassificationHeadT<double>;
template struct PartSegHeadT<float>;
template struct PartSegHeadT<double>;
template TensorT<float> partseg_forward(const std::vector<TensorT<float>>&,
                                        const std::vector<Point3>&,
                                        const std::vector<Point3>&, int,
                                        const PartSegHeadT<float>&, bool,
                                        Rng&);
template TensorT<double> partseg_forward(const std::vector<TensorT<double>>&,
                                         const std::vector<Point3>&,
                                         const std::vector<Point3>&, int,
                                         const PartSegHeadT<double>&, bool,
                                         Rng&);

}  // namespace p2v
