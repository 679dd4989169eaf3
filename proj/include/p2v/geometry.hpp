#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "p2v/tensor.hpp"

namespace p2v {

using Point3 = std::array<float, 3>;

struct PointCloud {
  std::vector<Point3> points;
  std::vector<int32_t> labels;  // empty, or one per point

  int64_t size() const { return static_cast<int64_t>(points.size()); }
  bool has_labels() const { return !labels.empty(); }
  void validate() const;
};

// Tokenization of a cloud: n centers with their k-point neighborhoods,
// expressed relative to the center.
struct PatchSet {
  std::vector<int32_t> center_indices;     // [n]
  std::vector<Point3> centers;             // [n]
  std::vector<int32_t> group_indices;      // [n * k], row-major
  std::vector<float> normalized_patches;   // [n * k * 3]
  int64_t num_patches = 0;
  int64_t group_size = 0;
};

float squared_distance(const Point3& a, const Point3& b);

// Greedy max-min sampling. The first index is drawn uniformly from the
// seeded RNG; later picks maximize the minimum distance to the selected set,
// ties resolved toward the lower index.
std::vector<int32_t> farthest_point_sampling(const PointCloud& cloud,
                                             int64_t n, uint64_t seed);

// Per center, the indices of the k nearest cloud points (ties toward the
// lower index). Returns a flattened [centers.size() * k] row-major list,
// sorted by ascending distance within each row.
std::vector<int32_t> knn_group(const PointCloud& cloud,
                               const std::vector<Point3>& centers, int64_t k);

// patch point minus its center, exactly; flattened [n * k * 3].
std::vector<float> normalize_patches(const PointCloud& cloud,
                                     const std::vector<Point3>& centers,
                                     const std::vector<int32_t>& group_indices,
                                     int64_t k);

PatchSet tokenize(const PointCloud& cloud, int64_t num_centers,
                  int64_t group_size, uint64_t seed);

// FPS-selected sub-cloud (labels carried along).
PointCloud fps_resample(const PointCloud& cloud, int64_t target_count,
                        uint64_t seed);

// Inverse-distance-weighted interpolation of source features onto query
// points: per query, the k_interp nearest sources contribute with weights
// 1/(d^power + eps), normalized to sum 1. Differentiable w.r.t.
// source_features only.
template <typename T>
TensorT<T> feature_propagation(const std::vector<Point3>& query_points,
                               const std::vector<Point3>& source_points,
                               const TensorT<T>& source_features,
                               int64_t k_interp, double power = 2.0,
                               double eps = 1e-8);

}  // namespace p2v
