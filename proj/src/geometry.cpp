#include "p2v/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "p2v/common.hpp"
#include "p2v/rng.hpp"

namespace p2v {

void PointCloud::validate() const {
  check<DataError>(!points.empty(), "point cloud must contain at least one point");
  check<DataError>(labels.empty() || labels.size() == points.size(),
                   "per-point labels must match the point count");
  for (const auto& p : points) {
    for (const float c : p) {
      check<DataError>(std::isfinite(c), "non-finite coordinate in point cloud");
    }
  }
}

float squared_distance(const Point3& a, const Point3& b) {
  const float dx = a[0] - b[0];
  const float dy = a[1] - b[1];
  const float dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

std::vector<int32_t> farthest_point_sampling(const PointCloud& cloud,
                                             int64_t n, uint64_t seed) {
  const int64_t total = cloud.size();
  check<ConfigError>(n >= 1 && n <= total, "farthest_point_sampling: n = ", n,
                     " outside [1, ", total, "]");
  Rng rng(seed);
  std::vector<int32_t> selected;
  selected.reserve(n);
  std::vector<uint8_t> chosen(total, 0);
  std::vector<float> min_dist(total, std::numeric_limits<float>::max());

  int32_t current = static_cast<int32_t>(rng.uniform_int(total));
  selected.push_back(current);
  chosen[current] = 1;

  for (int64_t s = 1; s < n; ++s) {
    const Point3& last = cloud.points[current];
    int32_t best = -1;
    float best_dist = -1.0f;
    for (int64_t i = 0; i < total; ++i) {
      const float d = squared_distance(cloud.points[i], last);
      if (d < min_dist[i]) min_dist[i] = d;
      if (!chosen[i] && min_dist[i] > best_dist) {  // strict: lowest index wins ties
        best_dist = min_dist[i];
        best = static_cast<int32_t>(i);
      }
    }
    current = best;
    selected.push_back(current);
    chosen[current] = 1;
  }
  return selected;
}

std::vector<int32_t> knn_group(const PointCloud& cloud,
                               const std::vector<Point3>& centers, int64_t k) {
  const int64_t total = cloud.size();
  check<ConfigError>(k >= 1 && k <= total, "knn_group: k = ", k,
                     " outside [1, ", total, "]");
  std::vector<int32_t> out(centers.size() * k);
  std::vector<std::pair<float, int32_t>> dist(total);
  for (size_t c = 0; c < centers.size(); ++c) {
    for (int64_t i = 0; i < total; ++i) {
      dist[i] = {squared_distance(cloud.points[i], centers[c]),
                 static_cast<int32_t>(i)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int64_t j = 0; j < k; ++j) out[c * k + j] = dist[j].second;
  }
  return out;
}

std::vector<float> normalize_patches(const PointCloud& cloud,
                                     const std::vector<Point3>& centers,
                                     const std::vector<int32_t>& group_indices,
                                     int64_t k) {
  check(static_cast<int64_t>(group_indices.size()) ==
            static_cast<int64_t>(centers.size()) * k,
        "normalize_patches: group index count mismatch");
  std::vector<float> out(group_indices.size() * 3);
  for (size_t c = 0; c < centers.size(); ++c) {
    for (int64_t j = 0; j < k; ++j) {
      const int32_t idx = group_indices[c * k + j];
      check(idx >= 0 && idx < cloud.size(), "normalize_patches: bad index ", idx);
      const Point3& p = cloud.points[idx];
      float* dst = out.data() + (c * k + j) * 3;
      dst[0] = p[0] - centers[c][0];
      dst[1] = p[1] - centers[c][1];
      dst[2] = p[2] - centers[c][2];
    }
  }
  return out;
}

PatchSet tokenize(const PointCloud& cloud, int64_t num_centers,
                  int64_t group_size, uint64_t seed) {
  PatchSet set;
  set.center_indices = farthest_point_sampling(cloud, num_centers, seed);
  set.centers.reserve(num_centers);
  for (const int32_t idx : set.center_indices) {
    set.centers.push_back(cloud.points[idx]);
  }
  set.group_indices = knn_group(cloud, set.centers, group_size);
  set.normalized_patches =
      normalize_patches(cloud, set.centers, set.group_indices, group_size);
  set.num_patches = num_centers;
  set.group_size = group_size;
  return set;
}

PointCloud fps_resample(const PointCloud& cloud, int64_t target_count,
                        uint64_t seed) {
  const auto indices = farthest_point_sampling(cloud, target_count, seed);
  PointCloud out;
  out.points.reserve(indices.size());
  if (cloud.has_labels()) out.labels.reserve(indices.size());
  for (const int32_t idx : indices) {
    out.points.push_back(cloud.points[idx]);
    if (cloud.has_labels()) out.labels.push_back(cloud.labels[idx]);
  }
  return out;
}

template <typename T>
TensorT<T> feature_propagation(const std::vector<Point3>& query_points,
                               const std::vector<Point3>& source_points,
                               const TensorT<T>& source_features,
                               int64_t k_interp, double power, double eps) {
  const int64_t n_src = static_cast<int64_t>(source_points.size());
  const int64_t n_query = static_cast<int64_t>(query_points.size());
  check(n_src >= 1, "feature_propagation: need at least one source");
  check<ConfigError>(k_interp >= 1 && k_interp <= n_src,
                     "feature_propagation: k_interp = ", k_interp,
                     " outside [1, ", n_src, "]");
  check(source_features.rank() == 2 && source_features.dim(0) == n_src,
        "feature_propagation: features must be [", n_src, ", E], got ",
        shape_string(source_features.shape()));
  const int64_t e = source_features.dim(1);

  auto picked = std::make_shared<std::vector<int32_t>>(n_query * k_interp);
  auto weights = std::make_shared<std::vector<T>>(n_query * k_interp);
  std::vector<std::pair<float, int32_t>> dist(n_src);
  for (int64_t q = 0; q < n_query; ++q) {
    for (int64_t i = 0; i < n_src; ++i) {
      dist[i] = {squared_distance(source_points[i], query_points[q]),
                 static_cast<int32_t>(i)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k_interp, dist.end());
    double total = 0.0;
    for (int64_t j = 0; j < k_interp; ++j) {
      const double d = std::sqrt(static_cast<double>(dist[j].first));
      const double w = 1.0 / (std::pow(d, power) + eps);
      (*picked)[q * k_interp + j] = dist[j].second;
      (*weights)[q * k_interp + j] = static_cast<T>(w);
      total += w;
    }
    const T inv = static_cast<T>(1.0 / total);
    for (int64_t j = 0; j < k_interp; ++j) (*weights)[q * k_interp + j] *= inv;
  }

  const auto fv = source_features.values();
  std::vector<T> out(n_query * e, T(0));
  for (int64_t q = 0; q < n_query; ++q) {
    T* orow = out.data() + q * e;
    for (int64_t j = 0; j < k_interp; ++j) {
      const T w = (*weights)[q * k_interp + j];
      const T* src = fv.data() + (*picked)[q * k_interp + j] * e;
      for (int64_t f = 0; f < e; ++f) orow[f] += w * src[f];
    }
  }

  TensorT<T> result =
      TensorT<T>::from_values({n_query, e}, std::move(out));
  if (grad_enabled() && source_features.requires_grad()) {
    auto node = std::make_shared<GradNode<T>>();
    node->parents = {source_features};
    node->backward = [n_query, e, k_interp, picked,
                      weights](const TensorT<T>& o) {
      auto pf = o.node()->parents[0];
      if (!pf.requires_grad()) return;
      const auto g = o.grad();
      auto gf = pf.mutable_grad();
      for (int64_t q = 0; q < n_query; ++q) {
        const T* grow = g.data() + q * e;
        for (int64_t j = 0; j < k_interp; ++j) {
          const T w = (*weights)[q * k_interp + j];
          T* frow = gf.data() + (*picked)[q * k_interp + j] * e;
          for (int64_t f = 0; f < e; ++f) frow[f] += w * grow[f];
        }
      }
    };
    result.set_node(std::move(node));
  }
  return result;
}

template TensorT<float> feature_propagation(const std::vector<Point3>&,
                                            const std::vector<Point3>&,
                                            const TensorT<float>&, int64_t,
                                            double, double);
template TensorT<double> feature_propagation(const std::vector<Point3>&,
                                             const std::vector<Point3>&,
                                             const TensorT<double>&, int64_t,
                                             double, double);

}  // namespace p2v
