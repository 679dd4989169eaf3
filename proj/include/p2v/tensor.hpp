#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "p2v/common.hpp"

namespace p2v {

template <typename T>
class TensorT;

// One reverse-mode graph node: the producing op's parents plus a closure that
// reads the output gradient and accumulates into the parents' gradients.
template <typename T>
struct GradNode {
  std::vector<TensorT<T>> parents;
  std::function<void(const TensorT<T>& out)> backward;
};

// Dense row-major tensor with optional gradient tracking. Copying a TensorT
// copies a handle; storage is shared. Values are immutable through the public
// API except for mutable_values(), which the optimizer and the EMA update use
// for explicit in-place writes.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static TensorT full(std::vector<int64_t> shape, T value);
  static TensorT from_values(std::vector<int64_t> shape, std::vector<T> values,
                             bool requires_grad = false);
  static TensorT scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int rank() const;
  int64_t dim(int i) const;  // negative indices count from the back
  int64_t numel() const;

  std::span<const T> values() const;
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void ensure_grad();
  void zero_grad();
  void drop_grad();
  void accumulate_grad(std::span<const T> g);

  // Reverse-mode accumulation from a scalar loss. Frees the graph; calling
  // again without rebuilding the forward pass throws.
  void backward();

  // Same storage, detached from the graph and untracked.
  TensorT detached() const;
  // Deep copy of the values (gradient and graph are not copied).
  TensorT clone() const;
  // Same storage viewed under a new shape; gradients alias the parent's.
  TensorT reshaped(std::vector<int64_t> new_shape) const;

  void set_node(std::shared_ptr<GradNode<T>> node);
  const std::shared_ptr<GradNode<T>>& node() const;

 private:
  struct Impl {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<T>> values;
    std::shared_ptr<std::vector<T>> grad;  // empty until needed
    bool requires_grad = false;
    std::shared_ptr<GradNode<T>> node;
  };
  std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<float>;

bool grad_enabled();

// Disables graph construction for the current thread while alive.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_string(const std::vector<int64_t>& shape);

}  // namespace p2v
