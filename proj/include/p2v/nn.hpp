#pragma once

#include <functional>
#include <string>

#include "p2v/ops.hpp"
#include "p2v/tensor.hpp"

namespace p2v {

// Callback used to enumerate the named parameters of a module tree.
template <typename T>
using ParamVisitor = std::function<void(const std::string&, TensorT<T>&)>;

inline std::string join_name(const std::string& prefix, const char* leaf) {
  return prefix.empty() ? std::string(leaf) : prefix + "." + leaf;
}

template <typename T>
struct LinearT {
  TensorT<T> weight;  // [in, out]
  TensorT<T> bias;    // [out]

  static LinearT init(int64_t in, int64_t out, Rng& rng) {
    LinearT layer;
    layer.weight = trunc_normal<T>({in, out}, rng, T(0.02), T(0.04), true);
    layer.bias = TensorT<T>::zeros({out}, true);
    return layer;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return add_bias(matmul(x, weight), bias);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(join_name(prefix, "weight"), weight);
    fn(join_name(prefix, "bias"), bias);
  }
};

template <typename T>
struct LayerNormLayerT {
  TensorT<T> gamma;
  TensorT<T> beta;
  T eps = T(1e-5);

  static LayerNormLayerT init(int64_t width, T eps = T(1e-5)) {
    LayerNormLayerT layer;
    layer.gamma = TensorT<T>::from_values(
        {width}, std::vector<T>(static_cast<size_t>(width), T(1)), true);
    layer.beta = TensorT<T>::zeros({width}, true);
    layer.eps = eps;
    return layer;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return layer_norm(x, eps, gamma, beta);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(join_name(prefix, "gamma"), gamma);
    fn(join_name(prefix, "beta"), beta);
  }
};

}  // namespace p2v
