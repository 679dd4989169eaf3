#include "p2v/embedding.hpp"

#include "p2v/common.hpp"
#include "p2v/ops.hpp"

namespace p2v {

void MiniPointNetConfig::validate() const {
  check<ConfigError>(!first_mlp.empty(), "mini-pointnet: first MLP is empty");
  check<ConfigError>(out_dim >= 1, "mini-pointnet: bad output width");
  for (const int64_t w : first_mlp) {
    check<ConfigError>(w >= 1, "mini-pointnet: bad first-MLP width");
  }
  for (const int64_t w : second_hidden) {
    check<ConfigError>(w >= 1, "mini-pointnet: bad second-MLP width");
  }
}

template <typename T>
MiniPointNetT<T> MiniPointNetT<T>::init(const MiniPointNetConfig& cfg,
                                        Rng& rng) {
  cfg.validate();
  MiniPointNetT net;
  net.cfg = cfg;
  int64_t in = 3;
  for (const int64_t w : cfg.first_mlp) {
    net.first.push_back(LinearT<T>::init(in, w, rng));
    net.first_norm.push_back(LayerNormLayerT<T>::init(w));
    in = w;
  }
  in = cfg.second_in();
  for (const int64_t w : cfg.second_hidden) {
    net.second.push_back(LinearT<T>::init(in, w, rng));
    net.second_norm.push_back(LayerNormLayerT<T>::init(w));
    in = w;
  }
  net.second.push_back(LinearT<T>::init(in, cfg.out_dim, rng));
  return net;
}

template <typename T>
TensorT<T> MiniPointNetT<T>::forward(const TensorT<T>& patches) const {
  check(patches.rank() == 3 && patches.dim(2) == 3,
        "mini-pointnet: expected [P, k, 3], got ",
        shape_string(patches.shape()));
  const int64_t p = patches.dim(0);
  const int64_t k = patches.dim(1);
  check(k >= 1, "mini-pointnet: empty patches");

  TensorT<T> x = patches.reshaped({p * k, 3});
  for (size_t i = 0; i < first.size(); ++i) {
    x = gelu(first_norm[i].forward(first[i].forward(x)));
  }
  const int64_t f = cfg.first_mlp.back();
  x = x.reshaped({p, k, f});
  TensorT<T> pooled = reduce_max_mid(x);              // [P, f]
  x = concat_last(x, expand_mid(pooled, k));          // [P, k, 2f]
  x = x.reshaped({p * k, 2 * f});
  for (size_t i = 0; i < second_norm.size(); ++i) {
    x = gelu(second_norm[i].forward(second[i].forward(x)));
  }
  x = second.back().forward(x);                       // [P*k, out]
  x = x.reshaped({p, k, cfg.out_dim});
  return reduce_max_mid(x);                           // [P, out]
}

template <typename T>
void MiniPointNetT<T>::visit(const std::string& prefix,
                             const ParamVisitor<T>& fn) {
  for (size_t i = 0; i < first.size(); ++i) {
    first[i].visit(prefix + ".first" + std::to_string(i), fn);
    first_norm[i].visit(prefix + ".first_norm" + std::to_string(i), fn);
  }
  for (size_t i = 0; i < second.size(); ++i) {
    second[i].visit(prefix + ".second" + std::to_string(i), fn);
  }
  for (size_t i = 0; i < second_norm.size(); ++i) {
    second_norm[i].visit(prefix + ".second_norm" + std::to_string(i), fn);
  }
}

template <typename T>
PosEncoderT<T> PosEncoderT<T>::init(int64_t hidden, int64_t out, Rng& rng) {
  check<ConfigError>(hidden >= 1 && out >= 1, "pos encoder: bad widths");
  PosEncoderT enc;
  enc.fc1 = LinearT<T>::init(3, hidden, rng);
  enc.fc2 = LinearT<T>::init(hidden, out, rng);
  return enc;
}

template <typename T>
TensorT<T> PosEncoderT<T>::forward(const TensorT<T>& centers) const {
  check(centers.dim(-1) == 3, "pos encoder: expected [..., 3], got ",
        shape_string(centers.shape()));
  return fc2.forward(gelu(fc1.forward(centers)));
}

template <typename T>
void PosEncoderT<T>::visit(const std::string& prefix,
                           const ParamVisitor<T>& fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

template struct MiniPointNetT<float>;
template struct MiniPointNetT<double>;
template struct PosEncoderT<float>;
template struct PosEncoderT<double>;

}  // namespace p2v
