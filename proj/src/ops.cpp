#include "p2v/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "p2v/common.hpp"
#include "p2v/parallel.hpp"

namespace p2v {

namespace {

template <typename T>
TensorT<T> make_result(std::vector<int64_t> shape, std::vector<T> values,
                       std::vector<TensorT<T>> parents,
                       std::function<void(const TensorT<T>&)> backward) {
  TensorT<T> out =
      TensorT<T>::from_values(std::move(shape), std::move(values));
  if (grad_enabled()) {
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || p.requires_grad();
    if (tracked) {
      auto node = std::make_shared<GradNode<T>>();
      node->parents = std::move(parents);
      node->backward = std::move(backward);
      out.set_node(std::move(node));
    }
  }
  return out;
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                        const char* op) {
  check(a.shape() == b.shape(), op, ": shape mismatch ",
        shape_string(a.shape()), " vs ", shape_string(b.shape()));
}

// Rows of the last axis: collapses [..., E] to [R, E].
template <typename T>
std::pair<int64_t, int64_t> last_axis_rows(const TensorT<T>& x) {
  check(x.rank() >= 1, "expected rank >= 1");
  const int64_t e = x.dim(-1);
  return {e == 0 ? 0 : x.numel() / e, e};
}

// ---------------------------------------------------------------------------
// gemm kernels
// ---------------------------------------------------------------------------

// c[M,N] (+)= alpha * a[M,K] @ b[K,N] (or b[N,K] with trans_b), repeated over
// a batch with per-operand strides (stride 0 broadcasts). Rows of the output
// are partitioned across threads; each element is produced by exactly one
// thread with a fixed summation order, so the result does not depend on the
// thread count.
template <typename T>
void gemm_batched(const T* a, const T* b, T* c, int64_t batch, int64_t m,
                  int64_t k, int64_t n, bool trans_b, T alpha, bool accumulate,
                  int64_t a_stride, int64_t b_stride, int64_t c_stride) {
  const int64_t rows = batch * m;
  parallel_for(
      0, rows,
      [=](int64_t lo, int64_t hi) {
        std::vector<T> acc(static_cast<size_t>(n));
        for (int64_t row = lo; row < hi; ++row) {
          const int64_t bi = row / m;
          const int64_t i = row % m;
          const T* arow = a + bi * a_stride + i * k;
          const T* bmat = b + bi * b_stride;
          T* crow = c + bi * c_stride + i * n;
          if (!trans_b) {
            std::fill(acc.begin(), acc.end(), T(0));
            for (int64_t kk = 0; kk < k; ++kk) {
              const T aik = arow[kk];
              const T* brow = bmat + kk * n;
              for (int64_t j = 0; j < n; ++j) acc[j] += aik * brow[j];
            }
            if (accumulate) {
              for (int64_t j = 0; j < n; ++j) crow[j] += alpha * acc[j];
            } else {
              for (int64_t j = 0; j < n; ++j) crow[j] = alpha * acc[j];
            }
          } else {
            for (int64_t j = 0; j < n; ++j) {
              const T* brow = bmat + j * k;
              T dot = T(0);
              for (int64_t kk = 0; kk < k; ++kk) dot += arow[kk] * brow[kk];
              if (accumulate) {
                crow[j] += alpha * dot;
              } else {
                crow[j] = alpha * dot;
              }
            }
          }
        }
      },
      std::max<int64_t>(1, 16384 / std::max<int64_t>(1, k * n) + 1));
}

// dB[n,k] += alpha * g[m,n]^T @ a[m,k], batched with equal strides.
template <typename T>
void gemm_tn_accumulate_scaled(const T* g, const T* a, T* c, int64_t batch,
                               int64_t m, int64_t n, int64_t k, T alpha) {
  parallel_for(0, batch * n, [=](int64_t lo, int64_t hi) {
    for (int64_t row = lo; row < hi; ++row) {
      const int64_t bi = row / n;
      const int64_t j = row % n;
      const T* gbase = g + bi * m * n;
      const T* abase = a + bi * m * k;
      T* crow = c + (bi * n + j) * k;
      for (int64_t i = 0; i < m; ++i) {
        const T gij = alpha * gbase[i * n + j];
        if (gij == T(0)) continue;
        const T* arow = abase + i * k;
        for (int64_t kk = 0; kk < k; ++kk) crow[kk] += gij * arow[kk];
      }
    }
  });
}

// c[K,N] += a[M,K]^T @ g[M,N], batched. Used for weight gradients. Parallel
// over columns of a (rows of c) to keep writes disjoint.
template <typename T>
void gemm_tn_accumulate(const T* a, const T* g, T* c, int64_t batch, int64_t m,
                        int64_t k, int64_t n, int64_t a_stride,
                        int64_t g_stride, int64_t c_stride) {
  parallel_for(0, k, [=](int64_t lo, int64_t hi) {
    for (int64_t bi = 0; bi < batch; ++bi) {
      const T* abase = a + bi * a_stride;
      const T* gbase = g + bi * g_stride;
      T* cbase = c + bi * c_stride;
      for (int64_t kk = lo; kk < hi; ++kk) {
        T* crow = cbase + kk * n;
        for (int64_t i = 0; i < m; ++i) {
          const T aik = abase[i * k + kk];
          if (aik == T(0)) continue;
          const T* grow = gbase + i * n;
          for (int64_t j = 0; j < n; ++j) crow[j] += aik * grow[j];
        }
      }
    }
  });
}

// Sums a multiset of values in a canonical (sorted) order: the result is a
// function of the value multiset only, so reductions over a permuted axis
// stay bit-identical.
template <typename T>
T multiset_sum(std::vector<T>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  T total = T(0);
  for (const T v : scratch) total += v;
  return total;
}

}  // namespace

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](const TensorT<T>& o) {
        const auto g = o.grad();
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        if (pa.requires_grad()) pa.accumulate_grad(g);
        if (pb.requires_grad()) pb.accumulate_grad(g);
      });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](const TensorT<T>& o) {
        const auto g = o.grad();
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        if (pa.requires_grad()) pa.accumulate_grad(g);
        if (pb.requires_grad()) {
          auto gb = pb.mutable_grad();
          for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [](const TensorT<T>& o) {
        const auto g = o.grad();
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        const auto av = pa.values();
        const auto bv = pb.values();
        if (pa.requires_grad()) {
          auto ga = pa.mutable_grad();
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (pb.requires_grad()) {
          auto gb = pb.mutable_grad();
          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(
      a.shape(), std::move(out), {a}, [factor](const TensorT<T>& o) {
        auto pa = o.node()->parents[0];
        if (!pa.requires_grad()) return;
        const auto g = o.grad();
        auto ga = pa.mutable_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
      });
}

template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  check(bias.rank() == 1, "add_bias: bias must be rank 1");
  const auto [rows, e] = last_axis_rows(x);
  check(bias.dim(0) == e, "add_bias: bias width ", bias.dim(0),
        " does not match last axis ", e);
  std::vector<T> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * e;
    for (int64_t j = 0; j < e; ++j) row[j] += bv[j];
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, bias}, [rows = rows, e = e](const TensorT<T>& o) {
        const auto g = o.grad();
        auto px = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        if (px.requires_grad()) px.accumulate_grad(g);
        if (pb.requires_grad()) {
          auto gb = pb.mutable_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * e;
            for (int64_t j = 0; j < e; ++j) gb[j] += grow[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  int64_t batch;
  int64_t m, k, n;
  int64_t a_stride, b_stride, c_stride;
  std::vector<int64_t> out_shape;
};

template <typename T>
MatmulDims matmul_dims(const TensorT<T>& a, const TensorT<T>& b) {
  const int ra = a.rank();
  const int rb = b.rank();
  check(ra >= 2 && rb >= 2 && ra <= 3 && rb <= 3,
        "matmul: supported ranks are 2 and 3, got ", ra, " and ", rb);
  MatmulDims d{};
  d.m = a.dim(-2);
  d.k = a.dim(-1);
  const int64_t kb = b.dim(-2);
  d.n = b.dim(-1);
  check(d.k == kb, "matmul: inner dimensions disagree: ",
        shape_string(a.shape()), " x ", shape_string(b.shape()));
  if (ra == 2 && rb == 2) {
    d.batch = 1;
    d.a_stride = 0;
    d.b_stride = 0;
    d.c_stride = 0;
    d.out_shape = {d.m, d.n};
  } else if (ra == 3 && rb == 3) {
    check(a.dim(0) == b.dim(0), "matmul: batch dimensions disagree: ",
          shape_string(a.shape()), " x ", shape_string(b.shape()));
    d.batch = a.dim(0);
    d.a_stride = d.m * d.k;
    d.b_stride = d.k * d.n;
    d.c_stride = d.m * d.n;
    d.out_shape = {d.batch, d.m, d.n};
  } else if (ra == 3 && rb == 2) {
    d.batch = a.dim(0);
    d.a_stride = d.m * d.k;
    d.b_stride = 0;  // broadcast
    d.c_stride = d.m * d.n;
    d.out_shape = {d.batch, d.m, d.n};
  } else {
    throw ShapeError(concat("matmul: unsupported rank combination ",
                            shape_string(a.shape()), " x ",
                            shape_string(b.shape())));
  }
  return d;
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const MatmulDims d = matmul_dims(a, b);
  std::vector<T> out(static_cast<size_t>(std::max<int64_t>(d.batch, 1) *
                                         d.m * d.n));
  gemm_batched<T>(a.values().data(), b.values().data(), out.data(), d.batch,
                  d.m, d.k, d.n, /*trans_b=*/false, T(1),
                  /*accumulate=*/false, d.a_stride, d.b_stride, d.c_stride);
  return make_result<T>(
      d.out_shape, std::move(out), {a, b}, [d](const TensorT<T>& o) {
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        const T* g = o.grad().data();
        if (pa.requires_grad()) {
          // dA = dC @ B^T
          gemm_batched<T>(g, pb.values().data(), pa.mutable_grad().data(),
                          d.batch, d.m, d.n, d.k, /*trans_b=*/true, T(1),
                          /*accumulate=*/true, d.c_stride, d.b_stride,
                          d.a_stride);
        }
        if (pb.requires_grad()) {
          // dB += A^T @ dC, summed over broadcast batches when b_stride == 0.
          gemm_tn_accumulate<T>(pa.values().data(), g,
                                pb.mutable_grad().data(), d.batch, d.m, d.k,
                                d.n, d.a_stride, d.c_stride, d.b_stride);
        }
      });
}

template <typename T>
TensorT<T> bmm_nt(const TensorT<T>& a, const TensorT<T>& b, T alpha) {
  check(a.rank() == 3 && b.rank() == 3, "bmm_nt: expected rank-3 inputs, got ",
        shape_string(a.shape()), " and ", shape_string(b.shape()));
  check(a.dim(0) == b.dim(0), "bmm_nt: batch mismatch");
  check(a.dim(2) == b.dim(2), "bmm_nt: inner dimensions disagree: ",
        shape_string(a.shape()), " x ", shape_string(b.shape()), "^T");
  const int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(batch * m * n));
  gemm_batched<T>(a.values().data(), b.values().data(), out.data(), batch, m,
                  k, n, /*trans_b=*/true, alpha, /*accumulate=*/false, m * k,
                  n * k, m * n);
  return make_result<T>(
      {batch, m, n}, std::move(out), {a, b},
      [batch, m, k, n, alpha](const TensorT<T>& o) {
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        const T* g = o.grad().data();
        if (pa.requires_grad()) {
          // dA += alpha * dC @ B
          gemm_batched<T>(g, pb.values().data(), pa.mutable_grad().data(),
                          batch, m, n, k, /*trans_b=*/false, alpha,
                          /*accumulate=*/true, m * n, n * k, m * k);
        }
        if (pb.requires_grad()) {
          // dB += alpha * dC^T @ A
          gemm_tn_accumulate_scaled(g, pa.values().data(),
                                    pb.mutable_grad().data(), batch, m, n, k,
                                    alpha);
        }
      });
}

template <typename T>
TensorT<T> bmm_stable(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.rank() == 3 && b.rank() == 3, "bmm_stable: expected rank-3 inputs");
  check(a.dim(0) == b.dim(0), "bmm_stable: batch mismatch");
  check(a.dim(2) == b.dim(1), "bmm_stable: inner dimensions disagree: ",
        shape_string(a.shape()), " x ", shape_string(b.shape()));
  const int64_t batch = a.dim(0), m = a.dim(1), s = a.dim(2), n = b.dim(2);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(batch * m * n);
  parallel_for(
      0, batch * m,
      [&](int64_t lo, int64_t hi) {
        std::vector<T> scratch(s);
        for (int64_t row = lo; row < hi; ++row) {
          const int64_t bi = row / m;
          const int64_t i = row % m;
          const T* arow = av.data() + (bi * m + i) * s;
          const T* bmat = bv.data() + bi * s * n;
          T* crow = out.data() + (bi * m + i) * n;
          for (int64_t j = 0; j < n; ++j) {
            for (int64_t k = 0; k < s; ++k) {
              scratch[k] = arow[k] * bmat[k * n + j];
            }
            crow[j] = multiset_sum(scratch);
          }
        }
      },
      std::max<int64_t>(1, 4096 / std::max<int64_t>(1, s * n) + 1));
  return make_result<T>(
      {batch, m, n}, std::move(out), {a, b},
      [batch, m, s, n](const TensorT<T>& o) {
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        const T* g = o.grad().data();
        if (pa.requires_grad()) {
          // dA += dC @ B^T
          gemm_batched<T>(g, pb.values().data(), pa.mutable_grad().data(),
                          batch, m, n, s, /*trans_b=*/true, T(1),
                          /*accumulate=*/true, m * n, s * n, m * s);
        }
        if (pb.requires_grad()) {
          // dB += A^T @ dC
          gemm_tn_accumulate<T>(pa.values().data(), g,
                                pb.mutable_grad().data(), batch, m, s, n,
                                m * s, m * n, s * n);
        }
      });
}

// ---------------------------------------------------------------------------
// layer norm / softmax / gelu
// ---------------------------------------------------------------------------

namespace {

template <typename T>
TensorT<T> layer_norm_impl(const TensorT<T>& x, T eps, const TensorT<T>* gamma,
                           const TensorT<T>* beta) {
  check(eps > T(0), "layer_norm: eps must be positive");
  const auto [rows, e] = last_axis_rows(x);
  check(e >= 1, "layer_norm: empty last axis");
  if (gamma != nullptr) {
    check(gamma->rank() == 1 && gamma->dim(0) == e &&
              beta->rank() == 1 && beta->dim(0) == e,
          "layer_norm: affine parameters must have shape [", e, "]");
  }
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  // Saved for backward: per-row inverse stddev and the normalized values.
  auto rstd = std::make_shared<std::vector<T>>(rows);
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  const T* gv = gamma ? gamma->values().data() : nullptr;
  const T* bv = beta ? beta->values().data() : nullptr;
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * e;
    T mean = T(0);
    for (int64_t j = 0; j < e; ++j) mean += row[j];
    mean /= static_cast<T>(e);
    T var = T(0);
    for (int64_t j = 0; j < e; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(e);
    const T r_inv = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = r_inv;
    T* orow = out.data() + r * e;
    T* hrow = xhat->data() + r * e;
    for (int64_t j = 0; j < e; ++j) {
      const T h = (row[j] - mean) * r_inv;
      hrow[j] = h;
      orow[j] = gv ? gv[j] * h + bv[j] : h;
    }
  }
  std::vector<TensorT<T>> parents = {x};
  if (gamma != nullptr) {
    parents.push_back(*gamma);
    parents.push_back(*beta);
  }
  const bool affine = gamma != nullptr;
  return make_result<T>(
      x.shape(), std::move(out), std::move(parents),
      [rows = rows, e = e, rstd, xhat, affine](const TensorT<T>& o) {
        const auto g = o.grad();
        auto px = o.node()->parents[0];
        const T* gamma_v = nullptr;
        if (affine) gamma_v = o.node()->parents[1].values().data();
        if (affine) {
          auto pg = o.node()->parents[1];
          auto pb = o.node()->parents[2];
          if (pg.requires_grad()) {
            auto gg = pg.mutable_grad();
            for (int64_t r = 0; r < rows; ++r) {
              const T* grow = g.data() + r * e;
              const T* hrow = xhat->data() + r * e;
              for (int64_t j = 0; j < e; ++j) gg[j] += grow[j] * hrow[j];
            }
          }
          if (pb.requires_grad()) {
            auto gb = pb.mutable_grad();
            for (int64_t r = 0; r < rows; ++r) {
              const T* grow = g.data() + r * e;
              for (int64_t j = 0; j < e; ++j) gb[j] += grow[j];
            }
          }
        }
        if (!px.requires_grad()) return;
        auto gx = px.mutable_grad();
        const T inv_e = T(1) / static_cast<T>(e);
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = g.data() + r * e;
          const T* hrow = xhat->data() + r * e;
          T* gxrow = gx.data() + r * e;
          T sum_gh = T(0);
          T sum_ghh = T(0);
          for (int64_t j = 0; j < e; ++j) {
            const T gh = gamma_v ? grow[j] * gamma_v[j] : grow[j];
            sum_gh += gh;
            sum_ghh += gh * hrow[j];
          }
          const T mean_gh = sum_gh * inv_e;
          const T mean_ghh = sum_ghh * inv_e;
          const T r_inv = (*rstd)[r];
          for (int64_t j = 0; j < e; ++j) {
            const T gh = gamma_v ? grow[j] * gamma_v[j] : grow[j];
            gxrow[j] += r_inv * (gh - mean_gh - hrow[j] * mean_ghh);
          }
        }
      });
}

}  // namespace

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, T eps) {
  return layer_norm_impl<T>(x, eps, nullptr, nullptr);
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, T eps, const TensorT<T>& gamma,
                      const TensorT<T>& beta) {
  return layer_norm_impl<T>(x, eps, &gamma, &beta);
}

template <typename T>
TensorT<T> softmax_last(const TensorT<T>& x) {
  const auto [rows, e] = last_axis_rows(x);
  check(e >= 1, "softmax: empty last axis");
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  std::vector<T> scratch(e);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * e;
    T* orow = out.data() + r * e;
    T mx = row[0];
    for (int64_t j = 1; j < e; ++j) mx = std::max(mx, row[j]);
    for (int64_t j = 0; j < e; ++j) {
      orow[j] = std::exp(row[j] - mx);
      scratch[j] = orow[j];
    }
    // canonical-order denominator: invariant to input permutations
    const T denom = multiset_sum(scratch);
    const T inv = T(1) / denom;
    for (int64_t j = 0; j < e; ++j) orow[j] *= inv;
  }
  return make_result<T>(
      x.shape(), std::move(out), {x}, [rows = rows, e = e](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        const auto y = o.values();
        auto gx = px.mutable_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = g.data() + r * e;
          const T* yrow = y.data() + r * e;
          T* gxrow = gx.data() + r * e;
          T dot = T(0);
          for (int64_t j = 0; j < e; ++j) dot += grow[j] * yrow[j];
          for (int64_t j = 0; j < e; ++j) {
            gxrow[j] += yrow[j] * (grow[j] - dot);
          }
        }
      });
}

namespace {
template <typename T>
constexpr T kSqrt2OverPi = T(0.7978845608028653558799);
template <typename T>
constexpr T kCubic = T(0.044715);
}  // namespace

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    const T v = xv[i];
    const T t = std::tanh(kSqrt2OverPi<T> * (v + kCubic<T> * v * v * v));
    out[i] = T(0.5) * v * (T(1) + t);
  }
  return make_result<T>(
      x.shape(), std::move(out), {x}, [](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        const auto xv = px.values();
        auto gx = px.mutable_grad();
        for (size_t i = 0; i < g.size(); ++i) {
          const T v = xv[i];
          const T u = kSqrt2OverPi<T> * (v + kCubic<T> * v * v * v);
          const T t = std::tanh(u);
          const T sech2 = T(1) - t * t;
          const T du = kSqrt2OverPi<T> * (T(1) + T(3) * kCubic<T> * v * v);
          const T d = T(0.5) * (T(1) + t) + T(0.5) * v * sech2 * du;
          gx[i] += g[i] * d;
        }
      });
}

template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, bool training, Rng& rng) {
  check<ConfigError>(rate >= 0.0 && rate < 1.0,
                     "dropout: rate must be in [0, 1), got ", rate);
  if (!training || rate == 0.0) return x;
  const T scale_keep = T(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    const T m = rng.uniform01() < rate ? T(0) : scale_keep;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  return make_result<T>(
      x.shape(), std::move(out), {x}, [mask](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
      });
}

template <typename T>
TensorT<T> drop_path(const TensorT<T>& x, double rate, bool training,
                     Rng& rng) {
  check<ConfigError>(rate >= 0.0 && rate < 1.0,
                     "drop_path: rate must be in [0, 1), got ", rate);
  if (!training || rate == 0.0) return x;
  check(x.rank() >= 1, "drop_path: expected a batched tensor");
  const int64_t batch = x.dim(0);
  const int64_t per = batch == 0 ? 0 : x.numel() / batch;
  const T scale_keep = T(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(batch);
  for (int64_t b = 0; b < batch; ++b) {
    (*mask)[b] = rng.uniform01() < rate ? T(0) : scale_keep;
  }
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < batch; ++b) {
    const T m = (*mask)[b];
    const T* src = xv.data() + b * per;
    T* dst = out.data() + b * per;
    for (int64_t i = 0; i < per; ++i) dst[i] = src[i] * m;
  }
  return make_result<T>(
      x.shape(), std::move(out), {x}, [mask, per](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (size_t b = 0; b < mask->size(); ++b) {
          const T m = (*mask)[b];
          if (m == T(0)) continue;
          const T* grow = g.data() + b * per;
          T* gxrow = gx.data() + b * per;
          for (int64_t i = 0; i < per; ++i) gxrow[i] += grow[i] * m;
        }
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T total = T(0);
  for (const T v : x.values()) total += v;
  return make_result<T>(
      {}, {total}, {x}, [](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const T g = o.grad()[0];
        auto gx = px.mutable_grad();
        for (auto& v : gx) v += g;
      });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  check(x.numel() > 0, "mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
TensorT<T> reduce_max_mid(const TensorT<T>& x) {
  check(x.rank() == 3, "reduce_max_mid: expected rank 3, got ",
        shape_string(x.shape()));
  const int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  check(b >= 1, "reduce_max_mid: empty reduction axis");
  const auto xv = x.values();
  std::vector<T> out(a * c, std::numeric_limits<T>::lowest());
  auto argmax = std::make_shared<std::vector<int32_t>>(a * c, 0);
  for (int64_t i = 0; i < a; ++i) {
    for (int64_t j = 0; j < b; ++j) {
      const T* row = xv.data() + (i * b + j) * c;
      T* orow = out.data() + i * c;
      int32_t* arow = argmax->data() + i * c;
      for (int64_t k = 0; k < c; ++k) {
        if (row[k] > orow[k]) {  // strict: ties keep the lowest index
          orow[k] = row[k];
          arow[k] = static_cast<int32_t>(j);
        }
      }
    }
  }
  return make_result<T>(
      {a, c}, std::move(out), {x}, [a, b, c, argmax](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t i = 0; i < a; ++i) {
          for (int64_t k = 0; k < c; ++k) {
            const int64_t j = (*argmax)[i * c + k];
            gx[(i * b + j) * c + k] += g[i * c + k];
          }
        }
      });
}

template <typename T>
TensorT<T> reduce_mean_mid(const TensorT<T>& x) {
  check(x.rank() == 3, "reduce_mean_mid: expected rank 3, got ",
        shape_string(x.shape()));
  const int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  check(b >= 1, "reduce_mean_mid: empty reduction axis");
  const auto xv = x.values();
  std::vector<T> out(a * c, T(0));
  const T inv = T(1) / static_cast<T>(b);
  std::vector<T> scratch(b);
  for (int64_t i = 0; i < a; ++i) {
    T* orow = out.data() + i * c;
    for (int64_t k = 0; k < c; ++k) {
      for (int64_t j = 0; j < b; ++j) scratch[j] = xv[(i * b + j) * c + k];
      // canonical-order sum keeps the mean invariant to axis permutations
      orow[k] = multiset_sum(scratch) * inv;
    }
  }
  return make_result<T>(
      {a, c}, std::move(out), {x}, [a, b, c, inv](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t i = 0; i < a; ++i) {
          for (int64_t j = 0; j < b; ++j) {
            T* gxrow = gx.data() + (i * b + j) * c;
            const T* grow = g.data() + i * c;
            for (int64_t k = 0; k < c; ++k) gxrow[k] += grow[k] * inv;
          }
        }
      });
}

template <typename T>
TensorT<T> expand_mid(const TensorT<T>& x, int64_t repeat) {
  check(x.rank() == 2, "expand_mid: expected rank 2, got ",
        shape_string(x.shape()));
  check(repeat >= 1, "expand_mid: repeat must be >= 1");
  const int64_t a = x.dim(0), c = x.dim(1);
  const auto xv = x.values();
  std::vector<T> out(a * repeat * c);
  for (int64_t i = 0; i < a; ++i) {
    const T* row = xv.data() + i * c;
    for (int64_t j = 0; j < repeat; ++j) {
      std::copy(row, row + c, out.data() + (i * repeat + j) * c);
    }
  }
  return make_result<T>(
      {a, repeat, c}, std::move(out), {x},
      [a, repeat, c](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t i = 0; i < a; ++i) {
          T* gxrow = gx.data() + i * c;
          for (int64_t j = 0; j < repeat; ++j) {
            const T* grow = g.data() + (i * repeat + j) * c;
            for (int64_t k = 0; k < c; ++k) gxrow[k] += grow[k];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape / indexing
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> concat_last(const TensorT<T>& a, const TensorT<T>& b) {
  check(a.rank() == b.rank() && a.rank() >= 1, "concat_last: rank mismatch");
  for (int i = 0; i + 1 < a.rank(); ++i) {
    check(a.dim(i) == b.dim(i), "concat_last: leading dims differ at axis ", i);
  }
  const int64_t ca = a.dim(-1), cb = b.dim(-1);
  const auto [rows, unused] = last_axis_rows(a);
  (void)unused;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(rows * (ca + cb));
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(av.data() + r * ca, av.data() + (r + 1) * ca,
              out.data() + r * (ca + cb));
    std::copy(bv.data() + r * cb, bv.data() + (r + 1) * cb,
              out.data() + r * (ca + cb) + ca);
  }
  std::vector<int64_t> shape = a.shape();
  shape.back() = ca + cb;
  return make_result<T>(
      std::move(shape), std::move(out), {a, b},
      [rows = rows, ca, cb](const TensorT<T>& o) {
        const auto g = o.grad();
        auto pa = o.node()->parents[0];
        auto pb = o.node()->parents[1];
        if (pa.requires_grad()) {
          auto ga = pa.mutable_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * (ca + cb);
            T* garow = ga.data() + r * ca;
            for (int64_t j = 0; j < ca; ++j) garow[j] += grow[j];
          }
        }
        if (pb.requires_grad()) {
          auto gb = pb.mutable_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * (ca + cb) + ca;
            T* gbrow = gb.data() + r * cb;
            for (int64_t j = 0; j < cb; ++j) gbrow[j] += grow[j];
          }
        }
      });
}

template <typename T>
TensorT<T> slice_last(const TensorT<T>& x, int64_t offset, int64_t length) {
  const auto [rows, e] = last_axis_rows(x);
  check(offset >= 0 && length >= 1 && offset + length <= e,
        "slice_last: range [", offset, ", ", offset + length,
        ") out of bounds for width ", e);
  const auto xv = x.values();
  std::vector<T> out(rows * length);
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xv.data() + r * e + offset, xv.data() + r * e + offset + length,
              out.data() + r * length);
  }
  std::vector<int64_t> shape = x.shape();
  shape.back() = length;
  return make_result<T>(
      std::move(shape), std::move(out), {x},
      [rows = rows, e = e, offset, length](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = g.data() + r * length;
          T* gxrow = gx.data() + r * e + offset;
          for (int64_t j = 0; j < length; ++j) gxrow[j] += grow[j];
        }
      });
}

template <typename T>
TensorT<T> gather_tokens(const TensorT<T>& x, const IndexLists& indices) {
  check(x.rank() == 3, "gather_tokens: expected [B, S, E], got ",
        shape_string(x.shape()));
  const int64_t batch = x.dim(0), s = x.dim(1), e = x.dim(2);
  check(static_cast<int64_t>(indices.size()) == batch,
        "gather_tokens: need one index list per batch item");
  const int64_t l = indices.empty() ? 0 : static_cast<int64_t>(indices[0].size());
  for (const auto& list : indices) {
    check(static_cast<int64_t>(list.size()) == l,
          "gather_tokens: ragged index lists");
    for (const int32_t idx : list) {
      check(idx >= 0 && idx < s, "gather_tokens: index ", idx,
            " out of range [0, ", s, ")");
    }
  }
  const auto xv = x.values();
  std::vector<T> out(batch * l * e);
  auto idx_copy = std::make_shared<IndexLists>(indices);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t j = 0; j < l; ++j) {
      const int64_t src = (b * s + indices[b][j]) * e;
      std::copy(xv.data() + src, xv.data() + src + e,
                out.data() + (b * l + j) * e);
    }
  }
  return make_result<T>(
      {batch, l, e}, std::move(out), {x},
      [batch, s, e, l, idx_copy](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t j = 0; j < l; ++j) {
            const T* grow = g.data() + (b * l + j) * e;
            T* gxrow = gx.data() + (b * s + (*idx_copy)[b][j]) * e;
            for (int64_t k = 0; k < e; ++k) gxrow[k] += grow[k];
          }
        }
      });
}

template <typename T>
TensorT<T> assemble_tokens(const TensorT<T>& visible, const TensorT<T>& fill,
                           const IndexLists& indices, int64_t total_tokens) {
  check(visible.rank() == 3, "assemble_tokens: expected [B, V, E], got ",
        shape_string(visible.shape()));
  check(fill.rank() == 1 && fill.dim(0) == visible.dim(2),
        "assemble_tokens: fill vector width mismatch");
  const int64_t batch = visible.dim(0), v = visible.dim(1), e = visible.dim(2);
  check(static_cast<int64_t>(indices.size()) == batch,
        "assemble_tokens: need one index list per batch item");
  std::vector<uint8_t> taken(batch * total_tokens, 0);
  for (int64_t b = 0; b < batch; ++b) {
    check(static_cast<int64_t>(indices[b].size()) == v,
          "assemble_tokens: index list length must equal visible count");
    for (const int32_t idx : indices[b]) {
      check(idx >= 0 && idx < total_tokens, "assemble_tokens: index ", idx,
            " out of range [0, ", total_tokens, ")");
      check(!taken[b * total_tokens + idx],
            "assemble_tokens: duplicate index ", idx);
      taken[b * total_tokens + idx] = 1;
    }
  }
  const auto vv = visible.values();
  const auto fv = fill.values();
  std::vector<T> out(batch * total_tokens * e);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < total_tokens; ++t) {
      std::copy(fv.begin(), fv.end(), out.data() + (b * total_tokens + t) * e);
    }
    for (int64_t j = 0; j < v; ++j) {
      const int64_t dst = (b * total_tokens + indices[b][j]) * e;
      std::copy(vv.data() + (b * v + j) * e, vv.data() + (b * v + j + 1) * e,
                out.data() + dst);
    }
  }
  auto idx_copy = std::make_shared<IndexLists>(indices);
  auto taken_copy = std::make_shared<std::vector<uint8_t>>(std::move(taken));
  return make_result<T>(
      {batch, total_tokens, e}, std::move(out), {visible, fill},
      [batch, v, e, total_tokens, idx_copy, taken_copy](const TensorT<T>& o) {
        const auto g = o.grad();
        auto pv = o.node()->parents[0];
        auto pf = o.node()->parents[1];
        if (pv.requires_grad()) {
          auto gv = pv.mutable_grad();
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t j = 0; j < v; ++j) {
              const T* grow = g.data() + (b * total_tokens + (*idx_copy)[b][j]) * e;
              T* gvrow = gv.data() + (b * v + j) * e;
              for (int64_t k = 0; k < e; ++k) gvrow[k] += grow[k];
            }
          }
        }
        if (pf.requires_grad()) {
          auto gf = pf.mutable_grad();
          for (int64_t b = 0; b < batch; ++b) {
            for (int64_t t = 0; t < total_tokens; ++t) {
              if ((*taken_copy)[b * total_tokens + t]) continue;
              const T* grow = g.data() + (b * total_tokens + t) * e;
              for (int64_t k = 0; k < e; ++k) gf[k] += grow[k];
            }
          }
        }
      });
}

template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, int64_t heads) {
  check(x.rank() == 3, "split_heads: expected [B, S, E], got ",
        shape_string(x.shape()));
  const int64_t batch = x.dim(0), s = x.dim(1), e = x.dim(2);
  check(heads >= 1 && e % heads == 0,
        "split_heads: width ", e, " not divisible by ", heads, " heads");
  const int64_t hd = e / heads;
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t t = 0; t < s; ++t) {
        const T* src = xv.data() + (b * s + t) * e + h * hd;
        T* dst = out.data() + ((b * heads + h) * s + t) * hd;
        std::copy(src, src + hd, dst);
      }
    }
  }
  return make_result<T>(
      {batch * heads, s, hd}, std::move(out), {x},
      [batch, s, e, heads, hd](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            for (int64_t t = 0; t < s; ++t) {
              const T* grow = g.data() + ((b * heads + h) * s + t) * hd;
              T* gxrow = gx.data() + (b * s + t) * e + h * hd;
              for (int64_t k = 0; k < hd; ++k) gxrow[k] += grow[k];
            }
          }
        }
      });
}

template <typename T>
TensorT<T> merge_heads(const TensorT<T>& x, int64_t heads) {
  check(x.rank() == 3, "merge_heads: expected [B*H, S, D], got ",
        shape_string(x.shape()));
  const int64_t bh = x.dim(0), s = x.dim(1), hd = x.dim(2);
  check(heads >= 1 && bh % heads == 0, "merge_heads: leading dim ", bh,
        " not divisible by ", heads, " heads");
  const int64_t batch = bh / heads;
  const int64_t e = heads * hd;
  const auto xv = x.values();
  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t t = 0; t < s; ++t) {
        const T* src = xv.data() + ((b * heads + h) * s + t) * hd;
        T* dst = out.data() + (b * s + t) * e + h * hd;
        std::copy(src, src + hd, dst);
      }
    }
  }
  return make_result<T>(
      {batch, s, e}, std::move(out), {x},
      [batch, s, e, heads, hd](const TensorT<T>& o) {
        auto px = o.node()->parents[0];
        if (!px.requires_grad()) return;
        const auto g = o.grad();
        auto gx = px.mutable_grad();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t h = 0; h < heads; ++h) {
            for (int64_t t = 0; t < s; ++t) {
              const T* grow = g.data() + (b * s + t) * e + h * hd;
              T* gxrow = gx.data() + ((b * heads + h) * s + t) * hd;
              for (int64_t k = 0; k < hd; ++k) gxrow[k] += grow[k];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> smooth_l1(const TensorT<T>& pred, const TensorT<T>& target,
                     T beta) {
  require_same_shape(pred, target, "smooth_l1");
  check(beta > T(0), "smooth_l1: beta must be positive");
  const auto pv = pred.values();
  const auto tv = target.values();
  const int64_t n = pred.numel();
  check(n > 0, "smooth_l1: empty input");
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T d = pv[i] - tv[i];
    const T ad = std::abs(d);
    total += ad < beta ? T(0.5) * d * d / beta : ad - T(0.5) * beta;
  }
  total /= static_cast<T>(n);
  auto target_vals = std::make_shared<std::vector<T>>(tv.begin(), tv.end());
  return make_result<T>(
      {}, {total}, {pred}, [beta, n, target_vals](const TensorT<T>& o) {
        auto pp = o.node()->parents[0];
        if (!pp.requires_grad()) return;
        const T g = o.grad()[0] / static_cast<T>(n);
        const auto pv = pp.values();
        auto gp = pp.mutable_grad();
        for (int64_t i = 0; i < n; ++i) {
          const T d = pv[i] - (*target_vals)[i];
          const T slope = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
          gp[i] += g * slope;
        }
      });
}

template <typename T>
TensorT<T> label_smoothing_loss(const TensorT<T>& logits,
                                const std::vector<int>& labels, T eps) {
  check(logits.rank() == 2, "label_smoothing_loss: expected [B, C], got ",
        shape_string(logits.shape()));
  check(eps >= T(0) && eps < T(1),
        "label_smoothing_loss: eps must be in [0, 1)");
  const int64_t batch = logits.dim(0), classes = logits.dim(1);
  check(static_cast<int64_t>(labels.size()) == batch,
        "label_smoothing_loss: need one label per row");
  check(classes >= 2 || eps == T(0),
        "label_smoothing_loss: smoothing needs at least 2 classes");
  for (const int y : labels) {
    check(y >= 0 && y < classes, "label_smoothing_loss: label ", y,
          " out of range [0, ", classes, ")");
  }
  const auto lv = logits.values();
  // log-softmax rows and the resulting mean loss
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  const T off = classes >= 2 ? eps / static_cast<T>(classes - 1) : T(0);
  const T on = T(1) - eps;
  T total = T(0);
  for (int64_t b = 0; b < batch; ++b) {
    const T* row = lv.data() + b * classes;
    T mx = row[0];
    for (int64_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (int64_t j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom) + mx;
    for (int64_t j = 0; j < classes; ++j) {
      const T logp = row[j] - log_denom;
      (*probs)[b * classes + j] = std::exp(logp);
      const T q = j == labels[b] ? on : off;
      if (q != T(0)) total -= q * logp;
    }
  }
  total /= static_cast<T>(batch);
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_result<T>(
      {}, {total}, {logits},
      [batch, classes, on, off, probs, labels_copy](const TensorT<T>& o) {
        auto pl = o.node()->parents[0];
        if (!pl.requires_grad()) return;
        const T g = o.grad()[0] / static_cast<T>(batch);
        auto gl = pl.mutable_grad();
        for (int64_t b = 0; b < batch; ++b) {
          const int y = (*labels_copy)[b];
          for (int64_t j = 0; j < classes; ++j) {
            const T q = j == y ? on : off;
            gl[b * classes + j] += g * ((*probs)[b * classes + j] - q);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// init / checks
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> randn(std::vector<int64_t> shape, Rng& rng, T stddev,
                 bool requires_grad) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape), requires_grad);
  auto v = t.mutable_values();
  for (auto& x : v) x = static_cast<T>(rng.normal()) * stddev;
  return t;
}

template <typename T>
TensorT<T> trunc_normal(std::vector<int64_t> shape, Rng& rng, T stddev,
                        T bound, bool requires_grad) {
  TensorT<T> t = TensorT<T>::zeros(std::move(shape), requires_grad);
  auto v = t.mutable_values();
  for (auto& x : v) {
    x = static_cast<T>(rng.truncated_normal(static_cast<double>(stddev),
                                            static_cast<double>(bound)));
  }
  return t;
}

template <typename T>
void check_finite(const TensorT<T>& x, const char* context) {
  for (const T v : x.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(concat(context, ": non-finite value encountered"));
    }
  }
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define P2V_INSTANTIATE_OPS(T)                                                \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> scale(const TensorT<T>&, T);                            \
  template TensorT<T> add_bias(const TensorT<T>&, const TensorT<T>&);         \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> bmm_nt(const TensorT<T>&, const TensorT<T>&, T);        \
  template TensorT<T> bmm_stable(const TensorT<T>&, const TensorT<T>&);       \
  template TensorT<T> layer_norm(const TensorT<T>&, T);                       \
  template TensorT<T> layer_norm(const TensorT<T>&, T, const TensorT<T>&,     \
                                 const TensorT<T>&);                          \
  template TensorT<T> softmax_last(const TensorT<T>&);                        \
  template TensorT<T> gelu(const TensorT<T>&);                                \
  template TensorT<T> dropout(const TensorT<T>&, double, bool, Rng&);         \
  template TensorT<T> drop_path(const TensorT<T>&, double, bool, Rng&);       \
  template TensorT<T> sum_all(const TensorT<T>&);                             \
  template TensorT<T> mean_all(const TensorT<T>&);                            \
  template TensorT<T> reduce_max_mid(const TensorT<T>&);                      \
  template TensorT<T> reduce_mean_mid(const TensorT<T>&);                     \
  template TensorT<T> expand_mid(const TensorT<T>&, int64_t);                 \
  template TensorT<T> concat_last(const TensorT<T>&, const TensorT<T>&);      \
  template TensorT<T> slice_last(const TensorT<T>&, int64_t, int64_t);        \
  template TensorT<T> gather_tokens(const TensorT<T>&, const IndexLists&);    \
  template TensorT<T> assemble_tokens(const TensorT<T>&, const TensorT<T>&,   \
                                      const IndexLists&, int64_t);            \
  template TensorT<T> split_heads(const TensorT<T>&, int64_t);                \
  template TensorT<T> merge_heads(const TensorT<T>&, int64_t);                \
  template TensorT<T> smooth_l1(const TensorT<T>&, const TensorT<T>&, T);     \
  template TensorT<T> label_smoothing_loss(const TensorT<T>&,                 \
                                           const std::vector<int>&, T);       \
  template TensorT<T> randn(std::vector<int64_t>, Rng&, T, bool);             \
  template TensorT<T> trunc_normal(std::vector<int64_t>, Rng&, T, T, bool);   \
  template void check_finite(const TensorT<T>&, const char*);

P2V_INSTANTIATE_OPS(float)
P2V_INSTANTIATE_OPS(double)

#undef P2V_INSTANTIATE_OPS

}  // namespace p2v
