#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2v/tensor.hpp"

namespace p2v {

// Linear warm-up from 0 to max_lr over warmup_steps, then cosine decay from
// max_lr to min_lr over the remaining steps.
struct LrSchedule {
  double max_lr = 1e-3;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;
  double min_lr = 0.0;

  void validate() const;
};

double lr_at(const LrSchedule& schedule, int64_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// AdamW with decoupled weight decay applied before the Adam direction:
//   param <- param * (1 - lr * wd)
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   param <- param - lr * mhat / (sqrt(vhat) + eps)
// The step counter is shared across parameters and increments once per
// step(). Parameters registered with decay=false skip the decay term
// (biases, norm scales, the mask embedding). Inactive parameters are left
// bit-untouched, which implements encoder freezing.
template <typename T>
class AdamWT {
 public:
  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void add_param(std::string name, TensorT<T> param, bool decay = true);
  // Marks every parameter whose name starts with `prefix`.
  void set_active(const std::string& prefix, bool active);
  bool any_active() const;

  // Applies one update to all active parameters and zeroes their gradients.
  // Throws NumericError naming the parameter on a non-finite gradient.
  void step(double lr);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

  struct Slot {
    std::string name;
    TensorT<T> param;
    TensorT<T> m;
    TensorT<T> v;
    bool decay = true;
    bool active = true;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace p2v
