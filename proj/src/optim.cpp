#include "p2v/optim.hpp"

#include <cmath>
#include <numbers>

#include "p2v/common.hpp"

namespace p2v {

void LrSchedule::validate() const {
  check<ConfigError>(warmup_steps >= 0 && warmup_steps <= total_steps,
                     "lr schedule: need 0 <= warmup_steps <= total_steps, got ",
                     warmup_steps, " and ", total_steps);
  check<ConfigError>(min_lr >= 0.0 && min_lr <= max_lr,
                     "lr schedule: need 0 <= min_lr <= max_lr");
}

double lr_at(const LrSchedule& schedule, int64_t step) {
  schedule.validate();
  check<ConfigError>(step >= 0 && step <= schedule.total_steps,
                     "lr_at: step ", step, " outside [0, ",
                     schedule.total_steps, "]");
  if (step < schedule.warmup_steps) {
    return schedule.max_lr * static_cast<double>(step) /
           static_cast<double>(schedule.warmup_steps);
  }
  const int64_t span = schedule.total_steps - schedule.warmup_steps;
  if (span == 0) return schedule.max_lr;
  const double progress =
      static_cast<double>(step - schedule.warmup_steps) /
      static_cast<double>(span);
  return schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) *
                               (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void AdamWT<T>::add_param(std::string name, TensorT<T> param, bool decay) {
  check(param.defined() && param.requires_grad(),
        "optimizer: parameter '", name, "' must be a tracked tensor");
  Slot slot;
  slot.name = std::move(name);
  slot.param = std::move(param);
  slot.m = TensorT<T>::zeros(slot.param.shape());
  slot.v = TensorT<T>::zeros(slot.param.shape());
  slot.decay = decay;
  slots_.push_back(std::move(slot));
}

template <typename T>
void AdamWT<T>::set_active(const std::string& prefix, bool active) {
  for (auto& slot : slots_) {
    if (slot.name.rfind(prefix, 0) == 0) slot.active = active;
  }
}

template <typename T>
bool AdamWT<T>::any_active() const {
  for (const auto& slot : slots_) {
    if (slot.active) return true;
  }
  return false;
}

template <typename T>
void AdamWT<T>::step(double lr) {
  check<ConfigError>(lr >= 0.0, "optimizer: negative learning rate");
  ++t_;
  const T b1 = static_cast<T>(cfg_.beta1);
  const T b2 = static_cast<T>(cfg_.beta2);
  const T eps = static_cast<T>(cfg_.eps);
  const T lr_t = static_cast<T>(lr);
  const T bias1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, t_));
  const T bias2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, t_));
  for (auto& slot : slots_) {
    if (!slot.active) continue;
    auto p = slot.param.mutable_values();
    auto m = slot.m.mutable_values();
    auto v = slot.v.mutable_values();
    if (!slot.param.has_grad()) {
      // No gradient reached this parameter this step; treat as zero.
      slot.param.ensure_grad();
    }
    const auto g = slot.param.grad();
    for (size_t i = 0; i < p.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError(concat("optimizer: non-finite gradient in '",
                                  slot.name, "' at index ", i));
      }
      if (slot.decay) p[i] *= T(1) - lr_t * static_cast<T>(cfg_.weight_decay);
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / bias1;
      const T vhat = v[i] / bias2;
      p[i] -= lr_t * mhat / (std::sqrt(vhat) + eps);
    }
    slot.param.zero_grad();
  }
}

template class AdamWT<float>;
template class AdamWT<double>;

}  // namespace p2v
