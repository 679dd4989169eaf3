#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace p2v {

// Deterministic random source. All sampling helpers are implemented by hand
// on top of mt19937_64 so that sequences are identical across standard
// libraries; std::*_distribution is implementation-defined and would break
// bit-exact reproducibility of checkpoint resumes.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01();
  double uniform(double lo, double hi);

  // Standard normal via Box-Muller with a cached spare.
  double normal();

  // Normal(0, stddev) resampled until |x| <= bound.
  double truncated_normal(double stddev, double bound);

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

  std::string state() const;
  void set_state(const std::string& text);

  // Derives an independent stream from (master, purpose, a, b). Used so that
  // every source of training randomness is a pure function of the run seed
  // and its position in the schedule, which makes resume trivially exact.
  static Rng derive(uint64_t master, std::string_view purpose, uint64_t a = 0,
                    uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64, the recommended seed mixer.
uint64_t mix_u64(uint64_t x);

}  // namespace p2v
