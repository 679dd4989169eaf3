#include "p2v/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "p2v/common.hpp"

namespace p2v {

int64_t Rng::uniform_int(int64_t n) {
  check<ShapeError>(n > 0, "uniform_int: n must be positive, got ", n);
  const uint64_t un = static_cast<uint64_t>(n);
  // Rejection sampling to avoid modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<int64_t>(x % un);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev, double bound) {
  for (;;) {
    const double x = normal() * stddev;
    if (std::abs(x) <= bound) return x;
  }
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  if (has_spare_) os << " 1 " << std::hexfloat << spare_;
  return os.str();
}

void Rng::set_state(const std::string& text) {
  std::istringstream is(text);
  is >> engine_;
  int flag = 0;
  if (is >> flag && flag == 1) {
    is >> std::hexfloat >> spare_;
    has_spare_ = true;
  } else {
    has_spare_ = false;
  }
}

uint64_t mix_u64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::derive(uint64_t master, std::string_view purpose, uint64_t a,
                uint64_t b) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the purpose tag
  for (const char c : purpose) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001b3ULL;
  }
  uint64_t seed = mix_u64(master ^ h);
  seed = mix_u64(seed ^ mix_u64(a));
  seed = mix_u64(seed ^ mix_u64(b));
  return Rng(seed);
}

}  // namespace p2v
