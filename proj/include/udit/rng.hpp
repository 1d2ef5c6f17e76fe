#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace udit {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG stream. mt19937_64 has standard-fixed output, and the
// Gaussian path is hand-rolled Box-Muller (std::normal_distribution is
// implementation-defined, which would break run-to-run byte reproducibility
// across toolchains).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

  // Derive an independent named substream from this seed.
  Rng fork(std::uint64_t salt) const {
    return Rng(splitmix64(seed_ ^ splitmix64(salt)));
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi), rejection-sampled so the stream is exact.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Normal(0, std) resampled until |x| <= bound (absolute).
  double truncated_normal(double std_dev, double bound) {
    double x;
    do {
      x = normal() * std_dev;
    } while (std::fabs(x) > bound);
    return x;
  }

  template <typename T>
  void fill_normal(std::span<T> out, double std_dev = 1.0) {
    for (auto& v : out) v = static_cast<T>(normal() * std_dev);
  }

  template <typename T>
  void fill_truncated_normal(std::span<T> out, double std_dev, double bound) {
    for (auto& v : out) v = static_cast<T>(truncated_normal(std_dev, bound));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace udit
