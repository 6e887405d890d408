#pragma once

// Counter-based random generator built on the SplitMix64 finalizer: the value
// at counter i is a pure function of (seed, i), so streams are reproducible,
// cheap to fork, and independent of call interleaving elsewhere.

#include <cmath>
#include <cstdint>

#include "linglo/tensor.hpp"

namespace linglo {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : seed_(seed) {}

  // Stateless access: the i-th value of the stream.
  std::uint64_t at(std::uint64_t i) const {
    std::uint64_t z = seed_ + (i + 1) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return at(counter_++); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box–Muller; the pair's second value is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Normal(0, std) re-drawn until within 2 standard deviations.
  double trunc_normal(double stddev) {
    double z = normal();
    while (z < -2.0 || z > 2.0) z = normal();
    return z * stddev;
  }

  // Derive an independent stream (e.g. one per tensor) from a label.
  SplitMix64 fork(std::uint64_t label) const {
    return SplitMix64(at(0x5eedull ^ label) ^ (label * 0xD1B54A32D192ED03ull));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

template <typename T>
void fill_trunc_normal(Tensor<T>& t, SplitMix64& rng, double stddev) {
  T* p = t.raw();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.trunc_normal(stddev));
}

template <typename T>
void fill_uniform(Tensor<T>& t, SplitMix64& rng, double lo, double hi) {
  T* p = t.raw();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, SplitMix64& rng, double stddev) {
  T* p = t.raw();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(stddev * rng.normal());
}

}  // namespace linglo
