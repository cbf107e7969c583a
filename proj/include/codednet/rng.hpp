#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace codednet {

// Deterministic RNG: mt19937_64 plus hand-rolled distribution transforms.
// The standard distribution classes are implementation-defined, so relying
// on them would tie reproducibility to a libstdc++ version; these transforms
// fix the byte-exact stream for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform on [0, n) without modulo bias (rejection sampling).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t bound = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t v = next_u64();
    while (v >= bound) v = next_u64();
    return v % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = uniform_int(i);
      std::swap(first[static_cast<std::ptrdiff_t>(i - 1)],
                first[static_cast<std::ptrdiff_t>(j)]);
    }
  }

  // Independent child stream; distinct tags give distinct streams.
  Rng spawn(std::uint64_t tag) {
    return Rng(next_u64() ^ (tag * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace codednet
