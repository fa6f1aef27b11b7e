#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace bdefs {

// Seeded random source with portable derived draws. std::mt19937_64 output
// is fully specified by the standard; the distribution helpers below are
// hand-rolled because the standard library distributions are not, and
// identical seeds must reproduce identical streams on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n), unbiased via rejection.
  std::size_t below(std::size_t n) {
    assert(n > 0);
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() / n * n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return static_cast<std::size_t>(r % n);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double real01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1); never returns an endpoint.
  double open01() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return real01() < p; }

  // Box-Muller; consumes two draws per sample.
  double normal(double mean = 0.0, double stdev = 1.0) {
    const double u1 = open01();
    const double u2 = real01();
    const double z =
        std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stdev * z;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace bdefs
