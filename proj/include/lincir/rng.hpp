#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace lincir {

// Deterministic random source. The engine is mt19937_64 (its output stream
// is pinned by the language standard); every distribution on top of it is
// implemented here explicitly so draws per sample stay fixed forever.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0,1): 53-bit mantissa fill.
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n);

  // Box-Muller, cosine branch only: two uniforms per draw, no cached spare.
  double gaussian();

  // Inverse CDF; `rate` is the lambda parameter.
  double exponential(double rate);

  // Marsaglia-Tsang squeeze for shape >= 1, boost trick below 1. Scale 1.
  double gamma(double shape);

  double chi_squared(double k) { return 2.0 * gamma(0.5 * k); }

  double student_t(double df);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  // Independent child stream; stable for a given (parent seed, id).
  Rng fork(uint64_t id);

 private:
  std::mt19937_64 engine_;
};

}  // namespace lincir
