#include "lincir/rng.hpp"

#include <cmath>

#include "lincir/tensor.hpp"

namespace lincir {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw Error("rng", "uniform_int needs n > 0");
  // Rejection sampling to kill modulo bias.
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

double Rng::gaussian() {
  // u1 in (0,1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

double Rng::exponential(double rate) {
  if (rate <= 0.0) throw Error("rng", "exponential needs rate > 0");
  return -std::log(1.0 - uniform()) / rate;
}

double Rng::gamma(double shape) {
  if (shape <= 0.0) throw Error("rng", "gamma needs shape > 0");
  if (shape < 1.0) {
    // Gamma(a) = Gamma(a+1) * U^(1/a)
    double u = 1.0 - uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = gaussian();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = 1.0 - uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double Rng::student_t(double df) {
  if (df <= 0.0) throw Error("rng", "student_t needs df > 0");
  double g = gaussian();
  double c = chi_squared(df);
  return g / std::sqrt(c / df);
}

Rng Rng::fork(uint64_t id) {
  uint64_t base = next_u64();
  return Rng(splitmix64(base ^ splitmix64(id)));
}

}  // namespace lincir
