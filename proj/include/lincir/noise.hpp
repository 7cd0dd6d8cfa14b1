#pragma once

#include <string>

#include "lincir/rng.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

// Additive latent noise families. Every kind fills the vector element-wise
// from its marginal distribution except ScaledGaussian, which draws one
// uniform magnitude u ~ U(0,1) per vector and returns u * N(0, I) -- the
// scalar makes the vector's norm range over [0, ~sqrt(d)] instead of
// concentrating near sqrt(d).
struct NoiseSpec {
  enum class Kind { None, Gaussian, Uniform, StudentT, Exponential, ChiSquared, ScaledGaussian };
  Kind kind = Kind::ScaledGaussian;
  double df = 5.0;    // StudentT degrees of freedom
  double k = 1.0;     // ChiSquared shape
  double rate = 1.0;  // Exponential rate

  static NoiseSpec parse(const std::string& text);
  std::string name() const;
  void validate() const;
};

Tensor sample_noise(const NoiseSpec& spec, int64_t d, Rng& rng);

}  // namespace lincir
