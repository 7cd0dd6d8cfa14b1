#include "lincir/noise.hpp"

namespace lincir {

NoiseSpec NoiseSpec::parse(const std::string& text) {
  NoiseSpec s;
  if (text == "none")
    s.kind = Kind::None;
  else if (text == "gaussian")
    s.kind = Kind::Gaussian;
  else if (text == "uniform")
    s.kind = Kind::Uniform;
  else if (text == "student-t")
    s.kind = Kind::StudentT;
  else if (text == "exponential")
    s.kind = Kind::Exponential;
  else if (text == "chi-squared")
    s.kind = Kind::ChiSquared;
  else if (text == "scaled-gaussian")
    s.kind = Kind::ScaledGaussian;
  else
    throw Error("trainer", "unknown noise kind: " + text);
  return s;
}

std::string NoiseSpec::name() const {
  switch (kind) {
    case Kind::None: return "none";
    case Kind::Gaussian: return "gaussian";
    case Kind::Uniform: return "uniform";
    case Kind::StudentT: return "student-t";
    case Kind::Exponential: return "exponential";
    case Kind::ChiSquared: return "chi-squared";
    case Kind::ScaledGaussian: return "scaled-gaussian";
  }
  return "none";
}

void NoiseSpec::validate() const {
  if (df <= 2.0) throw Error("trainer", "student-t needs df > 2 for finite variance");
  if (k <= 0.0) throw Error("trainer", "chi-squared needs k > 0");
  if (rate <= 0.0) throw Error("trainer", "exponential needs rate > 0");
}

Tensor sample_noise(const NoiseSpec& spec, int64_t d, Rng& rng) {
  spec.validate();
  if (d <= 0) throw Error("trainer", "noise dimension must be positive");
  std::vector<double> v(d, 0.0);
  switch (spec.kind) {
    case NoiseSpec::Kind::None:
      break;
    case NoiseSpec::Kind::Gaussian:
      for (double& x : v) x = rng.gaussian();
      break;
    case NoiseSpec::Kind::Uniform:
      for (double& x : v) x = rng.uniform(-1.0, 1.0);
      break;
    case NoiseSpec::Kind::StudentT:
      for (double& x : v) x = rng.student_t(spec.df);
      break;
    case NoiseSpec::Kind::Exponential:
      for (double& x : v) x = rng.exponential(spec.rate);
      break;
    case NoiseSpec::Kind::ChiSquared:
      for (double& x : v) x = rng.chi_squared(spec.k);
      break;
    case NoiseSpec::Kind::ScaledGaussian: {
      const double u = rng.uniform();
      for (double& x : v) x = u * rng.gaussian();
      break;
    }
  }
  return Tensor({d}, std::move(v));
}

}  // namespace lincir
