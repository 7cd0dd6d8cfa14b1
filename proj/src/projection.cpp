#include "lincir/projection.hpp"

#include <cmath>

#include "lincir/lncr.hpp"

namespace lincir {

ProjectionModule ProjectionModule::init(int64_t d_in, int64_t d_out, double dropout,
                                        uint64_t seed) {
  if (d_in <= 0 || d_out <= 0) throw Error("trainer", "projection dims must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("trainer", "dropout must be in [0,1)");
  Rng rng(seed);
  auto randn = [&rng](std::vector<int64_t> shape, double std) {
    std::vector<double> v(Tensor::count(shape));
    for (double& x : v) x = std * rng.gaussian();
    return Tensor(std::move(shape), std::move(v));
  };
  ProjectionModule p;
  p.d_in = d_in;
  p.d_hidden = 4 * d_in;
  p.d_out = d_out;
  p.dropout = dropout;
  p.ln_in_gamma = Tensor::full({d_in}, 1.0);
  p.ln_in_beta = Tensor::zeros({d_in});
  p.w1 = randn({d_in, p.d_hidden}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  p.b1 = Tensor::zeros({p.d_hidden});
  p.w2 = randn({p.d_hidden, p.d_hidden}, 1.0 / std::sqrt(static_cast<double>(p.d_hidden)));
  p.b2 = Tensor::zeros({p.d_hidden});
  p.w3 = randn({p.d_hidden, d_out}, 1.0 / std::sqrt(static_cast<double>(p.d_hidden)));
  p.b3 = Tensor::zeros({d_out});
  p.ln_out_gamma = Tensor::full({d_out}, 1.0);
  p.ln_out_beta = Tensor::zeros({d_out});
  return p;
}

ParamSet ProjectionModule::params() {
  ParamSet ps;
  ps.add("phi.ln_in.gamma", &ln_in_gamma);
  ps.add("phi.ln_in.beta", &ln_in_beta);
  ps.add("phi.w1", &w1);
  ps.add("phi.b1", &b1);
  ps.add("phi.w2", &w2);
  ps.add("phi.b2", &b2);
  ps.add("phi.w3", &w3);
  ps.add("phi.b3", &b3);
  ps.add("phi.ln_out.gamma", &ln_out_gamma);
  ps.add("phi.ln_out.beta", &ln_out_beta);
  return ps;
}

DropoutMasks sample_dropout_masks(const ProjectionModule& phi, Rng& rng) {
  const double p = phi.dropout;
  auto mask = [&](int64_t n) {
    std::vector<double> v(n);
    const double keep_scale = p > 0.0 ? 1.0 / (1.0 - p) : 1.0;
    for (double& x : v) x = (p > 0.0 && rng.uniform() < p) ? 0.0 : keep_scale;
    return Tensor({n}, std::move(v));
  };
  return {mask(phi.d_hidden), mask(phi.d_hidden)};
}

NodeId projection_forward_node(Tape& tape, Binding& bind, const ProjectionModule& phi, NodeId z,
                               const DropoutMasks* masks) {
  const Tensor& Z = tape.value(z);
  if (Z.rank() != 1 || Z.dim(0) != phi.d_in)
    throw Error("trainer", "projection input width mismatch: got " + Z.shape_string());
  NodeId x = tape.layer_norm(z, bind(phi.ln_in_gamma), bind(phi.ln_in_beta));
  NodeId h1 = tape.gelu(tape.add(tape.vecmat(x, bind(phi.w1)), bind(phi.b1)));
  if (masks) h1 = tape.mul_elem(h1, tape.constant(masks->h1));
  NodeId h2 = tape.gelu(tape.add(tape.vecmat(h1, bind(phi.w2)), bind(phi.b2)));
  if (masks) h2 = tape.mul_elem(h2, tape.constant(masks->h2));
  NodeId y = tape.add(tape.vecmat(h2, bind(phi.w3)), bind(phi.b3));
  return tape.layer_norm(y, bind(phi.ln_out_gamma), bind(phi.ln_out_beta));
}

Tensor ProjectionModule::apply(const Tensor& z) const {
  Tape tape;
  Binding bind = Binding::frozen(tape);
  return tape.value(
      projection_forward_node(tape, bind, *this, tape.constant(z), nullptr));
}

void save_projection(const std::string& path, const ProjectionModule& phi) {
  nlohmann::ordered_json cfg;
  cfg["format"] = "projection";
  cfg["version"] = 1;
  cfg["d_in"] = phi.d_in;
  cfg["d_hidden"] = phi.d_hidden;
  cfg["d_out"] = phi.d_out;
  cfg["dropout"] = phi.dropout;
  LncrWriter w(cfg);
  ParamSet ps = const_cast<ProjectionModule&>(phi).params();
  for (size_t i = 0; i < ps.size(); ++i) w.add_tensor(ps.names[i], *ps.tensors[i]);
  w.write(path);
}

ProjectionModule load_projection(const std::string& path) {
  LncrContents c = lncr_read(path);
  if (!c.config.contains("format") || c.config["format"] != "projection")
    throw CorruptFileError("not a projection checkpoint: " + path);
  ProjectionModule phi = ProjectionModule::init(c.config.at("d_in").get<int64_t>(),
                                                c.config.at("d_out").get<int64_t>(),
                                                c.config.at("dropout").get<double>(), 0);
  if (phi.d_hidden != c.config.at("d_hidden").get<int64_t>())
    throw Error("trainer", "projection hidden width mismatch in checkpoint");
  ParamSet ps = phi.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    const Tensor& t = c.tensor(ps.names[i]);
    if (!t.same_shape(*ps.tensors[i]))
      throw Error("trainer", "checkpoint shape mismatch for " + ps.names[i]);
    *ps.tensors[i] = t;
  }
  return phi;
}

}  // namespace lincir
