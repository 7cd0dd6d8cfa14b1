#include "lincir/optim.hpp"

#include <cmath>

namespace lincir {

Binding Binding::trainable(Tape& tape, const ParamSet& params) {
  Binding b(tape, true);
  for (size_t i = 0; i < params.size(); ++i) {
    NodeId id = tape.leaf(*params.tensors[i]);
    b.ids_[params.tensors[i]] = id;
    b.ordered_.push_back(id);
  }
  return b;
}

Binding Binding::frozen(Tape& tape) { return Binding(tape, false); }

NodeId Binding::operator()(const Tensor& t) {
  auto it = ids_.find(&t);
  if (it != ids_.end()) return it->second;
  if (trainable_)
    throw Error("tape", "parameter not registered in trainable binding");
  NodeId id = tape_->constant(t);
  ids_[&t] = id;
  return id;
}

std::vector<Tensor> collect_grads(const GradMap& grads, const Binding& binding,
                                  const ParamSet& params) {
  if (!binding.is_trainable())
    throw Error("tape", "collect_grads needs a trainable binding");
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    NodeId id = binding.leaf_ids()[i];
    if (grads.contains(id))
      out.push_back(grads.at(id));
    else
      out.push_back(Tensor::zeros(params.tensors[i]->shape()));
  }
  return out;
}

AdamW::AdamW(AdamWConfig cfg, const ParamSet& params) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* t : params.tensors) {
    m_.emplace_back(t->numel(), 0.0);
    v_.emplace_back(t->numel(), 0.0);
  }
}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw Error("trainer", "optimizer slot count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params.size(); ++p) {
    const Tensor& theta = *params.tensors[p];
    const Tensor& g = grads[p];
    if (!theta.same_shape(g))
      throw Error("trainer", "gradient shape mismatch for " + params.names[p]);
    const int64_t n = theta.numel();
    std::vector<double> next(n);
    double* m = m_[p].data();
    double* v = v_[p].data();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      next[i] = theta[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps) -
                cfg_.lr * cfg_.weight_decay * theta[i];
    }
    *params.tensors[p] = Tensor(theta.shape(), std::move(next));
  }
}

}  // namespace lincir
