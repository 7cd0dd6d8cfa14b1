#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lincir/tape.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

// Ordered registry of named parameters. The order is the serialization
// order and the optimizer slot order, so it must be stable for a given
// module structure.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;

  void add(std::string name, Tensor* t) {
    names.push_back(std::move(name));
    tensors.push_back(t);
  }
  size_t size() const { return tensors.size(); }
  int64_t total_elems() const {
    int64_t n = 0;
    for (const Tensor* t : tensors) n += t->numel();
    return n;
  }
};

// Maps module parameters to tape nodes for one graph build. Trainable
// bindings register every parameter as a leaf up front; frozen bindings
// hand out constants on demand, so untouched parameters never enter the
// graph and no gradient can ever reach them.
class Binding {
 public:
  static Binding trainable(Tape& tape, const ParamSet& params);
  static Binding frozen(Tape& tape);

  NodeId operator()(const Tensor& t);

  // Leaf ids in ParamSet order; empty for frozen bindings.
  const std::vector<NodeId>& leaf_ids() const { return ordered_; }
  bool is_trainable() const { return trainable_; }

 private:
  Binding(Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}
  Tape* tape_;
  bool trainable_;
  std::unordered_map<const Tensor*, NodeId> ids_;
  std::vector<NodeId> ordered_;
};

// Gradients aligned with a trainable binding's ParamSet order. Parameters
// that the loss never touched get explicit zero gradients.
std::vector<Tensor> collect_grads(const GradMap& grads, const Binding& binding,
                                  const ParamSet& params);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay: the decay term is applied directly to
// the parameter, not mixed into the moment estimates.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, const ParamSet& params);

  void step(ParamSet& params, const std::vector<Tensor>& grads);
  int64_t steps_done() const { return t_; }

  // Schedules adjust lr between steps; moment estimates are untouched.
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace lincir
