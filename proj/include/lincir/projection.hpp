#pragma once

#include "lincir/optim.hpp"
#include "lincir/rng.hpp"
#include "lincir/tape.hpp"

namespace lincir {

// The trained mapping from a joint-space latent to a token-width row:
// LN -> Linear -> GeLU -> Linear -> GeLU -> Linear -> LN, hidden width 4x
// the input. Dropout acts on the two hidden activations only, and only
// when the caller supplies masks; inference is always deterministic.
struct ProjectionModule {
  int64_t d_in = 0;
  int64_t d_hidden = 0;
  int64_t d_out = 0;
  double dropout = 0.5;

  Tensor ln_in_gamma, ln_in_beta;
  Tensor w1, b1;  // [d_in, d_hidden]
  Tensor w2, b2;  // [d_hidden, d_hidden]
  Tensor w3, b3;  // [d_hidden, d_out]
  Tensor ln_out_gamma, ln_out_beta;

  static ProjectionModule init(int64_t d_in, int64_t d_out, double dropout, uint64_t seed);
  ParamSet params();

  // Inference forward on a throwaway graph; no dropout.
  Tensor apply(const Tensor& z) const;
};

// Inverted-scaling dropout masks for one training forward: kept units are
// scaled by 1/(1-p) so inference needs no compensation.
struct DropoutMasks {
  Tensor h1, h2;
};
DropoutMasks sample_dropout_masks(const ProjectionModule& phi, Rng& rng);

// z is a [d_in] node; returns a [d_out] node. Pass masks on the training
// path, nullptr otherwise.
NodeId projection_forward_node(Tape& tape, Binding& bind, const ProjectionModule& phi, NodeId z,
                               const DropoutMasks* masks);

void save_projection(const std::string& path, const ProjectionModule& phi);
ProjectionModule load_projection(const std::string& path);

}  // namespace lincir
