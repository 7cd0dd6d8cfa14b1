#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "lincir/tensor.hpp"

namespace lincir {

using NodeId = int32_t;

// Gradients keyed by leaf node id. Interior nodes and constants never
// appear here.
class GradMap {
 public:
  bool contains(NodeId id) const { return grads_.count(id) > 0; }
  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw Error("tape", "no gradient recorded for node");
    return it->second;
  }
  size_t size() const { return grads_.size(); }
  void insert(NodeId id, Tensor g) { grads_.emplace(id, std::move(g)); }

 private:
  std::unordered_map<NodeId, Tensor> grads_;
};

// Define-by-run reverse-mode tape. Values are computed eagerly as nodes are
// recorded; backward() replays the recorded closures in reverse id order.
// A tape represents one step's graph and is meant to be discarded after use.
//
// Node ids are topologically ordered by construction: an op's inputs always
// have smaller ids than the op itself.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When set, every op validates that its output is finite and throws
  // otherwise. Costs a full pass over each result; meant for tests.
  static bool debug_checks;

  // Inputs. Constants never receive gradients; leaves do.
  NodeId constant(Tensor t);
  NodeId leaf(Tensor t);

  const Tensor& value(NodeId id) const { return node(id).value; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  bool is_leaf(NodeId id) const { return node(id).is_leaf; }
  size_t size() const { return nodes_.size(); }

  // [m,k] x [k,n] -> [m,n]
  NodeId matmul(NodeId a, NodeId b);
  // [m,k] x [n,k]^T -> [m,n]
  NodeId matmul_nt(NodeId a, NodeId b);
  // [k] x [k,n] -> [n]
  NodeId vecmat(NodeId v, NodeId m);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  // [t,d] + [d], broadcast over rows
  NodeId add_rowvec(NodeId m, NodeId v);
  NodeId mul_elem(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId exp(NodeId a);
  // x * Phi(x) with the exact Gaussian CDF
  NodeId gelu(NodeId a);
  // Normalizes the last axis with biased variance; gamma/beta are [d].
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  // Single-head scaled dot-product attention over [t,dh] inputs.
  NodeId softmax_attention(NodeId q, NodeId k, NodeId v, bool causal);
  // Mean squared error over all elements -> scalar
  NodeId mse(NodeId a, NodeId b);
  NodeId mean_rows(NodeId m);
  // Row extraction: works both as matrix row select and embedding lookup.
  NodeId select_row(NodeId m, int64_t row);
  // Embedding lookup of several rows at once -> [ids.size(), d]
  NodeId gather_rows(NodeId table, std::vector<int64_t> ids);
  // Parts are rank-1 [d] (one row) or rank-2 [t,d]; stacked along rows.
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId m, int64_t r0, int64_t r1);
  NodeId slice_cols(NodeId m, int64_t c0, int64_t c1);
  // Rank-2 parts with equal row counts, stacked along columns.
  NodeId concat_cols(std::span<const NodeId> parts);
  NodeId l2_normalize_rows(NodeId m);
  // Scalar node times tensor node.
  NodeId mul_scalar(NodeId m, NodeId s);
  // Symmetric InfoNCE over a square logit matrix whose diagonal holds the
  // matched pairs: mean of row-wise and column-wise cross entropy -> scalar.
  NodeId symmetric_diag_cross_entropy(NodeId logits);

  // Reverse sweep from a scalar loss. Only ancestors of the loss are
  // visited; returns gradients for the leaf ancestors.
  GradMap backward(NodeId loss);

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<NodeId> inputs;
    std::function<void(const double*)> bwd;  // empty when requires_grad is false
  };

  const Node& node(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
      throw Error("tape", "node id out of range");
    return nodes_[id];
  }

  NodeId push(Tensor value, std::vector<NodeId> inputs,
              std::function<void(const double*)> bwd);

  // Gradient scratch for the current backward sweep; nullptr when the node
  // takes no gradient.
  double* grad_ptr(NodeId id);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grad_;
  std::vector<char> wants_grad_;  // per-node: participates in current sweep
};

}  // namespace lincir
