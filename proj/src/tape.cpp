#include "lincir/tape.hpp"

#include <cmath>
#include <limits>

namespace lincir {

bool Tape::debug_checks = false;

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("tape", what);
}

// Rows/cols of a tensor treated as a matrix; rank 1 counts as a single row.
int64_t rows_of(const Tensor& t) { return t.rank() == 1 ? 1 : t.dim(0); }
int64_t cols_of(const Tensor& t) { return t.rank() == 1 ? t.dim(0) : t.dim(1); }

}  // namespace

NodeId Tape::push(Tensor value, std::vector<NodeId> inputs,
                  std::function<void(const double*)> bwd) {
  if (debug_checks && !value.all_finite())
    throw Error("tape", "non-finite value produced at node " +
                            std::to_string(nodes_.size()));
  Node n;
  n.value = std::move(value);
  for (NodeId in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::constant(Tensor t) {
  if (debug_checks && !t.all_finite())
    throw Error("tape", "non-finite constant");
  Node n;
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor t) {
  if (debug_checks && !t.all_finite())
    throw Error("tape", "non-finite leaf");
  Node n;
  n.value = std::move(t);
  n.requires_grad = true;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

double* Tape::grad_ptr(NodeId id) {
  if (!wants_grad_[id]) return nullptr;
  return grad_[id].data();
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
          "matmul shape mismatch " + A.shape_string() + " x " + B.shape_string());
  const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  TensorBuilder out({m, n});
  kernels::matmul_acc(A.data(), B.data(), out.data(), m, k, n);
  return push(out.build(), {a, b}, [this, a, b, m, k, n](const double* g) {
    if (double* ga = grad_ptr(a)) kernels::matmul_nt_acc(g, value(b).data(), ga, m, n, k);
    if (double* gb = grad_ptr(b)) kernels::matmul_tn_acc(value(a).data(), g, gb, k, m, n);
  });
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(1),
          "matmul_nt shape mismatch " + A.shape_string() + " x " + B.shape_string());
  const int64_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  TensorBuilder out({m, n});
  kernels::matmul_nt_acc(A.data(), B.data(), out.data(), m, k, n);
  return push(out.build(), {a, b}, [this, a, b, m, k, n](const double* g) {
    // C = A B^T: dA += G B, dB += G^T A
    if (double* ga = grad_ptr(a)) kernels::matmul_acc(g, value(b).data(), ga, m, n, k);
    if (double* gb = grad_ptr(b)) kernels::matmul_tn_acc(g, value(a).data(), gb, n, m, k);
  });
}

NodeId Tape::vecmat(NodeId v, NodeId m) {
  const Tensor& V = value(v);
  const Tensor& M = value(m);
  require(V.rank() == 1 && M.rank() == 2 && V.dim(0) == M.dim(0),
          "vecmat shape mismatch " + V.shape_string() + " x " + M.shape_string());
  const int64_t k = M.dim(0), n = M.dim(1);
  TensorBuilder out({n});
  kernels::matmul_acc(V.data(), M.data(), out.data(), 1, k, n);
  return push(out.build(), {v, m}, [this, v, m, k, n](const double* g) {
    if (double* gv = grad_ptr(v)) kernels::matmul_nt_acc(g, value(m).data(), gv, 1, n, k);
    if (double* gm = grad_ptr(m)) kernels::matmul_tn_acc(value(v).data(), g, gm, k, 1, n);
  });
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "add shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] + B[i];
  return push(out.build(), {a, b}, [this, a, b, n](const double* g) {
    if (double* ga = grad_ptr(a))
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    if (double* gb = grad_ptr(b))
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
  });
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "sub shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] - B[i];
  return push(out.build(), {a, b}, [this, a, b, n](const double* g) {
    if (double* ga = grad_ptr(a))
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    if (double* gb = grad_ptr(b))
      for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
  });
}

NodeId Tape::add_rowvec(NodeId m, NodeId v) {
  const Tensor& M = value(m);
  const Tensor& V = value(v);
  require(M.rank() == 2 && V.rank() == 1 && M.dim(1) == V.dim(0),
          "add_rowvec shape mismatch " + M.shape_string() + " + " + V.shape_string());
  const int64_t t = M.dim(0), d = M.dim(1);
  TensorBuilder out({t, d});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = M[i * d + j] + V[j];
  return push(out.build(), {m, v}, [this, m, v, t, d](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t i = 0; i < t * d; ++i) gm[i] += g[i];
    if (double* gv = grad_ptr(v))
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
  });
}

NodeId Tape::mul_elem(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "mul_elem shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] * B[i];
  return push(out.build(), {a, b}, [this, a, b, n](const double* g) {
    if (double* ga = grad_ptr(a)) {
      const double* bv = value(b).data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
    }
    if (double* gb = grad_ptr(b)) {
      const double* av = value(a).data();
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    }
  });
}

NodeId Tape::scale(NodeId a, double s) {
  const Tensor& A = value(a);
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] * s;
  return push(out.build(), {a}, [this, a, s, n](const double* g) {
    if (double* ga = grad_ptr(a))
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
  });
}

NodeId Tape::exp(NodeId a) {
  const Tensor& A = value(a);
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(A[i]);
  NodeId id = push(out.build(), {a}, nullptr);
  if (requires_grad(id)) {
    nodes_[id].bwd = [this, a, id, n](const double* g) {
      if (double* ga = grad_ptr(a)) {
        const double* y = value(id).data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
      }
    };
  }
  return id;
}

NodeId Tape::gelu(NodeId a) {
  const Tensor& A = value(a);
  const int64_t n = A.numel();
  TensorBuilder out(A.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] * gauss_cdf(A[i]);
  return push(out.build(), {a}, [this, a, n](const double* g) {
    if (double* ga = grad_ptr(a)) {
      const double* x = value(a).data();
      for (int64_t i = 0; i < n; ++i)
        ga[i] += g[i] * (gauss_cdf(x[i]) + x[i] * gauss_pdf(x[i]));
    }
  });
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gamma);
  const Tensor& B = value(beta);
  require(X.rank() == 1 || X.rank() == 2, "layer_norm input must be rank 1 or 2");
  const int64_t t = rows_of(X), d = cols_of(X);
  require(G.rank() == 1 && B.rank() == 1 && G.dim(0) == d && B.dim(0) == d,
          "layer_norm gamma/beta must be [d]");
  TensorBuilder out(X.shape());
  // Normalized rows and inverse stds are reused verbatim in backward.
  auto xhat = std::make_shared<std::vector<double>>(t * d);
  auto inv_std = std::make_shared<std::vector<double>>(t);
  for (int64_t i = 0; i < t; ++i) {
    const double* xi = X.data() + i * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mu) * is;
      (*xhat)[i * d + j] = xh;
      out[i * d + j] = G[j] * xh + B[j];
    }
  }
  return push(out.build(), {x, gamma, beta},
              [this, x, gamma, beta, t, d, xhat, inv_std](const double* g) {
                const double* gam = value(gamma).data();
                double* gx = grad_ptr(x);
                double* gg = grad_ptr(gamma);
                double* gb = grad_ptr(beta);
                for (int64_t i = 0; i < t; ++i) {
                  const double* gi = g + i * d;
                  const double* xh = xhat->data() + i * d;
                  if (gg)
                    for (int64_t j = 0; j < d; ++j) gg[j] += gi[j] * xh[j];
                  if (gb)
                    for (int64_t j = 0; j < d; ++j) gb[j] += gi[j];
                  if (gx) {
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                      const double dxh = gi[j] * gam[j];
                      mean_dxh += dxh;
                      mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d;
                    mean_dxh_xh /= d;
                    const double is = (*inv_std)[i];
                    for (int64_t j = 0; j < d; ++j) {
                      const double dxh = gi[j] * gam[j];
                      gx[i * d + j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                  }
                }
              });
}

NodeId Tape::softmax_attention(NodeId q, NodeId k, NodeId v, bool causal) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  require(Q.rank() == 2 && K.rank() == 2 && V.rank() == 2,
          "softmax_attention inputs must be rank 2");
  require(Q.dim(1) == K.dim(1) && K.dim(0) == V.dim(0) && Q.dim(0) == K.dim(0),
          "softmax_attention shape mismatch");
  const int64_t t = Q.dim(0), dh = Q.dim(1);
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

  // Scores, masked and row-softmaxed with max subtraction.
  auto S = std::make_shared<std::vector<double>>(t * t, 0.0);
  {
    std::vector<double> p(t * t, 0.0);
    kernels::matmul_nt_acc(Q.data(), K.data(), p.data(), t, dh, t);
    for (int64_t i = 0; i < t; ++i) {
      const int64_t jmax = causal ? i + 1 : t;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < jmax; ++j) mx = std::max(mx, p[i * t + j] * alpha);
      double z = 0.0;
      for (int64_t j = 0; j < jmax; ++j) {
        const double e = std::exp(p[i * t + j] * alpha - mx);
        (*S)[i * t + j] = e;
        z += e;
      }
      for (int64_t j = 0; j < jmax; ++j) (*S)[i * t + j] /= z;
    }
  }
  TensorBuilder out({t, dh});
  kernels::matmul_acc(S->data(), V.data(), out.data(), t, t, dh);
  return push(out.build(), {q, k, v},
              [this, q, k, v, t, dh, alpha, S](const double* g) {
                // dS = G V^T, dP = S o (dS - rowdot(dS,S)), then chain to Q,K.
                std::vector<double> dS(t * t, 0.0);
                kernels::matmul_nt_acc(g, value(v).data(), dS.data(), t, dh, t);
                std::vector<double> dP(t * t);
                for (int64_t i = 0; i < t; ++i) {
                  double dot = 0.0;
                  for (int64_t j = 0; j < t; ++j) dot += dS[i * t + j] * (*S)[i * t + j];
                  for (int64_t j = 0; j < t; ++j)
                    dP[i * t + j] = (*S)[i * t + j] * (dS[i * t + j] - dot) * alpha;
                }
                if (double* gq = grad_ptr(q))
                  kernels::matmul_acc(dP.data(), value(k).data(), gq, t, t, dh);
                if (double* gk = grad_ptr(k))
                  kernels::matmul_tn_acc(dP.data(), value(q).data(), gk, t, t, dh);
                if (double* gv = grad_ptr(v))
                  kernels::matmul_tn_acc(S->data(), g, gv, t, t, dh);
              });
}

NodeId Tape::mse(NodeId a, NodeId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  require(A.same_shape(B), "mse shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  const int64_t n = A.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = A[i] - B[i];
    s += d * d;
  }
  return push(Tensor::scalar(s / n), {a, b}, [this, a, b, n](const double* g) {
    const double* av = value(a).data();
    const double* bv = value(b).data();
    const double c = g[0] * 2.0 / n;
    if (double* ga = grad_ptr(a))
      for (int64_t i = 0; i < n; ++i) ga[i] += c * (av[i] - bv[i]);
    if (double* gb = grad_ptr(b))
      for (int64_t i = 0; i < n; ++i) gb[i] -= c * (av[i] - bv[i]);
  });
}

NodeId Tape::mean_rows(NodeId m) {
  const Tensor& M = value(m);
  require(M.rank() == 2, "mean_rows input must be rank 2");
  const int64_t t = M.dim(0), d = M.dim(1);
  TensorBuilder out({d});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) out[j] += M[i * d + j] / t;
  return push(out.build(), {m}, [this, m, t, d](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) gm[i * d + j] += g[j] / t;
  });
}

NodeId Tape::select_row(NodeId m, int64_t row) {
  const Tensor& M = value(m);
  require(M.rank() == 2, "select_row input must be rank 2");
  require(row >= 0 && row < M.dim(0), "select_row index out of range");
  const int64_t d = M.dim(1);
  TensorBuilder out({d});
  for (int64_t j = 0; j < d; ++j) out[j] = M[row * d + j];
  return push(out.build(), {m}, [this, m, row, d](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t j = 0; j < d; ++j) gm[row * d + j] += g[j];
  });
}

NodeId Tape::gather_rows(NodeId table, std::vector<int64_t> ids) {
  const Tensor& T = value(table);
  require(T.rank() == 2, "gather_rows table must be rank 2");
  const int64_t d = T.dim(1), n = static_cast<int64_t>(ids.size());
  for (int64_t r : ids)
    require(r >= 0 && r < T.dim(0), "gather_rows index out of range");
  TensorBuilder out({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = T[ids[i] * d + j];
  return push(out.build(), {table},
              [this, table, ids = std::move(ids), d](const double* g) {
                if (double* gt = grad_ptr(table))
                  for (size_t i = 0; i < ids.size(); ++i)
                    for (int64_t j = 0; j < d; ++j)
                      gt[ids[i] * d + j] += g[i * d + j];
              });
}

NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  require(!parts.empty(), "concat_rows needs at least one part");
  const int64_t d = cols_of(value(parts[0]));
  int64_t total = 0;
  for (NodeId p : parts) {
    const Tensor& P = value(p);
    require(P.rank() == 1 || P.rank() == 2, "concat_rows parts must be rank 1 or 2");
    require(cols_of(P) == d, "concat_rows width mismatch");
    total += rows_of(P);
  }
  TensorBuilder out({total, d});
  int64_t r = 0;
  for (NodeId p : parts) {
    const Tensor& P = value(p);
    for (int64_t i = 0; i < P.numel(); ++i) out[r * d + i] = P[i];
    r += rows_of(P);
  }
  std::vector<NodeId> inputs(parts.begin(), parts.end());
  auto sizes = std::make_shared<std::vector<int64_t>>();
  for (NodeId p : parts) sizes->push_back(rows_of(value(p)));
  return push(out.build(), inputs,
              [this, inputs, sizes, d](const double* g) {
                int64_t r = 0;
                for (size_t i = 0; i < inputs.size(); ++i) {
                  if (double* gp = grad_ptr(inputs[i])) {
                    const int64_t n = (*sizes)[i] * d;
                    for (int64_t j = 0; j < n; ++j) gp[j] += g[r * d + j];
                  }
                  r += (*sizes)[i];
                }
              });
}

NodeId Tape::concat_cols(std::span<const NodeId> parts) {
  require(!parts.empty(), "concat_cols needs at least one part");
  const int64_t t = value(parts[0]).dim(0);
  int64_t total = 0;
  for (NodeId p : parts) {
    const Tensor& P = value(p);
    require(P.rank() == 2 && P.dim(0) == t, "concat_cols parts must be [t,*]");
    total += P.dim(1);
  }
  TensorBuilder out({t, total});
  int64_t off = 0;
  for (NodeId p : parts) {
    const Tensor& P = value(p);
    const int64_t w = P.dim(1);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < w; ++j) out[i * total + off + j] = P[i * w + j];
    off += w;
  }
  std::vector<NodeId> inputs(parts.begin(), parts.end());
  auto widths = std::make_shared<std::vector<int64_t>>();
  for (NodeId p : parts) widths->push_back(value(p).dim(1));
  return push(out.build(), inputs,
              [this, inputs, widths, t, total](const double* g) {
                int64_t off = 0;
                for (size_t i = 0; i < inputs.size(); ++i) {
                  const int64_t w = (*widths)[i];
                  if (double* gp = grad_ptr(inputs[i]))
                    for (int64_t r = 0; r < t; ++r)
                      for (int64_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
                  off += w;
                }
              });
}

NodeId Tape::slice_rows(NodeId m, int64_t r0, int64_t r1) {
  const Tensor& M = value(m);
  require(M.rank() == 2, "slice_rows input must be rank 2");
  require(0 <= r0 && r0 < r1 && r1 <= M.dim(0), "slice_rows range invalid");
  const int64_t d = M.dim(1), t = r1 - r0;
  TensorBuilder out({t, d});
  for (int64_t i = 0; i < t * d; ++i) out[i] = M[r0 * d + i];
  return push(out.build(), {m}, [this, m, r0, t, d](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t i = 0; i < t * d; ++i) gm[r0 * d + i] += g[i];
  });
}

NodeId Tape::slice_cols(NodeId m, int64_t c0, int64_t c1) {
  const Tensor& M = value(m);
  require(M.rank() == 2, "slice_cols input must be rank 2");
  require(0 <= c0 && c0 < c1 && c1 <= M.dim(1), "slice_cols range invalid");
  const int64_t t = M.dim(0), d = M.dim(1), w = c1 - c0;
  TensorBuilder out({t, w});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < w; ++j) out[i * w + j] = M[i * d + c0 + j];
  return push(out.build(), {m}, [this, m, c0, t, d, w](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < w; ++j) gm[i * d + c0 + j] += g[i * w + j];
  });
}

NodeId Tape::l2_normalize_rows(NodeId m) {
  const Tensor& M = value(m);
  require(M.rank() == 1 || M.rank() == 2, "l2_normalize_rows input must be rank 1 or 2");
  const int64_t t = rows_of(M), d = cols_of(M);
  TensorBuilder out(M.shape());
  auto norms = std::make_shared<std::vector<double>>(t);
  for (int64_t i = 0; i < t; ++i) {
    const double nrm = l2_norm(M.data() + i * d, d);
    require(nrm > 0.0, "l2_normalize_rows: zero row");
    (*norms)[i] = nrm;
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = M[i * d + j] / nrm;
  }
  NodeId id = push(out.build(), {m}, nullptr);
  if (requires_grad(id)) {
    nodes_[id].bwd = [this, m, id, t, d, norms](const double* g) {
      if (double* gm = grad_ptr(m)) {
        const double* y = value(id).data();
        for (int64_t i = 0; i < t; ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
          const double inv = 1.0 / (*norms)[i];
          for (int64_t j = 0; j < d; ++j)
            gm[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) * inv;
        }
      }
    };
  }
  return id;
}

NodeId Tape::mul_scalar(NodeId m, NodeId s) {
  const Tensor& M = value(m);
  const Tensor& S = value(s);
  require(S.numel() == 1, "mul_scalar needs a scalar second operand");
  const int64_t n = M.numel();
  const double sv = S[0];
  TensorBuilder out(M.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = M[i] * sv;
  return push(out.build(), {m, s}, [this, m, s, n, sv](const double* g) {
    if (double* gm = grad_ptr(m))
      for (int64_t i = 0; i < n; ++i) gm[i] += g[i] * sv;
    if (double* gs = grad_ptr(s)) {
      const double* mv = value(m).data();
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) acc += g[i] * mv[i];
      gs[0] += acc;
    }
  });
}

NodeId Tape::symmetric_diag_cross_entropy(NodeId logits) {
  const Tensor& L = value(logits);
  require(L.rank() == 2 && L.dim(0) == L.dim(1),
          "symmetric_diag_cross_entropy needs a square matrix");
  const int64_t b = L.dim(0);
  // Row and column softmaxes, computed stably; both are kept for backward.
  auto srow = std::make_shared<std::vector<double>>(b * b);
  auto scol = std::make_shared<std::vector<double>>(b * b);
  double loss = 0.0;
  for (int64_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < b; ++j) mx = std::max(mx, L[i * b + j]);
    double z = 0.0;
    for (int64_t j = 0; j < b; ++j) z += std::exp(L[i * b + j] - mx);
    loss += mx + std::log(z) - L[i * b + i];
    for (int64_t j = 0; j < b; ++j) (*srow)[i * b + j] = std::exp(L[i * b + j] - mx) / z;
  }
  for (int64_t j = 0; j < b; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < b; ++i) mx = std::max(mx, L[i * b + j]);
    double z = 0.0;
    for (int64_t i = 0; i < b; ++i) z += std::exp(L[i * b + j] - mx);
    loss += mx + std::log(z) - L[j * b + j];
    for (int64_t i = 0; i < b; ++i) (*scol)[i * b + j] = std::exp(L[i * b + j] - mx) / z;
  }
  loss /= 2.0 * b;
  return push(Tensor::scalar(loss), {logits},
              [this, logits, b, srow, scol](const double* g) {
                if (double* gl = grad_ptr(logits)) {
                  const double c = g[0] / (2.0 * b);
                  for (int64_t i = 0; i < b; ++i)
                    for (int64_t j = 0; j < b; ++j) {
                      double v = (*srow)[i * b + j] + (*scol)[i * b + j];
                      if (i == j) v -= 2.0;
                      gl[i * b + j] += c * v;
                    }
                }
              });
}

GradMap Tape::backward(NodeId loss) {
  const Node& ln = node(loss);
  if (ln.value.numel() != 1)
    throw Error("tape", "backward needs a scalar loss");
  GradMap out;
  if (!ln.requires_grad) return out;

  // Mark ancestors of the loss that participate in the gradient flow.
  wants_grad_.assign(nodes_.size(), 0);
  {
    std::vector<NodeId> stack{loss};
    wants_grad_[loss] = 1;
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      for (NodeId in : nodes_[id].inputs) {
        if (!wants_grad_[in] && nodes_[in].requires_grad) {
          wants_grad_[in] = 1;
          stack.push_back(in);
        }
      }
    }
  }

  grad_.assign(nodes_.size(), {});
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (wants_grad_[i]) grad_[i].assign(nodes_[i].value.numel(), 0.0);
  grad_[loss][0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    if (!wants_grad_[id]) continue;
    if (nodes_[id].bwd) nodes_[id].bwd(grad_[id].data());
    if (debug_checks)
      for (double v : grad_[id])
        if (!std::isfinite(v))
          throw Error("tape", "non-finite gradient at node " + std::to_string(id));
  }

  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (wants_grad_[i] && nodes_[i].is_leaf)
      out.insert(static_cast<NodeId>(i),
                 Tensor(nodes_[i].value.shape(), std::move(grad_[i])));
  }
  grad_.clear();
  wants_grad_.clear();
  return out;
}

}  // namespace lincir
