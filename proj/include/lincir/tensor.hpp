#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace lincir {

// Structured error: what() is "<module>: <message>" so callers and the CLI
// can attribute failures without parsing free text.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ": " + message), module_(std::move(module)) {}
  const std::string& module() const { return module_; }

 private:
  std::string module_;
};

// Dense row-major tensor of doubles. Immutable after construction: ops
// produce new tensors, storage is shared on copy. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : shape_{}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

  Tensor(std::vector<int64_t> shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != count(shape_))
      throw Error("tensor", "value count does not match shape");
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }

  const double* data() const { return data_->data(); }
  double operator[](int64_t i) const { return (*data_)[i]; }

  double at(int64_t i) const {
    if (rank() != 1) throw Error("tensor", "at(i) needs rank 1");
    return (*data_)[i];
  }
  double at(int64_t r, int64_t c) const {
    if (rank() != 2) throw Error("tensor", "at(r,c) needs rank 2");
    return (*data_)[r * shape_[1] + c];
  }
  double item() const {
    if (numel() != 1) throw Error("tensor", "item() needs exactly one element");
    return (*data_)[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  std::string shape_string() const;

  static int64_t count(const std::vector<int64_t>& shape);

 private:
  friend class TensorBuilder;
  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

// Scratch buffer that becomes a Tensor. The only sanctioned way to fill
// storage element by element; once build() runs the values are frozen.
class TensorBuilder {
 public:
  explicit TensorBuilder(std::vector<int64_t> shape)
      : shape_(std::move(shape)), values_(Tensor::count(shape_), 0.0) {}

  double* data() { return values_.data(); }
  double& operator[](int64_t i) { return values_[i]; }
  double& at(int64_t r, int64_t c) { return values_[r * shape_[1] + c]; }
  int64_t numel() const { return static_cast<int64_t>(values_.size()); }

  Tensor build() {
    Tensor t;
    t.shape_ = std::move(shape_);
    t.data_ = std::make_shared<std::vector<double>>(std::move(values_));
    return t;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<double> values_;
};

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C[m x n] += A[m x k] * B[n x k]^T
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// C[m x n] += A[k x m]^T * B[k x n]
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

}  // namespace kernels

double l2_norm(const double* v, int64_t n);

}  // namespace lincir
