#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "bregmanlens/errors.hpp"

namespace blns {

// Dense row-major tensor of 64-bit reals. Rank 0 (scalar), 1 and 2 cover
// everything this library needs; higher ranks are batched as row blocks.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);  // zero-filled
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  // 2-D rows/cols; rank-1 tensors count as a single row.
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  double& operator()(int i) { return data_[size_t(i)]; }
  double operator()(int i) const { return data_[size_t(i)]; }
  double& operator()(int i, int j) { return data_[size_t(i) * size_t(shape_[1]) + size_t(j)]; }
  double operator()(int i, int j) const { return data_[size_t(i) * size_t(shape_[1]) + size_t(j)]; }

  double item() const;  // value of a scalar/1-element tensor

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  // Throws a numeric error naming `what` when any entry is NaN/Inf.
  void check_finite(const char* what) const;

  void fill(double v);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// ---- elementary operations -------------------------------------------------

// Standard matrix product a[m x k] * b[k x n]. Rank-1 operands are treated as
// 1 x k rows (left) / k x 1 columns (right) where the shapes make that
// unambiguous.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T

Tensor transpose(const Tensor& a);

// Max-shifted softmax over a rank-1 tensor. Output sums to 1, order-preserving.
Tensor stable_softmax(const Tensor& z);

// Max-shifted softmax applied independently to every row of a 2-D tensor.
void softmax_rows_inplace(Tensor& z);

// Normalizes x to zero mean / unit variance (eps added to the variance), then
// applies the affine transform gain * xhat + bias. Rank-1 contract; the model
// applies it rowwise.
inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);  // Euclidean norm
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
void axpy_inplace(Tensor& y, double alpha, const Tensor& x);  // y += alpha*x

// Sum of a vector reduced pairwise; order-stable and less lossy than a
// running sum for long inputs.
double pairwise_sum(const double* x, size_t n);

}  // namespace blns
