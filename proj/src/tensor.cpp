#include "bregmanlens/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace blns {

namespace {

size_t shape_product(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail(ErrorKind::dimension, "tensor dimension must be positive, got ", d);
    n *= size_t(d);
  }
  return n;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// Interprets a tensor as a 2-D matrix for matmul. Rank-1 tensors are adapted
// to the requested orientation.
struct MatView {
  const double* p;
  int r, c;
};

MatView as_matrix(const Tensor& t, bool as_row_if_vec) {
  if (t.rank() == 2) return {t.data(), t.dim(0), t.dim(1)};
  if (t.rank() == 1) {
    if (as_row_if_vec) return {t.data(), 1, t.dim(0)};
    return {t.data(), t.dim(0), 1};
  }
  fail(ErrorKind::dimension, "matmul operand must be rank 1 or 2, got rank ", t.rank());
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  MatView va = as_matrix(a, /*as_row_if_vec=*/!trans_a);
  MatView vb = as_matrix(b, /*as_row_if_vec=*/trans_b);
  const int am = trans_a ? va.c : va.r;
  const int ak = trans_a ? va.r : va.c;
  const int bk = trans_b ? vb.c : vb.r;
  const int bn = trans_b ? vb.r : vb.c;
  if (ak != bk) {
    fail(ErrorKind::dimension, "matmul inner dimensions differ: ", am, "x", ak,
         trans_a ? " (transposed)" : "", " vs ", bk, "x", bn,
         trans_b ? " (transposed)" : "");
  }
  // Preserve vector rank when one side is rank-1 and untransposed.
  std::vector<int> out_shape;
  if (a.rank() == 1 && b.rank() == 2 && !trans_a) {
    out_shape = {bn};
  } else if (a.rank() == 2 && b.rank() == 1 && !trans_b) {
    out_shape = {am};
  } else {
    out_shape = {am, bn};
  }
  Tensor out(out_shape);
  CMap ma(va.p, va.r, va.c);
  CMap mb(vb.p, vb.r, vb.c);
  MMap mo(out.data(), am, bn);
  if (!trans_a && !trans_b) {
    mo.noalias() = ma * mb;
  } else if (trans_a && !trans_b) {
    mo.noalias() = ma.transpose() * mb;
  } else if (!trans_a && trans_b) {
    mo.noalias() = ma * mb.transpose();
  } else {
    mo.noalias() = ma.transpose() * mb.transpose();
  }
  return out;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
  const size_t n = shape_product(shape_);
  if (n != data.size()) {
    fail(ErrorKind::dimension, "tensor data length ", data.size(),
         " does not match shape product ", n);
  }
  data_ = std::move(data);
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape_ = {};
  t.data_ = {v};
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    fail(ErrorKind::contract, "item() requires a single-element tensor, size is ", data_.size());
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(const char* what) const {
  if (!all_finite()) fail(ErrorKind::numeric, what, " contains non-finite entries");
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, false); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false, true); }

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail(ErrorKind::dimension, "transpose requires rank 2, got ", a.rank());
  Tensor out({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor stable_softmax(const Tensor& z) {
  if (z.rank() != 1 || z.dim(0) < 1) {
    fail(ErrorKind::dimension, "stable_softmax requires a non-empty rank-1 tensor");
  }
  const int n = z.dim(0);
  Tensor out({n});
  double m = z(0);
  for (int i = 1; i < n; ++i) m = std::max(m, z(i));
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(z(i) - m);
    out(i) = e;
    sum += e;
  }
  for (int i = 0; i < n; ++i) out(i) /= sum;
  return out;
}

void softmax_rows_inplace(Tensor& z) {
  if (z.rank() != 2) fail(ErrorKind::dimension, "softmax_rows requires rank 2");
  const int r = z.dim(0), c = z.dim(1);
  for (int i = 0; i < r; ++i) {
    double* row = z.data() + size_t(i) * size_t(c);
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < c; ++j) row[j] *= inv;
  }
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() != 1 || x.dim(0) < 2) {
    fail(ErrorKind::dimension, "layer_norm requires a rank-1 tensor with at least 2 entries");
  }
  if (!x.same_shape(gain) || !x.same_shape(bias)) {
    fail(ErrorKind::dimension, "layer_norm gain/bias shape must match input");
  }
  const int d = x.dim(0);
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x(i);
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x(i) - mean;
    var += c * c;
  }
  var /= d;
  const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  Tensor out({d});
  for (int i = 0; i < d; ++i) out(i) = gain(i) * ((x(i) - mean) * inv_std) + bias(i);
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail(ErrorKind::dimension, "dot requires identical shapes");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail(ErrorKind::dimension, "add requires identical shapes");
  Tensor out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) fail(ErrorKind::dimension, "sub requires identical shapes");
  Tensor out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= c;
  return out;
}

void axpy_inplace(Tensor& y, double alpha, const Tensor& x) {
  if (!y.same_shape(x)) fail(ErrorKind::dimension, "axpy requires identical shapes");
  for (size_t i = 0; i < y.size(); ++i) y.data()[i] += alpha * x.data()[i];
}

double pairwise_sum(const double* x, size_t n) {
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += x[i];
    return s;
  }
  const size_t half = n / 2;
  return pairwise_sum(x, half) + pairwise_sum(x + half, n - half);
}

}  // namespace blns
