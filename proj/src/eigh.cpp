#include "bregmanlens/eigh.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace blns {

namespace {

constexpr int kMaxSweeps = 100;
constexpr double kConvergenceRatio = 1e-12;  // off-diagonal vs diagonal norm
constexpr double kSymmetryTol = 1e-10;       // relative to max |entry|

double off_diagonal_norm(const Tensor& a) {
  const int d = a.dim(0);
  double s = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double diagonal_norm(const Tensor& a) {
  const int d = a.dim(0);
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += a(i, i) * a(i, i);
  return std::sqrt(s);
}

}  // namespace

SymmetricEigen eigh(const Tensor& s) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
    fail(ErrorKind::dimension, "eigh requires a square matrix");
  }
  const int d = s.dim(0);
  s.check_finite("eigh input");

  double max_abs = 0.0;
  for (size_t i = 0; i < s.size(); ++i) max_abs = std::max(max_abs, std::fabs(s.data()[i]));
  double max_asym = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) max_asym = std::max(max_asym, std::fabs(s(i, j) - s(j, i)));
  if (max_abs > 0.0 && max_asym > kSymmetryTol * max_abs) {
    fail(ErrorKind::validation, "eigh input asymmetry ", max_asym, " exceeds ",
         kSymmetryTol, " * max|entry| (", kSymmetryTol * max_abs, ")");
  }

  Tensor a({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = 0.5 * (s(i, j) + s(j, i));

  Tensor q({d, d});
  for (int i = 0; i < d; ++i) q(i, i) = 1.0;

  int sweep = 0;
  for (; sweep < kMaxSweeps; ++sweep) {
    const double off = off_diagonal_norm(a);
    const double diag = diagonal_norm(a);
    if (off <= kConvergenceRatio * diag || off == 0.0) break;
    for (int p = 0; p < d - 1; ++p) {
      for (int r = p + 1; r < d; ++r) {
        const double apr = a(p, r);
        if (apr == 0.0) continue;
        const double theta = (a(r, r) - a(p, p)) / (2.0 * apr);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (int k = 0; k < d; ++k) {
          const double akp = a(k, p), akr = a(k, r);
          a(k, p) = c * akp - sn * akr;
          a(k, r) = sn * akp + c * akr;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = a(p, k), ark = a(r, k);
          a(p, k) = c * apk - sn * ark;
          a(r, k) = sn * apk + c * ark;
        }
        for (int k = 0; k < d; ++k) {
          const double qkp = q(k, p), qkr = q(k, r);
          q(k, p) = c * qkp - sn * qkr;
          q(k, r) = sn * qkp + c * qkr;
        }
      }
    }
  }
  if (sweep == kMaxSweeps) {
    fail(ErrorKind::numeric, "eigh did not converge after ", kMaxSweeps,
         " sweeps; off-diagonal residual ", off_diagonal_norm(a));
  }

  std::vector<int> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return a(i, i) > a(j, j); });

  SymmetricEigen out;
  out.eigenvalues = Tensor({d});
  out.eigenvectors = Tensor({d, d});
  for (int i = 0; i < d; ++i) {
    out.eigenvalues(i) = a(order[size_t(i)], order[size_t(i)]);
    for (int k = 0; k < d; ++k) out.eigenvectors(k, i) = q(k, order[size_t(i)]);
  }
  return out;
}

Tensor damped_inverse_apply(const SymmetricEigen& es, double damping, const Tensor& v) {
  if (damping <= 0.0) fail(ErrorKind::contract, "damping must be positive, got ", damping);
  const int d = es.eigenvalues.dim(0);
  if (v.rank() != 1 || v.dim(0) != d) {
    fail(ErrorKind::dimension, "damped_inverse_apply vector dimension mismatch");
  }
  // coords = Q^T v, scale by 1/(max(lambda,0)+damping), map back.
  Tensor coords = matmul_tn(es.eigenvectors, v);
  for (int i = 0; i < d; ++i) {
    coords(i) /= std::max(es.eigenvalues(i), 0.0) + damping;
  }
  return matmul(es.eigenvectors, coords);
}

}  // namespace blns
