#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bregmanlens/rng.hpp"
#include "bregmanlens/tensor.hpp"

namespace blns::testutil {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, scale);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  }
  return m;
}

inline double rel_frobenius_diff(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    num += d * d;
    den += b.data()[i] * b.data()[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Central finite differences of a scalar function of a flat parameter vector.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double step = 1e-5) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double hi = f(x);
    x[i] = orig - step;
    const double lo = f(x);
    x[i] = orig;
    g[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

// Relative error between gradient vectors: ||a-b|| / max(||b||, floor).
inline double grad_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                           double floor = 1e-10) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

}  // namespace blns::testutil
