#pragma once

#include "bregmanlens/tensor.hpp"

namespace blns {

// Eigendecomposition of a symmetric matrix: eigenvalues sorted descending,
// eigenvectors as the columns of an orthogonal matrix Q, so that
// input = Q diag(eigenvalues) Q^T.
struct SymmetricEigen {
  Tensor eigenvalues;   // [d], descending
  Tensor eigenvectors;  // [d x d], column i pairs with eigenvalues(i)
};

// Cyclic Jacobi rotations. The input must be symmetric within
// 1e-10 * max|entry| (it is symmetrized as (S + S^T)/2 before iterating);
// larger asymmetry is a validation error. Convergence: off-diagonal Frobenius
// norm below 1e-12 times the on-diagonal norm, at most 100 sweeps; hitting the
// sweep cap raises a numeric error reporting the residual.
SymmetricEigen eigh(const Tensor& s);

// Solves (s + damping*I) u = v through an existing eigendecomposition,
// clamping negative eigenvalues to zero first. damping must be > 0.
Tensor damped_inverse_apply(const SymmetricEigen& es, double damping, const Tensor& v);

}  // namespace blns
