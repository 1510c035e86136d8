#pragma once

#include "lens/tensor.hpp"

namespace lens {

/// Thin SVD A = U diag(s) V^T with k = min(m, n): U [m,k], s [k] descending,
/// V [n,k]. Columns of U and V are orthonormal even where s is zero.
struct Svd {
  Tensor<double> u;
  Tensor<double> s;
  Tensor<double> v;
};

/// One-sided Jacobi. Converges when every column pair satisfies
/// |<a_p,a_q>| <= tol * |a_p| |a_q|; throws NumericError after max_sweeps.
Svd svd_jacobi(const Tensor<double>& a, double tol = 1e-10, int max_sweeps = 80);

/// U diag(s) V^T.
Tensor<double> svd_reconstruct(const Svd& svd);

}  // namespace lens
