#include "lens/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lens/errors.hpp"

namespace lens {

namespace {

Tensor<double> transpose(const Tensor<double>& a) {
  Tensor<double> t(Shape{a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

/// Replaces zero columns (flagged in `empty`) of q [m,k] with unit vectors
/// orthogonal to every other column, via Gram-Schmidt over the standard basis.
void complete_basis(Tensor<double>& q, const std::vector<bool>& empty) {
  const std::size_t m = q.dim(0), k = q.dim(1);
  std::size_t next_basis = 0;
  for (std::size_t j = 0; j < k; ++j) {
    if (!empty[j]) continue;
    for (; next_basis < m; ++next_basis) {
      std::vector<double> cand(m, 0.0);
      cand[next_basis] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t c = 0; c < k; ++c) {
          if (c == j || (empty[c] && c > j)) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += cand[i] * q.at(i, c);
          for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * q.at(i, c);
        }
      }
      double norm = 0.0;
      for (double v : cand) norm += v * v;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (std::size_t i = 0; i < m; ++i) q.at(i, j) = cand[i] / norm;
        ++next_basis;
        break;
      }
    }
  }
}

Svd svd_tall(const Tensor<double>& a, double tol, int max_sweeps) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<double> w = a;
  Tensor<double> v = Tensor<double>::identity(n);
  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = w.at(i, p), y = w.at(i, q);
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = w.at(i, p), y = w.at(i, q);
          w.at(i, p) = c * x - s * y;
          w.at(i, q) = s * x + c * y;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double x = v.at(i, p), y = v.at(i, q);
          v.at(i, p) = c * x - s * y;
          v.at(i, q) = s * x + c * y;
        }
      }
    }
  }
  if (!converged) throw NumericError("Jacobi SVD did not converge in " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += w.at(i, j) * w.at(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double scale = sigma.empty() ? 0.0 : sigma[order[0]];
  const double cutoff = std::max(scale, 1.0) * 1e-14 * static_cast<double>(std::max(m, n));
  Svd out{Tensor<double>(Shape{m, n}), Tensor<double>(Shape{n}), Tensor<double>(Shape{n, n})};
  std::vector<bool> empty(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    for (std::size_t i = 0; i < n; ++i) out.v.at(i, k) = v.at(i, j);
    if (sigma[j] <= cutoff) {
      out.s[k] = 0.0;
      empty[k] = true;
      continue;
    }
    out.s[k] = sigma[j];
    for (std::size_t i = 0; i < m; ++i) out.u.at(i, k) = w.at(i, j) / sigma[j];
  }
  complete_basis(out.u, empty);
  return out;
}

}  // namespace

Svd svd_jacobi(const Tensor<double>& a, double tol, int max_sweeps) {
  if (a.rank() != 2) throw DimensionError("svd expects a matrix, got " + shape_string(a.shape()));
  a.require_finite("svd input");
  if (a.dim(0) >= a.dim(1)) return svd_tall(a, tol, max_sweeps);
  auto t = svd_tall(transpose(a), tol, max_sweeps);
  return Svd{std::move(t.v), std::move(t.s), std::move(t.u)};
}

Tensor<double> svd_reconstruct(const Svd& svd) {
  const std::size_t m = svd.u.dim(0), n = svd.v.dim(0), k = svd.s.numel();
  Tensor<double> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < k; ++r) acc += svd.u.at(i, r) * svd.s[r] * svd.v.at(j, r);
      out.at(i, j) = acc;
    }
  }
  return out;
}

}  // namespace lens
