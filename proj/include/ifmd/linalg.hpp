#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "ifmd/tensor.hpp"

namespace ifmd {

// Solves A X = B by Gaussian elimination with partial pivoting.
// B may have any number of columns. Throws SingularMatrixError on a zero pivot.
inline Tensor linear_solve(const Tensor& a, const Tensor& b) {
  if (!a.is_square()) throw DimensionError("linear_solve: A must be square, got " + shape_string(a.shape()));
  require_matrix(b, "linear_solve");
  if (b.rows() != a.rows())
    throw DimensionError("linear_solve: A " + shape_string(a.shape()) + " incompatible with B " +
                         shape_string(b.shape()));
  const std::size_t n = a.rows(), r = b.cols();
  std::vector<double> lu(a.data().begin(), a.data().end());
  std::vector<double> x(b.data().begin(), b.data().end());

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    double best = std::abs(lu[col * n + col]);
    for (std::size_t i = col + 1; i < n; ++i) {
      const double v = std::abs(lu[i * n + col]);
      if (v > best) best = v, pivot = i;
    }
    if (best == 0.0 || !std::isfinite(best))
      throw SingularMatrixError("linear_solve: zero pivot in column " + std::to_string(col));
    if (pivot != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[col * n + j], lu[pivot * n + j]);
      for (std::size_t j = 0; j < r; ++j) std::swap(x[col * r + j], x[pivot * r + j]);
    }
    const double diag = lu[col * n + col];
    for (std::size_t i = col + 1; i < n; ++i) {
      const double f = lu[i * n + col] / diag;
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) lu[i * n + j] -= f * lu[col * n + j];
      for (std::size_t j = 0; j < r; ++j) x[i * r + j] -= f * x[col * r + j];
    }
  }
  for (std::size_t ii = n; ii-- > 0;) {
    const double diag = lu[ii * n + ii];
    for (std::size_t j = 0; j < r; ++j) {
      double s = x[ii * r + j];
      for (std::size_t k = ii + 1; k < n; ++k) s -= lu[ii * n + k] * x[k * r + j];
      x[ii * r + j] = s / diag;
    }
  }
  return Tensor({n, r}, std::move(x));
}

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Tensor vectors;              // column k pairs with values[k]
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline SymmetricEigen symmetric_eigen(const Tensor& sym, double tol = 1e-15, int max_sweeps = 100) {
  if (!sym.is_square()) throw DimensionError("symmetric_eigen: non-square input " + shape_string(sym.shape()));
  const std::size_t n = sym.rows();
  Tensor a = sym;
  Tensor v = Tensor::identity(n);
  // Symmetrize so round-off asymmetry in the input cannot stall the sweep.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a.at(i, j) = a.at(j, i) = 0.5 * (a.at(i, j) + a.at(j, i));

  const double scale_ref = std::max(frobenius_norm(a), 1e-300);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a.at(i, j) * a.at(i, j);
    if (std::sqrt(off) <= tol * scale_ref) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a.at(x, x) < a.at(y, y); });
  SymmetricEigen out{std::vector<double>(n), Tensor({n, n})};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a.at(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors.at(i, k) = v.at(i, order[k]);
  }
  return out;
}

}  // namespace ifmd
