#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "ifmd/linalg.hpp"
#include "ifmd/tensor.hpp"

namespace ifmd {

// Covariance statistics of a features x samples activation matrix.
struct CovarianceSummary {
  Tensor covariance;               // (1/m) centered centered^T, no regularizer
  double max_abs_identity_gap = 0;  // max_ij |cov - I|
  double mean_abs_offdiagonal = 0;
  double min_eigenvalue = 0;
  double max_eigenvalue = 0;
};

inline Tensor sample_covariance(const Tensor& rows) {
  const Tensor centered = mean_center(rows);
  const std::size_t d = rows.rows(), m = rows.cols();
  Tensor cov({d, d});
  kernel::gemm_nt(d, m, d, centered.data().data(), centered.data().data(), cov.mutable_data().data(), false);
  return scale(cov, 1.0 / static_cast<double>(m));
}

inline double mean_abs_offdiagonal(const Tensor& square) {
  const std::size_t d = square.rows();
  if (d < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      if (i != j) s += std::abs(square.at(i, j));
  return s / static_cast<double>(d * (d - 1));
}

inline CovarianceSummary summarize_covariance(const Tensor& rows, bool with_eigenvalues = true) {
  CovarianceSummary s;
  s.covariance = sample_covariance(rows);
  const std::size_t d = s.covariance.rows();
  s.max_abs_identity_gap = max_abs(sub(s.covariance, Tensor::identity(d)));
  s.mean_abs_offdiagonal = mean_abs_offdiagonal(s.covariance);
  if (with_eigenvalues) {
    const SymmetricEigen eig = symmetric_eigen(s.covariance);
    s.min_eigenvalue = eig.values.front();
    s.max_eigenvalue = eig.values.back();
  }
  return s;
}

// Mean |Pearson correlation| over channel pairs of a channels x positions
// matrix. Pairs involving a (numerically) constant channel have no defined correlation and
// are skipped; returns 0 when no pair qualifies.
inline double mean_abs_channel_correlation(const Tensor& rows) {
  const Tensor cov = sample_covariance(rows);
  const std::size_t c = cov.rows();
  double max_var = 0.0;
  for (std::size_t i = 0; i < c; ++i) max_var = std::max(max_var, cov.at(i, i));
  const double floor = 1e-12 * max_var;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i + 1; j < c; ++j) {
      if (!(cov.at(i, i) > floor && cov.at(j, j) > floor)) continue;
      const double denom = std::sqrt(cov.at(i, i) * cov.at(j, j));
      total += std::abs(cov.at(i, j)) / denom;
      ++pairs;
    }
  return pairs ? total / static_cast<double>(pairs) : 0.0;
}

}  // namespace ifmd
