#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "ifmd/linalg.hpp"
#include "ifmd/tape.hpp"

namespace ifmd {

struct WhiteningConfig {
  int iterations = 5;     // Newton steps per forward pass
  double eps = 1e-5;      // added to the covariance diagonal
  double momentum = 0.1;  // running-statistic update rate

  void validate() const {
    if (iterations < 1) throw ContractError("whitening: iteration count must be >= 1");
    if (!(eps > 0.0)) throw ContractError("whitening: eps must be positive");
    if (!(momentum > 0.0 && momentum <= 1.0)) throw ContractError("whitening: momentum must lie in (0, 1]");
  }
};

// Evaluation-time statistics: running mean (d x 1) and running whitening matrix (d x d).
struct WhiteningState {
  Tensor running_mean;
  Tensor running_whitening;
  std::uint64_t steps = 0;

  static WhiteningState identity(std::size_t d) { return {Tensor({d, 1}), Tensor::identity(d), 0}; }
  std::size_t features() const { return running_mean.size(); }
};

// (1/m) Zc Zc^T + eps I for a centered features x samples matrix.
inline Tensor covariance(const Tensor& centered, double eps) {
  require_matrix(centered, "covariance");
  const std::size_t d = centered.rows(), m = centered.cols();
  if (m == 0) throw ContractError("covariance: empty batch");
  Tensor cov({d, d});
  kernel::gemm_nt(d, m, d, centered.data().data(), centered.data().data(), cov.mutable_data().data(), false);
  cov = scale(cov, 1.0 / static_cast<double>(m));
  for (std::size_t i = 0; i < d; ++i) cov.at(i, i) += eps;
  return cov;
}

inline Var covariance(const Var& centered, double eps) {
  require_matrix(centered.value(), "covariance");
  const std::size_t d = centered.value().rows(), m = centered.value().cols();
  if (m == 0) throw ContractError("covariance: empty batch");
  Var outer = matmul(centered, transpose(centered));
  Var cov = scale(outer, 1.0 / static_cast<double>(m));
  return add(cov, centered.tape().constant(scale(Tensor::identity(d), eps)));
}

struct NewtonResult {
  Var normalized;  // Sigma / tr(Sigma)
  Var projection;  // P_T, approximates normalized^{-1/2}
  Var whitening;   // D = P_T / sqrt(tr(Sigma)), approximates Sigma^{-1/2}
};

// Newton-Schulz inverse square root after trace normalization:
//   Sigma_N = Sigma / tr(Sigma),  P_0 = I,  P_t = (3 P_{t-1} - P_{t-1}^3 Sigma_N) / 2,
//   D = P_T / sqrt(tr(Sigma)).
// Evaluated in coupled form, Y_0 = Sigma_N, T_t = (3I - P_{t-1} Y_{t-1}) / 2,
// P_t = T_t P_{t-1}, Y_t = Y_{t-1} T_t, which yields the same iterates in exact
// arithmetic; the single-sequence form amplifies rounding once cond(Sigma) > 2.4.
// Every step is a tape primitive, so gradients flow through all iterations.
inline NewtonResult newton_inverse_sqrt(const Var& sigma, int iterations) {
  if (!sigma.value().is_square())
    throw DimensionError("newton_inverse_sqrt: non-square input " + shape_string(sigma.shape()));
  if (iterations < 1) throw ContractError("newton_inverse_sqrt: iteration count must be >= 1");
  Tape& tape = sigma.tape();
  const std::size_t d = sigma.value().rows();

  Var tr = trace(sigma);
  if (!(tr.value()[0] > 0.0))
    throw InvalidCovarianceError("newton_inverse_sqrt: covariance trace " + std::to_string(tr.value()[0]) +
                                 " is not positive");
  Var normalized = scale_by(sigma, power(tr, -1.0));
  Var three = tape.constant(scale(Tensor::identity(d), 3.0));
  Var p = tape.constant(Tensor::identity(d));
  Var y = normalized;
  for (int t = 0; t < iterations; ++t) {
    Var step = scale(sub(three, matmul(p, y)), 0.5);
    p = matmul(step, p);
    y = matmul(y, step);
  }
  Var whitening = scale_by(p, power(tr, -0.5));
  return {normalized, p, whitening};
}

struct NewtonMatrices {
  Tensor projection;
  Tensor whitening;
};

inline NewtonMatrices newton_inverse_sqrt(const Tensor& sigma, int iterations) {
  Tape tape;
  const NewtonResult r = newton_inverse_sqrt(tape.constant(sigma), iterations);
  return {r.projection.value(), r.whitening.value()};
}

// Exact Sigma^{-1/2} = U diag(lambda)^{-1/2} U^T from a Jacobi eigendecomposition.
inline Tensor zca_exact(const Tensor& sigma) {
  const SymmetricEigen eig = symmetric_eigen(sigma);
  const std::size_t d = sigma.rows();
  if (!(eig.values.front() > 0.0))
    throw ContractError("zca_exact: matrix is not positive definite (min eigenvalue " +
                        std::to_string(eig.values.front()) + ")");
  Tensor scaled = eig.vectors;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) scaled.at(i, k) /= std::sqrt(eig.values[k]);
  Tensor out({d, d});
  kernel::gemm_nt(d, d, d, scaled.data().data(), eig.vectors.data().data(), out.mutable_data().data(), false);
  return out;
}

// Intermediates of one training-mode decorrelation pass.
struct DecorrelationPass {
  Var centered;
  Var covariance;
  NewtonResult newton;
  Var output;  // D (Z - mean)
};

// Training-mode decorrelation of a features x samples batch. Updates the
// running statistics from stop-gradient copies of the batch statistics.
inline DecorrelationPass fw_forward_train_pass(const Var& z, WhiteningState& state, const WhiteningConfig& cfg) {
  cfg.validate();
  const Tensor& zv = z.value();
  require_matrix(zv, "fw_forward_train");
  const std::size_t d = zv.rows(), m = zv.cols();
  if (m < 2) throw BatchTooSmallError("fw_forward_train: training mode needs at least 2 samples, got " + std::to_string(m));
  if (state.features() != d) {
    if (state.steps != 0)
      throw DimensionError("fw_forward_train: state holds " + std::to_string(state.features()) +
                           " features, batch has " + std::to_string(d));
    state = WhiteningState::identity(d);
  }

  Var centered = mean_center(z);
  Var cov = covariance(centered, cfg.eps);
  NewtonResult newton = newton_inverse_sqrt(cov, cfg.iterations);
  Var out = matmul(newton.whitening, centered);

  const Tensor batch_mean = row_mean(zv);
  const Tensor batch_whitening = stop_gradient(newton.whitening).value();
  const double rho = cfg.momentum;
  state.running_mean = add(scale(state.running_mean, 1.0 - rho), scale(batch_mean, rho));
  state.running_whitening = add(scale(state.running_whitening, 1.0 - rho), scale(batch_whitening, rho));
  ++state.steps;
  return {centered, cov, newton, out};
}

inline Var fw_forward_train(const Var& z, WhiteningState& state, const WhiteningConfig& cfg) {
  return fw_forward_train_pass(z, state, cfg).output;
}

// Evaluation mode: D_run (z - mu_run). Pure; accepts a single column.
inline Tensor fw_forward_eval(const Tensor& z, const WhiteningState& state) {
  if (state.steps == 0) throw UninitializedStateError("fw_forward_eval: whitening statistics were never trained");
  require_matrix(z, "fw_forward_eval");
  const std::size_t d = z.rows(), m = z.cols();
  if (d != state.features())
    throw DimensionError("fw_forward_eval: state holds " + std::to_string(state.features()) + " features, input has " +
                         std::to_string(d));
  Tensor centered = z;
  auto cd = centered.mutable_data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < m; ++j) cd[i * m + j] -= state.running_mean[i];
  return matmul(state.running_whitening, centered);
}

// Channels become features and (sample, position) pairs become columns.
inline Tensor conv_reshape(const Tensor& x) { return channels_to_rows(x); }
inline Tensor conv_reshape_inverse(const Tensor& z, std::size_t n, std::size_t h, std::size_t w) {
  return rows_to_channels(z, n, h, w);
}

}  // namespace ifmd
