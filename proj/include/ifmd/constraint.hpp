#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "ifmd/linalg.hpp"
#include "ifmd/tape.hpp"

namespace ifmd {

struct ArmijoConfig {
  double shrink = 0.5;
  double slope = 1e-4;
  int max_backtracks = 20;
};

// Orthogonal rotation applied after decorrelation, plus the smoothed gradient
// that drives its updates on the orthogonal group.
struct ConstraintState {
  Tensor rotation;       // C, d x d, orthogonal
  Tensor ema_gradient;   // G, d x d
  bool has_gradient = false;
  double alpha = 0.9;    // EMA decay
  double lambda0 = 0.1;  // initial trial step of the search
  ArmijoConfig armijo;
  std::uint64_t updates = 0;
  std::uint64_t rejected_searches = 0;  // searches that found no acceptable step

  static constexpr double kOrthogonalityTolerance = 1e-8;

  static ConstraintState identity(std::size_t d, double alpha = 0.9, double lambda0 = 0.1) {
    ConstraintState s;
    s.rotation = Tensor::identity(d);
    s.ema_gradient = Tensor({d, d});
    s.alpha = alpha;
    s.lambda0 = lambda0;
    return s;
  }
  std::size_t features() const { return rotation.rows(); }
};

// C^T Z_d.
inline Var apply_rotation(const Var& decorrelated, const Var& rotation) {
  const Tensor& c = rotation.value();
  if (!c.is_square() || c.rows() != decorrelated.value().dim(0))
    throw DimensionError("apply_rotation: rotation " + shape_string(c.shape()) + " incompatible with features " +
                         shape_string(decorrelated.shape()));
  return matmul(transpose(rotation), decorrelated);
}

inline Tensor apply_rotation(const Tensor& decorrelated, const Tensor& rotation) {
  if (!rotation.is_square() || rotation.rows() != decorrelated.dim(0))
    throw DimensionError("apply_rotation: rotation " + shape_string(rotation.shape()) + " incompatible with features " +
                         shape_string(decorrelated.shape()));
  return matmul(transpose(rotation), decorrelated);
}

// S = G C^T - C G^T. The second term is formed as the transpose of the first,
// so S^T = -S holds bitwise.
inline Tensor skew(const Tensor& gradient, const Tensor& rotation) {
  require_same_shape(gradient, rotation, "skew");
  if (!rotation.is_square()) throw DimensionError("skew: inputs must be square");
  const std::size_t d = rotation.rows();
  Tensor a({d, d});
  kernel::gemm_nt(d, d, d, gradient.data().data(), rotation.data().data(), a.mutable_data().data(), false);
  Tensor s({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) s.at(i, j) = a.at(i, j) - a.at(j, i);
  return s;
}

// G <- alpha G + (1 - alpha) g; the first observed gradient is stored as is.
inline const Tensor& ema_update(ConstraintState& state, const Tensor& gradient) {
  if (!state.has_gradient) {
    state.ema_gradient = gradient;
    state.has_gradient = true;
    return state.ema_gradient;
  }
  require_same_shape(state.ema_gradient, gradient, "ema_update");
  state.ema_gradient = add(scale(state.ema_gradient, state.alpha), scale(gradient, 1.0 - state.alpha));
  return state.ema_gradient;
}

// Cayley retraction C' = (I + (lambda/2) S)^{-1} (I - (lambda/2) S) C, solved without forming an inverse.
inline Tensor cayley_step(const Tensor& rotation, const Tensor& skew_matrix, double lambda) {
  require_same_shape(rotation, skew_matrix, "cayley_step");
  if (!rotation.is_square()) throw DimensionError("cayley_step: inputs must be square");
  const std::size_t d = rotation.rows();
  const Tensor half = scale(skew_matrix, 0.5 * lambda);
  const Tensor lhs = add(Tensor::identity(d), half);
  const Tensor rhs = matmul(sub(Tensor::identity(d), half), rotation);
  return linear_solve(lhs, rhs);
}

// Loss as a function of a candidate rotation, evaluated without side effects.
using LossProbe = std::function<double(const Tensor& rotation)>;

struct SearchResult {
  double step = 0.0;  // accepted lambda, 0 when no step satisfied the test
  double loss = 0.0;  // probed loss at the accepted point
  int evaluations = 0;
};

// Monotone Armijo backtracking along lambda -> cayley_step(C, S, lambda):
// accepts the first lambda0 * shrink^k with
//   loss(C'(lambda)) <= loss(C) - slope * lambda * ||S||_F^2.
inline SearchResult curvilinear_search(const Tensor& rotation, const Tensor& skew_matrix, const LossProbe& probe,
                                       double current_loss, double lambda0, const ArmijoConfig& armijo) {
  const double s2 = [&] {
    double n = frobenius_norm(skew_matrix);
    return n * n;
  }();
  SearchResult r;
  double lambda = lambda0;
  for (int k = 0; k <= armijo.max_backtracks; ++k, lambda *= armijo.shrink) {
    const double trial = s2 == 0.0 ? current_loss : probe(cayley_step(rotation, skew_matrix, lambda));
    if (s2 != 0.0) ++r.evaluations;
    if (trial <= current_loss - armijo.slope * lambda * s2) {
      r.step = lambda;
      r.loss = trial;
      return r;
    }
  }
  r.step = 0.0;
  r.loss = current_loss;
  return r;
}

inline SearchResult curvilinear_search(const Tensor& rotation, const Tensor& skew_matrix, const LossProbe& probe,
                                       double lambda0, const ArmijoConfig& armijo) {
  return curvilinear_search(rotation, skew_matrix, probe, probe(rotation), lambda0, armijo);
}

// EMA -> skew direction -> curvilinear search -> Cayley step, then re-checks orthogonality.
inline SearchResult constraint_update(ConstraintState& state, const Tensor& gradient, const LossProbe& probe,
                                      double current_loss) {
  const Tensor& smoothed = ema_update(state, gradient);
  const Tensor s = skew(smoothed, state.rotation);
  SearchResult r = curvilinear_search(state.rotation, s, probe, current_loss, state.lambda0, state.armijo);
  ++state.updates;
  if (r.step == 0.0) {
    ++state.rejected_searches;
    return r;
  }
  if (frobenius_norm(s) != 0.0) state.rotation = cayley_step(state.rotation, s, r.step);
  const double defect = orthogonality_error(state.rotation);
  if (!(defect <= ConstraintState::kOrthogonalityTolerance))
    throw NumericalError("constraint_update: rotation lost orthogonality (||C^T C - I||_F = " +
                         std::to_string(defect) + ")");
  return r;
}

inline SearchResult constraint_update(ConstraintState& state, const Tensor& gradient, const LossProbe& probe) {
  return constraint_update(state, gradient, probe, probe(state.rotation));
}

}  // namespace ifmd
