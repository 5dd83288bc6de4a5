#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ifmd/linalg.hpp"
#include "ifmd/random.hpp"
#include "ifmd/tape.hpp"

namespace ifmd::testing {

inline Tensor random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_normal(CounterRng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal();
  return t;
}

// Gram-Schmidt on a Gaussian matrix.
inline Tensor random_orthogonal(CounterRng& rng, std::size_t d) {
  Tensor q = random_normal(rng, {d, d});
  for (std::size_t j = 0; j < d; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += q.at(i, j) * q.at(i, k);
        for (std::size_t i = 0; i < d; ++i) q.at(i, j) -= dot * q.at(i, k);
      }
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += q.at(i, j) * q.at(i, j);
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) q.at(i, j) /= n;
  }
  return q;
}

inline Tensor random_skew(CounterRng& rng, std::size_t d) {
  const Tensor a = random_normal(rng, {d, d});
  return sub(a, transpose(a));
}

// Q diag(lambda) Q^T with eigenvalues log-spaced between 1 and `condition`.
inline Tensor random_spd(CounterRng& rng, std::size_t d, double condition, double scale = 1.0) {
  const Tensor q = random_orthogonal(rng, d);
  Tensor qd = q;
  for (std::size_t k = 0; k < d; ++k) {
    const double t = d == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(d - 1);
    const double lambda = scale * std::pow(condition, t);
    for (std::size_t i = 0; i < d; ++i) qd.at(i, k) *= lambda;
  }
  Tensor s = matmul(qd, transpose(q));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) s.at(i, j) = s.at(j, i);
  return s;
}

// Mixes features with a random matrix so the sample covariance is well away from identity.
inline Tensor correlated_batch(CounterRng& rng, std::size_t d, std::size_t m) {
  const Tensor mix = random_tensor(rng, {d, d}, -1.0, 1.0);
  Tensor base = random_normal(rng, {d, m});
  Tensor z = add(matmul(add(mix, Tensor::identity(d)), base), Tensor({d, m}, std::vector<double>(d * m, 0.5)));
  return z;
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Largest |analytic - numeric| / max(1, |analytic|) over every entry of every input,
// using central differences with step h.
inline double gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const Gradients g = tape.backward(f(tape, leaves));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : xs) vs.push_back(t.leaf(x));
    return f(t, vs).value()[0];
  };
  double worst = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = g[leaves[k]];
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      work[k].mutable_data()[i] = x0 + h;
      const double up = eval(work);
      work[k].mutable_data()[i] = x0 - h;
      const double down = eval(work);
      work[k].mutable_data()[i] = x0;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace ifmd::testing
