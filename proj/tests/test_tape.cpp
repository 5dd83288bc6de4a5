#include <gtest/gtest.h>

#include <cmath>

#include "ifmd/tape.hpp"
#include "support.hpp"

using namespace ifmd;
using ifmd::testing::gradient_error;
using ifmd::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Entries bounded away from zero, so relu kinks and power bases are safe.
Tensor away_from_zero(CounterRng& rng, Shape shape) {
  Tensor t = random_tensor(rng, std::move(shape), 0.2, 1.5);
  for (double& v : t.mutable_data())
    if (rng.uniform() < 0.5) v = -v;
  return t;
}

Tensor well_conditioned(CounterRng& rng, std::size_t d) {
  return add(random_tensor(rng, {d, d}, -0.3, 0.3), scale(Tensor::identity(d), 2.0));
}

}  // namespace

TEST(Backward, TraceGradientIsIdentity) {
  Tape tape;
  CounterRng rng(1, 0);
  Var a = tape.leaf(random_tensor(rng, {4, 4}));
  const Gradients g = tape.backward(trace(a));
  EXPECT_EQ(g[a], Tensor::identity(4));
}

TEST(Backward, SumOfProductMatchesFiniteDifferences) {
  CounterRng rng(2, 0);
  const double err = gradient_error([](Tape&, const std::vector<Var>& v) { return sum(matmul(v[0], v[1])); },
                                    {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 4})});
  EXPECT_LE(err, kTol);
}

TEST(Backward, CenteringKillsConstantGradient) {
  Tape tape;
  CounterRng rng(3, 0);
  Var z = tape.leaf(random_tensor(rng, {3, 6}));
  const Gradients g = tape.backward(sum(mean_center(z)));
  EXPECT_LE(max_abs(g[z]), 1e-15);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 2}));
  EXPECT_THROW(tape.backward(matmul(a, a)), ContractError);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape tape;
  Var a = tape.leaf(Tensor::identity(2));
  Var c = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var loss = sum(matmul(a, c));
  EXPECT_FALSE(c.tracked());
  const Gradients g = tape.backward(loss);
  EXPECT_FALSE(g.has(c));
  EXPECT_TRUE(g.has(a));
}

TEST(Backward, StopGradientBlocksFlow) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{2}}));
  Var loss = sum(hadamard(a, stop_gradient(a)));
  const Gradients g = tape.backward(loss);
  EXPECT_EQ(g[a][0], 2.0);
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{3}}));
  Var loss = sum(add(a, add(a, a)));
  EXPECT_EQ(tape.backward(loss)[a][0], 3.0);
}

TEST(Backward, IsBitwiseDeterministic) {
  CounterRng rng(4, 0);
  const Tensor x = random_tensor(rng, {5, 5});
  const Tensor y = random_tensor(rng, {5, 7});
  auto run = [&] {
    Tape tape;
    Var a = tape.leaf(x), b = tape.leaf(y);
    Var h = relu(matmul(a, b));
    Var loss = sum(hadamard(h, mean_center(h)));
    const Gradients g = tape.backward(loss);
    return std::pair{g[a], g[b]};
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, InputsPrecedeOutputs) {
  Tape tape;
  Var a = tape.leaf(Tensor::identity(2));
  Var b = matmul(a, transpose(a));
  Var c = trace(add(b, a));
  for (std::size_t id = 0; id < tape.size(); ++id)
    for (std::size_t in : tape.node(id).inputs) EXPECT_LT(in, id);
  EXPECT_EQ(c.id() + 1, tape.size());
}

TEST(Tape, NonFiniteValueIsNumericalError) {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{1e200}}));
  EXPECT_THROW(matmul(a, a), NumericalError);
  EXPECT_THROW(power(tape.leaf(Tensor::matrix({{-1}})), 0.5), NumericalError);
}

// ---- per-primitive finite-difference checks -----------------------------------

TEST(PrimitiveGradient, Matmul) {
  CounterRng rng(10, 0);
  EXPECT_LE(gradient_error([](Tape&, const std::vector<Var>& v) { return trace(matmul(v[0], v[1])); },
                           {random_tensor(rng, {4, 3}), random_tensor(rng, {3, 4})}),
            kTol);
}

TEST(PrimitiveGradient, TransposeAddScaleSub) {
  CounterRng rng(11, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var t = sub(scale(add(v[0], transpose(v[1])), 1.7), v[0]);
                  return sum(hadamard(t, t));
                },
                {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 3})}),
            kTol);
}

TEST(PrimitiveGradient, ScaleByScalarNode) {
  CounterRng rng(12, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var s = sum(hadamard(v[1], v[1]));
                  return sum(hadamard(scale_by(v[0], s), v[0]));
                },
                {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2})}),
            kTol);
}

TEST(PrimitiveGradient, PowerAndTrace) {
  CounterRng rng(13, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var tr = trace(matmul(v[0], transpose(v[0])));
                  return sum(scale_by(v[0], power(tr, -0.5)));
                },
                {random_tensor(rng, {3, 3})}),
            kTol);
}

TEST(PrimitiveGradient, MeanCenter) {
  CounterRng rng(14, 0);
  const Tensor w = random_tensor(rng, {3, 5});
  EXPECT_LE(gradient_error(
                [&w](Tape& t, const std::vector<Var>& v) {
                  return sum(hadamard(mean_center(v[0]), t.constant(w)));
                },
                {random_tensor(rng, {3, 5})}),
            kTol);
}

TEST(PrimitiveGradient, ReshapeSelectSum) {
  CounterRng rng(15, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var r = reshape(v[0], {3, 2});
                  Var s = select(matmul(transpose(r), r), 3);
                  return add(s, sum(r));
                },
                {random_tensor(rng, {2, 3})}),
            kTol);
}

TEST(PrimitiveGradient, Relu) {
  CounterRng rng(16, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var r = relu(v[0]);
                  return sum(hadamard(r, r));
                },
                {away_from_zero(rng, {4, 5})}),
            kTol);
}

TEST(PrimitiveGradient, LinearSolve) {
  CounterRng rng(17, 0);
  EXPECT_LE(gradient_error(
                [](Tape&, const std::vector<Var>& v) {
                  Var x = linear_solve(v[0], v[1]);
                  return sum(hadamard(x, x));
                },
                {well_conditioned(rng, 4), random_tensor(rng, {4, 3})}),
            kTol);
}

TEST(PrimitiveGradient, ChannelLayoutChanges) {
  CounterRng rng(18, 0);
  const Tensor w = random_tensor(rng, {3, 2 * 2 * 2});
  EXPECT_LE(gradient_error(
                [&w](Tape& t, const std::vector<Var>& v) {
                  Var rows = channels_to_rows(v[0]);
                  Var back = rows_to_channels(hadamard(rows, t.constant(w)), 2, 2, 2);
                  return sum(hadamard(back, v[0]));
                },
                {random_tensor(rng, {2, 3, 2, 2})}),
            kTol);
}

TEST(PrimitiveGradient, RandomCompositionsUpToDepthSix) {
  CounterRng rng(19, 0);
  for (int trial = 0; trial < 40; ++trial) {
    const int depth = 1 + static_cast<int>(rng.below(6));
    std::vector<int> ops;
    for (int k = 0; k < depth; ++k) ops.push_back(static_cast<int>(rng.below(7)));
    const Tensor m = add(random_tensor(rng, {3, 3}, -0.4, 0.4), Tensor::identity(3));
    auto f = [&ops, &m](Tape& t, const std::vector<Var>& v) {
      Var x = v[0];
      for (int op : ops) {
        switch (op) {
          case 0: x = matmul(x, t.constant(m)); break;
          case 1: x = transpose(x); break;
          case 2: x = add(x, hadamard(x, x)); break;
          case 3: x = scale(x, 0.7); break;
          case 4: x = mean_center(x); break;
          case 5: x = linear_solve(t.constant(m), x); break;
          default: x = scale_by(x, power(add(trace(matmul(x, transpose(x))), t.constant(Tensor::scalar(1.0))), -0.5));
        }
      }
      return sum(hadamard(x, x));
    };
    EXPECT_LE(gradient_error(f, {random_tensor(rng, {3, 3}, -0.5, 0.5)}), kTol) << "trial " << trial;
  }
}

TEST(ChannelLayout, RoundTripIsExact) {
  CounterRng rng(20, 0);
  const Tensor x = random_tensor(rng, {2, 4, 3, 3});
  const Tensor rows = channels_to_rows(x);
  EXPECT_EQ(rows.shape(), (Shape{4, 18}));
  EXPECT_EQ(rows_to_channels(rows, 2, 3, 3), x);
}
