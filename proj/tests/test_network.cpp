#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ifmd/checkpoint.hpp"
#include "ifmd/data.hpp"
#include "ifmd/network.hpp"
#include "tiny_model.hpp"

using namespace ifmd;
using namespace ifmd::testing;

namespace {

const DatasetPair& desk_dataset() {
  static const DatasetPair ds = make_dataset(SynthConfig{});
  return ds;
}

Dataset subset(const Dataset& d, std::size_t n) {
  Dataset out{d.height, d.width, {}, {}};
  out.pixels.assign(d.pixels.begin(), d.pixels.begin() + static_cast<std::ptrdiff_t>(n * d.pixels_per_image()));
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

}  // namespace

TEST(ModelSpec, ReferenceShapesAndNames) {
  const ModelSpec none = ModelSpec::reference(FwPosition::none);
  const auto shapes = none.layer_shapes();
  EXPECT_EQ(shapes[2], (Shape{8, 16, 16}));
  EXPECT_EQ(shapes[5], (Shape{16, 8, 8}));
  EXPECT_EQ(shapes[8], (Shape{32, 4, 4}));
  EXPECT_EQ(shapes.back(), (Shape{2}));
  EXPECT_FALSE(none.fw_layer());

  const std::pair<FwPosition, std::size_t> cases[] = {
      {FwPosition::low, 8}, {FwPosition::mid, 16}, {FwPosition::high, 32}};
  for (auto [pos, d] : cases) {
    const ModelSpec s = ModelSpec::reference(pos);
    ASSERT_TRUE(s.fw_layer());
    EXPECT_EQ(s.layers[*s.fw_layer()].out, d);
    EXPECT_EQ(s.layer_names()[*s.fw_layer()], "fw");
    EXPECT_EQ(s.layer_names()[*s.fw_layer() - 1], "pool" + std::to_string(*s.fw_layer() / 3));
  }
}

TEST(ModelSpec, ChainErrors) {
  ModelSpec s = ModelSpec::reference(FwPosition::none);
  s.layers[3] = LayerSpec::conv(7, 16, 3);
  EXPECT_THROW(s.layer_shapes(), DimensionError);

  ModelSpec two = ModelSpec::reference(FwPosition::low);
  two.layers.insert(two.layers.begin() + 3, LayerSpec::fw(8));
  EXPECT_THROW(two.layer_shapes(), DimensionError);

  ModelSpec wrong = ModelSpec::reference(FwPosition::none);
  wrong.layers.insert(wrong.layers.begin() + 3, LayerSpec::fw(9));
  EXPECT_THROW(Model::init(wrong), DimensionError);
}

TEST(ModelSpec, FwPositionParsing) {
  for (const char* name : {"none", "low", "mid", "high"}) EXPECT_STREQ(to_string(*parse_fw_position(name)), name);
  EXPECT_FALSE(parse_fw_position("middle"));
}

TEST(Model, InitIsDeterministicAndFanInScaled) {
  const Model a = Model::init(ModelSpec::reference(FwPosition::mid, 3));
  const Model b = Model::init(ModelSpec::reference(FwPosition::mid, 3));
  EXPECT_EQ(serialize_model(a), serialize_model(b));
  const double bound = 1.0 / std::sqrt(9.0);
  for (double v : a.params[0].weight.data()) EXPECT_LE(std::abs(v), bound);
  EXPECT_EQ(a.constraint.rotation, Tensor::identity(16));
  EXPECT_EQ(a.whitening.running_whitening, Tensor::identity(16));
  const Model c = Model::init(ModelSpec::reference(FwPosition::mid, 4));
  EXPECT_NE(a.params[0].weight, c.params[0].weight);
}

TEST(Model, SgdParametersExcludeRotation) {
  Model m = Model::init(ModelSpec::reference(FwPosition::high));
  const auto params = m.sgd_parameters();
  EXPECT_EQ(params.size(), 10u);
  for (Tensor* p : params) EXPECT_NE(p, &m.constraint.rotation);
}

TEST(Sgd, ZeroGradientWithoutDecayIsNoOp) {
  Tensor p = Tensor::matrix({{1, -2}});
  const Tensor before = p;
  std::vector<Tensor> velocity;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor({1, 2})};
  sgd_step(params, grads, velocity, {0.1, 0.9, 0.0});
  EXPECT_EQ(p, before);
}

TEST(Sgd, FirstStepIsPlainGradientDescent) {
  Tensor p = Tensor::matrix({{1, -2}});
  std::vector<Tensor> velocity;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor::matrix({{0.5, 4}})};
  sgd_step(params, grads, velocity, {0.1, 0.9, 0.0});
  EXPECT_EQ(p, Tensor::matrix({{1 - 0.1 * 0.5, -2 - 0.1 * 4}}));
}

TEST(Sgd, TwoStepsFollowMomentumRecursion) {
  const double lr = 0.05, mu = 0.9, wd = 0.01, g = 0.3, p0 = 2.0;
  Tensor p = Tensor::matrix({{p0}});
  std::vector<Tensor> velocity;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor::matrix({{g}})};
  sgd_step(params, grads, velocity, {lr, mu, wd});
  sgd_step(params, grads, velocity, {lr, mu, wd});
  const double v1 = g + wd * p0;
  const double p1 = p0 - lr * v1;
  const double v2 = mu * v1 + g + wd * p1;
  const double p2 = p1 - lr * v2;
  EXPECT_DOUBLE_EQ(p[0], p2);
  EXPECT_DOUBLE_EQ(velocity[0][0], v2);
}

TEST(TrainConfig, LearningRateSchedule) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(19), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(20), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(30), 0.1 * 0.1 * 0.1);
  cfg.batch = 1;
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(EpochOrder, IsAPermutationThatDependsOnEpoch) {
  auto a = epoch_order(100, 1, 0), b = epoch_order(100, 1, 0), c = epoch_order(100, 1, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::sort(c.begin(), c.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(c[i], i);
}

TEST(Gradient, TinyModelMatchesFiniteDifferences) {
  const Model m = tiny_model(3);
  const GradientCheck r = check_model_gradients(m, tiny_batch(1), {0, 1, 1, 0});
  EXPECT_EQ(r.entries, 36u + 4u + 72u + 2u + 16u);
  EXPECT_LE(r.worst_scaled, 1e-3);
  EXPECT_LE(r.worst_relative, 1e-3);
}

TEST(Gradient, TinyModelWithoutWhitening) {
  ModelSpec spec;
  spec.input = {1, 6, 6};
  spec.layers = {LayerSpec::conv(1, 3, 3), LayerSpec::relu(), LayerSpec::maxpool(2), LayerSpec::flatten(),
                 LayerSpec::dense(27, 5), LayerSpec::relu(), LayerSpec::dense(5, 2)};
  const Model m = Model::init(spec);
  EXPECT_LE(check_model_gradients(m, tiny_batch(2), {1, 1, 0, 1}).worst_relative, 1e-3);
}

TEST(Evaluate, IsPure) {
  const DatasetPair& ds = desk_dataset();
  Model m = Model::init(ModelSpec::reference(FwPosition::high));
  std::vector<Tensor> velocity;
  TrainConfig cfg;
  train_epoch(m, subset(ds.train, 256), cfg, 0, velocity);
  const std::vector<char> before = serialize_model(m);
  const EvalResult r1 = evaluate(m, ds.test);
  const EvalResult r2 = evaluate(m, ds.test, 64);
  EXPECT_EQ(serialize_model(m), before);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
  EXPECT_EQ(r1.total, 500u);
}

TEST(Evaluate, PerfectAndFlippedLogits) {
  // A dense model reading the label-carrying pixel: logit = (1 - 2x, 2x - 1).
  ModelSpec spec;
  spec.input = {1, 1, 1};
  spec.layers = {LayerSpec::flatten(), LayerSpec::dense(1, 2)};
  Model m = Model::init(spec);
  m.params[1].weight = Tensor::matrix({{-2}, {2}});
  m.params[1].bias = Tensor({2}, std::vector<double>{1, -1});
  Dataset ds{1, 1, {}, {}};
  for (int i = 0; i < 10; ++i) ds.push(Sample{{static_cast<double>(i % 2)}, i % 2});
  const EvalResult good = evaluate(m, ds);
  EXPECT_EQ(good.accuracy, 1.0);
  EXPECT_EQ(good.confusion[0][0], 5u);
  EXPECT_EQ(good.confusion[1][1], 5u);

  // Mislabel three samples; flipping every label must give the complement.
  ds.labels[0] = 1, ds.labels[3] = 0, ds.labels[4] = 1;
  const double acc = evaluate(m, ds).accuracy;
  for (auto& l : ds.labels) l = 1 - l;
  EXPECT_DOUBLE_EQ(evaluate(m, ds).accuracy, 1.0 - acc);
}

TEST(Evaluate, EmptyDatasetIsDataError) {
  const Model m = Model::init(ModelSpec::reference(FwPosition::none));
  EXPECT_THROW(evaluate(m, Dataset{32, 32, {}, {}}), DataError);
  Model w = m;
  std::vector<Tensor> velocity;
  EXPECT_THROW(train_epoch(w, Dataset{32, 32, {}, {}}, {}, 0, velocity), DataError);
}

TEST(Evaluate, UntrainedWhiteningCannotEvaluate) {
  const Model m = Model::init(ModelSpec::reference(FwPosition::low));
  EXPECT_THROW(evaluate(m, subset(desk_dataset().test, 4)), UninitializedStateError);
}

TEST(TrainStep, WrongImageShapeIsDimensionError) {
  Model m = Model::init(ModelSpec::reference(FwPosition::none));
  std::vector<Tensor> velocity;
  const std::vector<int> labels{0, 1};
  EXPECT_THROW(train_step(m, Tensor({2, 1, 28, 28}), labels, {}, velocity), DimensionError);
}

TEST(TrainStep, KeepsRotationOrthogonalAndUpdatesStatistics) {
  const DatasetPair& ds = desk_dataset();
  Model m = Model::init(ModelSpec::reference(FwPosition::mid));
  std::vector<Tensor> velocity;
  std::vector<std::size_t> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < 5; ++k) train_step(m, ds.train.batch(idx), ds.train.batch_labels(idx), {}, velocity);
  EXPECT_EQ(m.whitening.steps, 5u);
  EXPECT_EQ(m.constraint.updates, 5u);
  EXPECT_LE(orthogonality_error(m.constraint.rotation), 1e-8);
}

// Mean epoch loss falls between the first and fifth epoch for every placement.
class LossDecrease : public ::testing::TestWithParam<FwPosition> {};

TEST_P(LossDecrease, FirstEpochAboveFifth) {
  const DatasetPair& ds = desk_dataset();
  Model m = Model::init(ModelSpec::reference(GetParam()));
  TrainConfig cfg;
  std::vector<Tensor> velocity;
  std::vector<double> losses;
  for (int e = 0; e < 5; ++e) losses.push_back(train_epoch(m, ds.train, cfg, e, velocity).train_loss);
  EXPECT_GT(losses.front(), losses.back());
}

INSTANTIATE_TEST_SUITE_P(AllPlacements, LossDecrease,
                         ::testing::Values(FwPosition::none, FwPosition::low, FwPosition::mid, FwPosition::high),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Degenerate, ZeroAmplitudeDataIsUnlearnable) {
  SynthConfig sc;
  sc.amplitude = 0.0;
  sc.n_train = 1000;
  const DatasetPair ds = make_dataset(sc);
  TrainConfig cfg;
  for (FwPosition pos : {FwPosition::none, FwPosition::high}) {
    Model m = Model::init(ModelSpec::reference(pos));
    std::vector<Tensor> velocity;
    for (int e = 0; e < 3; ++e) train_epoch(m, ds.train, cfg, e, velocity);
    const double acc = evaluate(m, ds.test).accuracy;
    EXPECT_GE(acc, 0.4) << to_string(pos);
    EXPECT_LE(acc, 0.6) << to_string(pos);
  }
}
