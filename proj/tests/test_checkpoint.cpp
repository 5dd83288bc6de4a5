#include <gtest/gtest.h>

#include <filesystem>

#include "ifmd/checkpoint.hpp"
#include "ifmd/run_config.hpp"
#include "tiny_model.hpp"

using namespace ifmd;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ifmd_test_ckpt_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Model trained_tiny() {
  Model m = ifmd::testing::tiny_model(3);
  std::vector<Tensor> velocity;
  const std::vector<int> labels{0, 1, 1, 0};
  for (std::uint64_t s = 0; s < 3; ++s) train_step(m, ifmd::testing::tiny_batch(s), labels, {}, velocity);
  return m;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  for (FwPosition pos : {FwPosition::none, FwPosition::low, FwPosition::high}) {
    const Model m = Model::init(ModelSpec::reference(pos, 11));
    const std::vector<char> bytes = serialize_model(m);
    const Model back = model_from_tensors(parse_tensors(bytes));
    EXPECT_EQ(serialize_model(back), bytes);
    EXPECT_EQ(back.spec.layers, m.spec.layers);
    EXPECT_EQ(back.spec.fw_position, pos);
    EXPECT_EQ(back.spec.seed, 11u);
  }
}

TEST(Checkpoint, PreservesWhiteningAndConstraintState) {
  const Model m = trained_tiny();
  const auto dir = temp_dir("state");
  save_checkpoint(dir / "m.bin", m);
  const Model back = load_checkpoint(dir / "m.bin");
  EXPECT_EQ(back.whitening.running_mean, m.whitening.running_mean);
  EXPECT_EQ(back.whitening.running_whitening, m.whitening.running_whitening);
  EXPECT_EQ(back.whitening.steps, 3u);
  EXPECT_EQ(back.constraint.rotation, m.constraint.rotation);
  EXPECT_EQ(back.constraint.ema_gradient, m.constraint.ema_gradient);
  EXPECT_EQ(back.constraint.updates, m.constraint.updates);
  EXPECT_TRUE(back.constraint.has_gradient);
  EXPECT_EQ(back.whitening_config.iterations, 3);
  EXPECT_FALSE(std::filesystem::exists(dir / "m.bin.tmp"));
}

TEST(Checkpoint, MagicAndLayout) {
  NamedTensors t;
  t["x"] = Tensor::matrix({{1.5}});
  const std::vector<char> bytes = serialize_tensors(t);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "IFMD0001");
  // magic, count, name length, name, rank, 2 extents, 1 value
  EXPECT_EQ(bytes.size(), 8u + 4u + 4u + 1u + 4u + 16u + 8u);
  EXPECT_EQ(parse_tensors(bytes).at("x"), t["x"]);
}

TEST(Checkpoint, VersionMismatch) {
  std::vector<char> bytes = serialize_model(Model::init(ModelSpec::reference(FwPosition::none)));
  bytes[7] = '2';
  EXPECT_THROW(parse_tensors(bytes), CheckpointMismatchError);
}

TEST(Checkpoint, ForeignFileIsFormatError) {
  std::vector<char> bytes = serialize_model(Model::init(ModelSpec::reference(FwPosition::none)));
  bytes[0] = 'X';
  EXPECT_THROW(parse_tensors(bytes), FormatError);
  EXPECT_THROW(parse_tensors({'I', 'F'}), FormatError);
}

TEST(Checkpoint, TruncationAndTrailingBytes) {
  const std::vector<char> bytes = serialize_model(Model::init(ModelSpec::reference(FwPosition::none)));
  EXPECT_THROW(parse_tensors(std::vector<char>(bytes.begin(), bytes.end() - 3)), FormatError);
  std::vector<char> longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(parse_tensors(longer), FormatError);
}

TEST(Checkpoint, MissingOrMisshapenTensors) {
  NamedTensors t = model_tensors(Model::init(ModelSpec::reference(FwPosition::mid)));
  NamedTensors missing = t;
  missing.erase("fw.rotation");
  EXPECT_THROW(model_from_tensors(missing), CheckpointMismatchError);
  NamedTensors misshapen = t;
  misshapen["param.0.weight"] = Tensor({8, 1, 5, 5});
  EXPECT_THROW(model_from_tensors(misshapen), CheckpointMismatchError);
  NamedTensors broken = t;
  broken["spec.layers"].at(3, 1) = 5.0;  // conv2 input channels no longer chain
  EXPECT_THROW(model_from_tensors(broken), CheckpointMismatchError);
}

TEST(RunConfig, LayeringAndValidation) {
  RunConfig cfg;
  EXPECT_EQ(cfg.str("fw_position"), "none");
  cfg.merge_text("# comment\nfw-position = high\nepochs = 3  # trailing\n\n", "test");
  EXPECT_EQ(cfg.str("fw_position"), "high");
  EXPECT_EQ(cfg.integer("epochs"), 3);
  cfg.set("lr", "0.05");
  EXPECT_EQ(cfg.real("lr"), 0.05);
  EXPECT_EQ(cfg.integer_list("lr_milestones"), (std::vector<int>{20, 30}));
  EXPECT_THROW(cfg.set("learning_rate", "1"), ConfigError);
  EXPECT_THROW(cfg.merge_text("epochs 3\n", "test"), ConfigError);
  EXPECT_THROW(cfg.merge_text("bogus = 1\n", "test"), ConfigError);
  cfg.set("epochs", "x");
  EXPECT_THROW(cfg.integer("epochs"), ConfigError);
  cfg.set("seed", "-1");
  EXPECT_THROW(cfg.natural("seed"), ConfigError);
  EXPECT_NE(cfg.resolved_text().find("lr = 0.05\n"), std::string::npos);
}
