#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ifmd/constraint.hpp"
#include "ifmd/data.hpp"
#include "ifmd/diagnostics.hpp"
#include "ifmd/nn.hpp"
#include "ifmd/random.hpp"
#include "ifmd/tape.hpp"
#include "ifmd/whitening.hpp"

namespace ifmd {

enum class LayerKind : int { conv2d = 0, relu = 1, maxpool = 2, flatten = 3, dense = 4, fw = 5 };

// One layer of a sequential model. Unused fields stay zero.
//   conv2d: in/out channels, kernel, stride (zero padding kernel/2)
//   maxpool: kernel = window
//   dense: in/out features
//   fw: out = whitened feature count
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  static LayerSpec conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride = 1) {
    return {LayerKind::conv2d, cin, cout, k, stride};
  }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0, 1}; }
  static LayerSpec maxpool(std::size_t window = 2) { return {LayerKind::maxpool, 0, 0, window, 1}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0, 1}; }
  static LayerSpec dense(std::size_t din, std::size_t dout) { return {LayerKind::dense, din, dout, 0, 1}; }
  static LayerSpec fw(std::size_t d) { return {LayerKind::fw, d, d, 0, 1}; }

  bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class FwPosition { none, low, mid, high };

inline const char* to_string(FwPosition p) {
  switch (p) {
    case FwPosition::none: return "none";
    case FwPosition::low: return "low";
    case FwPosition::mid: return "mid";
    case FwPosition::high: return "high";
  }
  return "?";
}

inline std::optional<FwPosition> parse_fw_position(std::string_view s) {
  if (s == "none") return FwPosition::none;
  if (s == "low") return FwPosition::low;
  if (s == "mid") return FwPosition::mid;
  if (s == "high") return FwPosition::high;
  return std::nullopt;
}

struct ModelSpec {
  Shape input{1, 32, 32};  // per-sample C x H x W
  std::vector<LayerSpec> layers;
  FwPosition fw_position = FwPosition::none;
  std::uint64_t seed = 1;

  // Three conv(3x3)-relu-maxpool blocks (8, 16, 32 channels), then dense 64 and dense 2.
  // The whitening layer, if any, follows block 1 (low), 2 (mid) or 3 (high).
  static ModelSpec reference(FwPosition position, std::uint64_t seed = 1) {
    ModelSpec s;
    s.fw_position = position;
    s.seed = seed;
    const std::size_t channels[] = {8, 16, 32};
    std::size_t cin = 1;
    for (int block = 0; block < 3; ++block) {
      s.layers.push_back(LayerSpec::conv(cin, channels[block], 3));
      s.layers.push_back(LayerSpec::relu());
      s.layers.push_back(LayerSpec::maxpool(2));
      cin = channels[block];
      if ((position == FwPosition::low && block == 0) || (position == FwPosition::mid && block == 1) ||
          (position == FwPosition::high && block == 2))
        s.layers.push_back(LayerSpec::fw(cin));
    }
    s.layers.push_back(LayerSpec::flatten());
    s.layers.push_back(LayerSpec::dense(32 * 4 * 4, 64));
    s.layers.push_back(LayerSpec::relu());
    s.layers.push_back(LayerSpec::dense(64, 2));
    return s;
  }

  std::optional<std::size_t> fw_layer() const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].kind == LayerKind::fw) return i;
    return std::nullopt;
  }

  // Per-sample output shape of every layer. Throws DimensionError if the chain is broken.
  std::vector<Shape> layer_shapes() const {
    std::vector<Shape> out;
    Shape cur = input;
    std::size_t fw_count = 0;
    auto fail = [&](std::size_t i, const std::string& why) {
      throw DimensionError("layer " + std::to_string(i) + ": " + why + " (input " + shape_string(cur) + ")");
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      switch (l.kind) {
        case LayerKind::conv2d: {
          if (cur.size() != 3 || cur[0] != l.in) fail(i, "conv2d input channels mismatch");
          if (l.kernel == 0 || l.stride == 0 || l.out == 0) fail(i, "conv2d needs positive kernel/stride/channels");
          const std::size_t pad = l.kernel / 2;
          if (cur[1] + 2 * pad < l.kernel || cur[2] + 2 * pad < l.kernel) fail(i, "conv2d kernel exceeds input");
          cur = {l.out, (cur[1] + 2 * pad - l.kernel) / l.stride + 1, (cur[2] + 2 * pad - l.kernel) / l.stride + 1};
          break;
        }
        case LayerKind::relu: break;
        case LayerKind::maxpool:
          if (cur.size() != 3 || l.kernel == 0 || cur[1] < l.kernel || cur[2] < l.kernel) fail(i, "maxpool window");
          cur = {cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
          break;
        case LayerKind::flatten: cur = {shape_size(cur)}; break;
        case LayerKind::dense:
          if (cur.size() != 1 || cur[0] != l.in) fail(i, "dense input features mismatch");
          cur = {l.out};
          break;
        case LayerKind::fw:
          if (++fw_count > 1) fail(i, "at most one whitening layer is allowed");
          if (cur.empty() || cur[0] != l.out || (cur.size() != 1 && cur.size() != 3))
            fail(i, "whitening width must equal the channel/feature count");
          break;
      }
      out.push_back(cur);
    }
    if (out.empty() || out.back().size() != 1) throw DimensionError("model must end in a feature vector (dense layer)");
    return out;
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    int counts[6] = {};
    const char* base[6] = {"conv", "relu", "pool", "flatten", "dense", "fw"};
    for (const LayerSpec& l : layers) {
      const int k = static_cast<int>(l.kind);
      ++counts[k];
      names.push_back((l.kind == LayerKind::fw || l.kind == LayerKind::flatten) ? std::string(base[k])
                                                                                : base[k] + std::to_string(counts[k]));
    }
    return names;
  }
};

struct LayerParams {
  Tensor weight;
  Tensor bias;
};

struct Model {
  ModelSpec spec;
  std::vector<LayerParams> params;  // one slot per layer; empty tensors for parameter-free layers
  WhiteningConfig whitening_config;
  WhiteningState whitening;
  ConstraintState constraint;

  bool has_fw() const { return spec.fw_layer().has_value(); }

  // Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static Model init(ModelSpec spec, WhiteningConfig wcfg = {}, double alpha = 0.9, double lambda0 = 0.1) {
    wcfg.validate();
    spec.layer_shapes();
    Model m;
    m.whitening_config = wcfg;
    m.params.resize(spec.layers.size());
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const LayerSpec& l = spec.layers[i];
      if (!l.has_params()) continue;
      CounterRng rng(spec.seed, 1000 + i);
      const std::size_t fan_in = l.kind == LayerKind::conv2d ? l.in * l.kernel * l.kernel : l.in;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Shape ws = l.kind == LayerKind::conv2d ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out, l.in};
      Tensor w(ws);
      for (double& v : w.mutable_data()) v = rng.uniform(-bound, bound);
      Tensor b({l.out});
      for (double& v : b.mutable_data()) v = rng.uniform(-bound, bound);
      m.params[i] = {std::move(w), std::move(b)};
    }
    if (auto fw = spec.fw_layer()) {
      const std::size_t d = spec.layers[*fw].out;
      m.whitening = WhiteningState::identity(d);
      m.constraint = ConstraintState::identity(d, alpha, lambda0);
    }
    m.spec = std::move(spec);
    return m;
  }

  // Trainable tensors updated by SGD (the rotation is excluded).
  std::vector<Tensor*> sgd_parameters() {
    std::vector<Tensor*> out;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (spec.layers[i].has_params()) out.push_back(&params[i].weight), out.push_back(&params[i].bias);
    return out;
  }
};

// ---- forward passes ---------------------------------------------------------

// Parameters placed on a tape, either as leaves (training) or constants.
struct ParamVars {
  std::vector<Var> weight;
  std::vector<Var> bias;
  std::optional<Var> rotation;

  static ParamVars place(Tape& tape, const Model& model, bool track) {
    ParamVars pv;
    auto put = [&](const Tensor& t) { return track ? tape.leaf(t) : tape.constant(t); };
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      if (model.spec.layers[i].has_params()) {
        pv.weight.push_back(put(model.params[i].weight));
        pv.bias.push_back(put(model.params[i].bias));
      } else {
        pv.weight.emplace_back();
        pv.bias.emplace_back();
      }
    }
    if (model.has_fw()) pv.rotation = put(model.constraint.rotation);
    return pv;
  }
};

struct ForwardPass {
  std::vector<Var> outputs;  // batched output of every layer
  Var logits;                // classes x batch
  // Training mode only: decorrelated features (rows form) entering the rotation,
  // plus the batched shape at the whitening layer.
  std::optional<Tensor> decorrelated;
  Shape fw_shape;
};

namespace detail {

// Whitening acts on rows = features, columns = samples.
inline Var to_rows(const Var& x) { return x.shape().size() == 4 ? channels_to_rows(x) : x; }
inline Var from_rows(const Var& z, const Shape& like) {
  return like.size() == 4 ? rows_to_channels(z, like[0], like[2], like[3]) : z;
}

using FwHandler = std::function<Var(const Var& input)>;

inline Var apply_layer(const Model& model, std::size_t i, const Var& x, const ParamVars& pv, const FwHandler& fw) {
  const LayerSpec& l = model.spec.layers[i];
  switch (l.kind) {
    case LayerKind::conv2d: return conv2d(x, pv.weight[i], pv.bias[i], l.stride, l.kernel / 2);
    case LayerKind::relu: return relu(x);
    case LayerKind::maxpool: return maxpool(x, l.kernel);
    case LayerKind::flatten: return flatten(x);
    case LayerKind::dense: return dense(x, pv.weight[i], pv.bias[i]);
    case LayerKind::fw: return fw(x);
  }
  throw ContractError("unknown layer kind");
}

inline void check_images(const Model& model, const Tensor& images) {
  const Shape& s = images.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != model.spec.input)
    throw DimensionError("model expects N x " + shape_string(model.spec.input) + " images, got " + shape_string(s));
}

}  // namespace detail

// Training-mode forward: whitening uses batch statistics and updates the running state.
inline ForwardPass forward_train(Tape& tape, Model& model, const Tensor& images, const ParamVars& pv) {
  detail::check_images(model, images);
  ForwardPass fp;
  detail::FwHandler fw = [&](const Var& x) {
    DecorrelationPass pass = fw_forward_train_pass(detail::to_rows(x), model.whitening, model.whitening_config);
    fp.decorrelated = pass.output.value();
    fp.fw_shape = x.shape();
    return detail::from_rows(apply_rotation(pass.output, *pv.rotation), x.shape());
  };
  Var x = tape.constant(images);
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    x = detail::apply_layer(model, i, x, pv, fw);
    fp.outputs.push_back(x);
  }
  fp.logits = x;
  return fp;
}

// Evaluation-mode forward: whitening uses running statistics; nothing is mutated.
inline ForwardPass forward_eval(Tape& tape, const Model& model, const Tensor& images, const ParamVars& pv) {
  detail::check_images(model, images);
  ForwardPass fp;
  detail::FwHandler fw = [&](const Var& x) {
    const Tensor rows = x.shape().size() == 4 ? channels_to_rows(x.value()) : x.value();
    const Tensor rotated = apply_rotation(fw_forward_eval(rows, model.whitening), pv.rotation->value());
    const Shape& s = x.shape();
    return tape.constant(s.size() == 4 ? rows_to_channels(rotated, s[0], s[2], s[3]) : rotated);
  };
  Var x = tape.constant(images);
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    x = detail::apply_layer(model, i, x, pv, fw);
    fp.outputs.push_back(x);
  }
  fp.logits = x;
  return fp;
}

// Batch loss as a function of the rotation alone, holding the decorrelated
// features and all other parameters fixed. Used by the curvilinear search.
inline double rotation_loss(const Model& model, const Tensor& decorrelated, const Shape& fw_shape,
                            std::span<const int> labels, const Tensor& rotation) {
  const std::size_t fw = *model.spec.fw_layer();
  Tape tape;
  const ParamVars pv = ParamVars::place(tape, model, false);
  const Tensor rotated = apply_rotation(decorrelated, rotation);
  Var x = tape.constant(fw_shape.size() == 4 ? rows_to_channels(rotated, fw_shape[0], fw_shape[2], fw_shape[3])
                                             : rotated);
  detail::FwHandler no_fw = [](const Var&) -> Var { throw ContractError("second whitening layer"); };
  for (std::size_t i = fw + 1; i < model.spec.layers.size(); ++i) x = detail::apply_layer(model, i, x, pv, no_fw);
  return softmax_cross_entropy(x, labels).value()[0];
}

inline std::vector<int> predictions(const Tensor& logits) {
  const std::size_t k = logits.rows(), m = logits.cols();
  std::vector<int> pred(m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i)
      if (logits[i * m + j] > logits[best * m + j]) best = i;
    pred[j] = static_cast<int>(best);
  }
  return pred;
}

// ---- optimization -----------------------------------------------------------

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// v <- momentum v + g + weight_decay p;  p <- p - lr v.
inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity,
                     const SgdConfig& cfg) {
  if (grads.size() != params.size()) throw DimensionError("sgd_step: parameter/gradient count mismatch");
  if (velocity.empty())
    for (const Tensor* p : params) velocity.emplace_back(p->shape());
  if (velocity.size() != params.size()) throw DimensionError("sgd_step: velocity count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    require_same_shape(p, grads[k], "sgd_step");
    require_same_shape(p, velocity[k], "sgd_step");
    auto pd = p.mutable_data();
    auto vd = velocity[k].mutable_data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      vd[i] = cfg.momentum * vd[i] + grads[k][i] + cfg.weight_decay * pd[i];
      pd[i] -= cfg.lr * vd[i];
    }
  }
}

struct TrainConfig {
  int epochs = 40;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones{20, 30};
  double lr_decay = 0.1;
  std::size_t batch = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 0) throw ContractError("train: epochs must be >= 0");
    if (!(lr > 0.0) || !(momentum >= 0.0) || !(weight_decay >= 0.0) || !(lr_decay > 0.0))
      throw ContractError("train: lr, lr_decay must be positive; momentum, weight decay non-negative");
    if (batch < 2) throw ContractError("train: batch must be >= 2");
  }

  double lr_at(int epoch) const {
    double r = lr;
    for (int m : lr_milestones)
      if (epoch >= m) r *= lr_decay;
    return r;
  }
};

struct StepStats {
  double loss = 0.0;
  std::size_t correct = 0;
  double fw_offdiagonal = 0.0;  // mean |off-diagonal| of the post-rotation batch covariance
  SearchResult search;
};

inline StepStats train_step(Model& model, const Tensor& images, std::span<const int> labels, const SgdConfig& sgd,
                            std::vector<Tensor>& velocity) {
  Tape tape;
  const ParamVars pv = ParamVars::place(tape, model, true);
  const ForwardPass fp = forward_train(tape, model, images, pv);
  Var loss = softmax_cross_entropy(fp.logits, labels);
  const Gradients grads = tape.backward(loss);

  StepStats st;
  st.loss = loss.value()[0];
  const auto pred = predictions(fp.logits.value());
  for (std::size_t j = 0; j < pred.size(); ++j) st.correct += pred[j] == labels[j];

  if (model.has_fw()) {
    const Tensor rotated = apply_rotation(*fp.decorrelated, model.constraint.rotation);
    st.fw_offdiagonal = mean_abs_offdiagonal(sample_covariance(rotated));
    const Tensor decorrelated = *fp.decorrelated;
    const Shape fw_shape = fp.fw_shape;
    LossProbe probe = [&](const Tensor& c) { return rotation_loss(model, decorrelated, fw_shape, labels, c); };
    st.search = constraint_update(model.constraint, grads[*pv.rotation], probe, st.loss);
  }

  std::vector<Tensor> g;
  for (std::size_t i = 0; i < model.params.size(); ++i)
    if (model.spec.layers[i].has_params()) g.push_back(grads[pv.weight[i]]), g.push_back(grads[pv.bias[i]]);
  sgd_step(model.sgd_parameters(), g, velocity, sgd);
  return st;
}

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double fw_offdiagonal = 0.0;
  std::uint64_t rejected_searches = 0;
};

// Deterministic sample order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng(seed, 0x0e90c000ULL + static_cast<std::uint64_t>(epoch));
  shuffle(std::span<std::size_t>(order), rng);
  return order;
}

inline EpochStats train_epoch(Model& model, const Dataset& data, const TrainConfig& cfg, int epoch,
                              std::vector<Tensor>& velocity) {
  if (data.size() == 0) throw DataError("train_epoch: empty dataset");
  const SgdConfig sgd{cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay};
  const auto order = epoch_order(data.size(), cfg.seed, epoch);
  const std::uint64_t rejected_before = model.constraint.rejected_searches;
  EpochStats es;
  es.epoch = epoch;
  es.lr = sgd.lr;
  std::size_t correct = 0, batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::size_t end = std::min(order.size(), start + cfg.batch);
    if (end - start < 2) break;  // batch statistics need two samples
    std::span<const std::size_t> idx(order.data() + start, end - start);
    const Tensor images = data.batch(idx);
    const std::vector<int> labels = data.batch_labels(idx);
    StepStats st;
    try {
      st = train_step(model, images, labels, sgd, velocity);
    } catch (const NumericalError& e) {
      throw NumericalError("epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(batches + 1) + ": " + e.what());
    }
    es.train_loss += st.loss * static_cast<double>(idx.size());
    es.fw_offdiagonal += st.fw_offdiagonal;
    correct += st.correct;
    ++batches;
  }
  const std::size_t seen = std::min(order.size(), batches * cfg.batch);
  es.train_loss /= static_cast<double>(seen);
  es.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  es.fw_offdiagonal = batches ? es.fw_offdiagonal / static_cast<double>(batches) : 0.0;
  es.rejected_searches = model.constraint.rejected_searches - rejected_before;
  return es;
}

struct EvalResult {
  double accuracy = 0.0;
  std::size_t confusion[2][2] = {};  // [true label][predicted label]
  std::size_t total = 0;
};

// Runs `fn(first_index, forward_pass)` over the dataset in fixed-size eval batches.
template <typename Fn>
void for_each_eval_batch(const Model& model, const Dataset& data, std::size_t batch, Fn&& fn) {
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    const ParamVars pv = ParamVars::place(tape, model, false);
    const ForwardPass fp = forward_eval(tape, model, data.batch(idx), pv);
    fn(start, fp);
  }
}

inline EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch = 250) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  EvalResult r;
  for_each_eval_batch(model, data, batch, [&](std::size_t first, const ForwardPass& fp) {
    const auto pred = predictions(fp.logits.value());
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const int y = data.labels[first + j];
      if (y < 0 || y > 1 || pred[j] < 0 || pred[j] > 1) throw DataError("evaluate: binary labels expected");
      ++r.confusion[y][pred[j]];
    }
  });
  r.total = data.size();
  r.accuracy = static_cast<double>(r.confusion[0][0] + r.confusion[1][1]) / static_cast<double>(r.total);
  return r;
}

}  // namespace ifmd
