#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ifmd/io.hpp"
#include "ifmd/network.hpp"

namespace ifmd {

// Checkpoint layout: magic "IFMD0001", u32 tensor count, then per tensor
//   u32 name length, name bytes, u32 rank, u64 extents[rank], f64 values (little-endian).
inline constexpr char kCheckpointMagic[] = "IFMD0001";

using NamedTensors = std::map<std::string, Tensor>;

inline std::vector<char> serialize_tensors(const NamedTensors& tensors) {
  io::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.string(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u64(e);
    for (double v : t.data()) w.f64(v);
  }
  return w.buffer();
}

inline NamedTensors parse_tensors(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  const std::string magic = r.bytes(8, "magic");
  if (magic.compare(0, 4, "IFMD") != 0) throw FormatError("not a checkpoint file", 0);
  if (magic != std::string_view(kCheckpointMagic, 8))
    throw CheckpointMismatchError("checkpoint version '" + magic.substr(4) + "' is not supported (expected '" +
                                  std::string(kCheckpointMagic + 4) + "')");
  const std::uint32_t count = r.u32("tensor count");
  NamedTensors out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.string("tensor name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u64("extent");
      n *= e;
    }
    if (n * 8 > r.remaining()) r.fail("tensor '" + name + "' exceeds file length");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64("tensor value");
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) r.fail("trailing bytes after last tensor");
  return out;
}

inline NamedTensors model_tensors(const Model& m) {
  NamedTensors t;
  const auto& layers = m.spec.layers;
  Tensor arch({layers.size(), 5});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    arch.at(i, 0) = static_cast<double>(static_cast<int>(layers[i].kind));
    arch.at(i, 1) = static_cast<double>(layers[i].in);
    arch.at(i, 2) = static_cast<double>(layers[i].out);
    arch.at(i, 3) = static_cast<double>(layers[i].kernel);
    arch.at(i, 4) = static_cast<double>(layers[i].stride);
  }
  t["spec.layers"] = std::move(arch);
  Tensor input({m.spec.input.size()});
  for (std::size_t i = 0; i < m.spec.input.size(); ++i) input[i] = static_cast<double>(m.spec.input[i]);
  t["spec.input"] = std::move(input);
  t["spec.fw_position"] = Tensor::scalar(static_cast<double>(static_cast<int>(m.spec.fw_position)));
  t["spec.seed"] = Tensor::scalar(static_cast<double>(m.spec.seed));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].has_params()) continue;
    t["param." + std::to_string(i) + ".weight"] = m.params[i].weight;
    t["param." + std::to_string(i) + ".bias"] = m.params[i].bias;
  }
  const WhiteningConfig& wc = m.whitening_config;
  t["fw.config"] = Tensor({3}, {static_cast<double>(wc.iterations), wc.eps, wc.momentum});
  if (m.has_fw()) {
    t["fw.running_mean"] = m.whitening.running_mean;
    t["fw.running_whitening"] = m.whitening.running_whitening;
    t["fw.steps"] = Tensor::scalar(static_cast<double>(m.whitening.steps));
    const ConstraintState& c = m.constraint;
    t["fw.rotation"] = c.rotation;
    t["fw.ema_gradient"] = c.ema_gradient;
    t["fw.constraint"] = Tensor({8}, {c.has_gradient ? 1.0 : 0.0, c.alpha, c.lambda0, c.armijo.shrink, c.armijo.slope,
                                      static_cast<double>(c.armijo.max_backtracks), static_cast<double>(c.updates),
                                      static_cast<double>(c.rejected_searches)});
  }
  return t;
}

inline Model model_from_tensors(const NamedTensors& t) {
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = t.find(name);
    if (it == t.end()) throw CheckpointMismatchError("checkpoint lacks tensor '" + name + "'");
    return it->second;
  };
  auto expect_shape = [](const Tensor& x, const Shape& s, const std::string& name) {
    if (x.shape() != s)
      throw CheckpointMismatchError("checkpoint tensor '" + name + "' has shape " + shape_string(x.shape()) +
                                    ", expected " + shape_string(s));
  };
  Model m;
  const Tensor& arch = get("spec.layers");
  if (arch.rank() != 2 || arch.cols() != 5) throw CheckpointMismatchError("malformed layer table");
  for (std::size_t i = 0; i < arch.rows(); ++i) {
    const int kind = static_cast<int>(arch.at(i, 0));
    if (kind < 0 || kind > 5) throw CheckpointMismatchError("unknown layer kind " + std::to_string(kind));
    m.spec.layers.push_back({static_cast<LayerKind>(kind), static_cast<std::size_t>(arch.at(i, 1)),
                             static_cast<std::size_t>(arch.at(i, 2)), static_cast<std::size_t>(arch.at(i, 3)),
                             static_cast<std::size_t>(arch.at(i, 4))});
  }
  const Tensor& input = get("spec.input");
  m.spec.input.clear();
  for (double v : input.data()) m.spec.input.push_back(static_cast<std::size_t>(v));
  const int pos = static_cast<int>(get("spec.fw_position").item());
  if (pos < 0 || pos > 3) throw CheckpointMismatchError("unknown whitening position");
  m.spec.fw_position = static_cast<FwPosition>(pos);
  m.spec.seed = static_cast<std::uint64_t>(get("spec.seed").item());
  try {
    m.spec.layer_shapes();
  } catch (const DimensionError& e) {
    throw CheckpointMismatchError(std::string("checkpoint architecture is inconsistent: ") + e.what());
  }

  m.params.resize(m.spec.layers.size());
  for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
    const LayerSpec& l = m.spec.layers[i];
    if (!l.has_params()) continue;
    const std::string p = "param." + std::to_string(i);
    const Shape ws = l.kind == LayerKind::conv2d ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out, l.in};
    expect_shape(get(p + ".weight"), ws, p + ".weight");
    expect_shape(get(p + ".bias"), Shape{l.out}, p + ".bias");
    m.params[i] = {get(p + ".weight"), get(p + ".bias")};
  }
  const Tensor& wc = get("fw.config");
  expect_shape(wc, Shape{3}, "fw.config");
  m.whitening_config = {static_cast<int>(wc[0]), wc[1], wc[2]};
  if (auto fw = m.spec.fw_layer()) {
    const std::size_t d = m.spec.layers[*fw].out;
    expect_shape(get("fw.running_mean"), Shape{d, 1}, "fw.running_mean");
    expect_shape(get("fw.running_whitening"), Shape{d, d}, "fw.running_whitening");
    expect_shape(get("fw.rotation"), Shape{d, d}, "fw.rotation");
    expect_shape(get("fw.ema_gradient"), Shape{d, d}, "fw.ema_gradient");
    const Tensor& c = get("fw.constraint");
    expect_shape(c, Shape{8}, "fw.constraint");
    m.whitening = {get("fw.running_mean"), get("fw.running_whitening"),
                   static_cast<std::uint64_t>(get("fw.steps").item())};
    m.constraint.rotation = get("fw.rotation");
    m.constraint.ema_gradient = get("fw.ema_gradient");
    m.constraint.has_gradient = c[0] != 0.0;
    m.constraint.alpha = c[1];
    m.constraint.lambda0 = c[2];
    m.constraint.armijo = {c[3], c[4], static_cast<int>(c[5])};
    m.constraint.updates = static_cast<std::uint64_t>(c[6]);
    m.constraint.rejected_searches = static_cast<std::uint64_t>(c[7]);
  }
  return m;
}

inline std::vector<char> serialize_model(const Model& m) { return serialize_tensors(model_tensors(m)); }

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  io::write_file_atomic(path, serialize_model(m));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  return model_from_tensors(parse_tensors(io::read_file(path)));
}

}  // namespace ifmd
