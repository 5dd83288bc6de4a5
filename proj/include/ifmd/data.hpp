#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ifmd/errors.hpp"
#include "ifmd/io.hpp"
#include "ifmd/random.hpp"
#include "ifmd/tensor.hpp"

namespace ifmd {

// Synthetic real/fake task: "real" images are box-blurred uniform noise,
// "fake" images add a periodic checkerboard like the one left by learned upsampling.
struct SynthConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::uint64_t seed = 1;
  double amplitude = 0.15;
  std::size_t period = 2;
  std::size_t blur_radius = 2;

  void validate() const {
    if (height == 0 || width == 0) throw ContractError("synth: image extents must be positive");
    if (!(amplitude >= 0.0)) throw ContractError("synth: amplitude must be >= 0");
    if (period < 2) throw ContractError("synth: period must be >= 2");
    if (n_train % 2 || n_test % 2) throw ContractError("synth: sample counts must be even for exact class balance");
  }
};

struct Sample {
  std::vector<double> image;  // height x width, row-major, in [0, 1]
  int label = 0;              // 0 real, 1 fake
};

// Box blur (radius r, separable, valid region) of uniform noise, min-max normalized to [0, 1].
inline Sample gen_real(CounterRng& rng, const SynthConfig& cfg) {
  const std::size_t r = cfg.blur_radius, h = cfg.height, w = cfg.width;
  const std::size_t nh = h + 2 * r, nw = w + 2 * r, taps = 2 * r + 1;
  std::vector<double> noise(nh * nw);
  for (double& v : noise) v = rng.uniform();

  std::vector<double> horiz(nh * w);
  for (std::size_t y = 0; y < nh; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < taps; ++k) s += noise[y * nw + x + k];
      horiz[y * w + x] = s / static_cast<double>(taps);
    }
  Sample out{std::vector<double>(h * w), 0};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < taps; ++k) s += horiz[(y + k) * w + x];
      out.image[y * w + x] = s / static_cast<double>(taps);
    }
  const auto [lo, hi] = std::minmax_element(out.image.begin(), out.image.end());
  const double mn = *lo, range = *hi - *lo;
  for (double& v : out.image) v = range > 0.0 ? (v - mn) / range : 0.0;
  return out;
}

// +1/-1 checkerboard whose pattern repeats every `period` pixels in both axes.
inline double checkerboard(std::size_t y, std::size_t x, std::size_t period) {
  const std::size_t cell = std::max<std::size_t>(1, period / 2);
  return ((y / cell + x / cell) % 2 == 0) ? 1.0 : -1.0;
}

inline Sample gen_fake(CounterRng& rng, double amplitude, std::size_t period, const SynthConfig& cfg) {
  Sample s = gen_real(rng, cfg);
  s.label = 1;
  for (std::size_t y = 0; y < cfg.height; ++y)
    for (std::size_t x = 0; x < cfg.width; ++x) {
      double& v = s.image[y * cfg.width + x];
      v = std::clamp(v + amplitude * checkerboard(y, x, period), 0.0, 1.0);
    }
  return s;
}

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // count x height x width
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t pixels_per_image() const noexcept { return height * width; }

  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * pixels_per_image(), pixels_per_image());
  }

  void push(const Sample& s) {
    pixels.insert(pixels.end(), s.image.begin(), s.image.end());
    labels.push_back(static_cast<std::uint8_t>(s.label));
  }

  // Images at `indices` as an N x 1 x H x W tensor.
  Tensor batch(std::span<const std::size_t> indices) const {
    Tensor t({indices.size(), 1, height, width});
    auto out = t.mutable_data();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto img = image(indices[b]);
      std::copy(img.begin(), img.end(), out.begin() + static_cast<std::ptrdiff_t>(b * pixels_per_image()));
    }
    return t;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> y(indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) y[b] = labels[indices[b]];
    return y;
  }
};

// Sample i of a split is drawn from stream (split_seed, i); even i are real, odd i fake.
inline Dataset make_split(const SynthConfig& cfg, std::uint64_t split_seed, std::size_t count) {
  Dataset ds{cfg.height, cfg.width, {}, {}};
  ds.pixels.reserve(count * cfg.height * cfg.width);
  for (std::size_t i = 0; i < count; ++i) {
    CounterRng rng(split_seed, i);
    ds.push(i % 2 == 0 ? gen_real(rng, cfg) : gen_fake(rng, cfg.amplitude, cfg.period, cfg));
  }
  return ds;
}

struct DatasetPair {
  Dataset train;
  Dataset test;
};

inline DatasetPair make_dataset(const SynthConfig& cfg) {
  cfg.validate();
  return {make_split(cfg, cfg.seed, cfg.n_train), make_split(cfg, cfg.seed + 1, cfg.n_test)};
}

inline constexpr char kDatasetMagic[] = "IFMDDATA";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<char> serialize_dataset(const Dataset& ds) {
  io::Writer w;
  w.bytes(std::string_view(kDatasetMagic, 8));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u8(ds.labels[i]);
    for (double v : ds.image(i)) w.f64(v);
  }
  return w.buffer();
}

inline Dataset parse_dataset(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  if (r.bytes(8, "magic") != std::string_view(kDatasetMagic, 8)) throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kDatasetVersion) throw FormatError("unsupported dataset version", version_at);
  Dataset ds;
  const std::uint32_t count = r.u32("count");
  ds.height = r.u32("height");
  ds.width = r.u32("width");
  const std::size_t record = 1 + 8 * ds.height * ds.width;
  if (r.remaining() != static_cast<std::size_t>(count) * record)
    r.fail("dataset payload length " + std::to_string(r.remaining()) + " does not match " + std::to_string(count) +
           " samples of " + std::to_string(ds.height) + "x" + std::to_string(ds.width));
  ds.labels.reserve(count);
  ds.pixels.reserve(static_cast<std::size_t>(count) * ds.height * ds.width);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const std::uint8_t label = r.u8("label");
    if (label > 1) throw FormatError("label byte " + std::to_string(label) + " is not 0 or 1", at);
    ds.labels.push_back(label);
    for (std::size_t p = 0; p < ds.height * ds.width; ++p) ds.pixels.push_back(r.f64("pixel"));
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file_atomic(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) { return parse_dataset(io::read_file(path)); }

}  // namespace ifmd
