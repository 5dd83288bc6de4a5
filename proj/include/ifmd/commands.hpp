#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ifmd/checkpoint.hpp"
#include "ifmd/data.hpp"
#include "ifmd/diagnostics.hpp"
#include "ifmd/network.hpp"
#include "ifmd/run_config.hpp"

namespace ifmd::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kUsage = 2, kMissingInput = 3, kNumerical = 4, kCheckpointMismatch = 5 };

// Bad invocation that is not a config-syntax problem (unknown layer, no whitening layer, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) { io::write_file_atomic(path, text); }

inline void write_resolved_config(const RunConfig& cfg, const std::string& command) {
  write_text(fs::path(cfg.str("out")) / (command + "_config.txt"), "command = " + command + "\n" + cfg.resolved_text());
}

inline json config_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.values()) j[k] = v;
  return j;
}

inline fs::path checkpoint_path(const RunConfig& cfg) {
  const std::string& c = cfg.str("checkpoint");
  return c.empty() ? fs::path(cfg.str("out")) / "checkpoint.bin" : fs::path(c);
}

// A dataset directory resolves to its test split.
inline fs::path eval_dataset_path(const RunConfig& cfg) {
  const fs::path p = cfg.str("data");
  return fs::is_directory(p) ? p / "test.bin" : p;
}

inline Dataset load_input_dataset(const fs::path& path) {
  if (!fs::exists(path)) throw io::MissingFileError("dataset not found: " + path.string());
  return load_dataset(path);
}

inline void require_compatible(const Model& model, const Dataset& ds) {
  const Shape want{1, ds.height, ds.width};
  if (model.spec.input != want)
    throw DataError("dataset images are " + shape_string(want) + " but the model expects " +
                    shape_string(model.spec.input));
}

inline Model load_model(const fs::path& path) {
  if (!fs::exists(path)) throw io::MissingFileError("checkpoint not found: " + path.string());
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw CheckpointMismatchError(std::string("unreadable checkpoint: ") + e.what());
  }
}

inline SynthConfig synth_config(const RunConfig& cfg) {
  SynthConfig s;
  s.seed = cfg.natural("seed");
  s.amplitude = cfg.real("amplitude");
  s.period = cfg.natural("period");
  s.n_train = cfg.natural("n_train");
  s.n_test = cfg.natural("n_test");
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return s;
}

inline std::string pgm(const std::vector<double>& values, std::size_t h, std::size_t w) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  double lo = values.front(), hi = values.front();
  for (double v : values) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : values) {
    const double g = hi > lo ? 255.0 * (v - lo) / (hi - lo) : 128.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(g))));
  }
  return out;
}

inline std::string matrix_csv(const Tensor& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? "," : "") + num(m.at(i, j));
    out += "\n";
  }
  return out;
}

// Output of `layer` for one batch in features x columns form.
inline Tensor rows_of(const Tensor& t) { return t.rank() == 4 ? channels_to_rows(t) : t; }

}  // namespace detail

// ---- gen-data ---------------------------------------------------------------

struct GenDataResult {
  fs::path train;
  fs::path test;
  fs::path manifest;
  bool degenerate = false;
};

inline GenDataResult cmd_gen_data(const RunConfig& cfg) {
  const SynthConfig sc = detail::synth_config(cfg);
  const fs::path out = cfg.str("out");
  const DatasetPair ds = make_dataset(sc);
  GenDataResult r{out / "train.bin", out / "test.bin", out / "manifest.json", sc.amplitude == 0.0};
  save_dataset(r.train, ds.train);
  save_dataset(r.test, ds.test);
  json m;
  m["format"] = "IFMDDATA";
  m["version"] = kDatasetVersion;
  m["seed"] = sc.seed;
  m["train_seed_stream"] = sc.seed;
  m["test_seed_stream"] = sc.seed + 1;
  m["height"] = sc.height;
  m["width"] = sc.width;
  m["n_train"] = sc.n_train;
  m["n_test"] = sc.n_test;
  m["amplitude"] = sc.amplitude;
  m["period"] = sc.period;
  m["blur_radius"] = sc.blur_radius;
  m["degenerate"] = r.degenerate;
  m["files"] = {"train.bin", "test.bin"};
  detail::write_text(r.manifest, m.dump(2) + "\n");
  detail::write_resolved_config(cfg, "gen-data");
  return r;
}

// ---- train ------------------------------------------------------------------

struct EpochRecord {
  EpochStats stats;
  double test_accuracy = 0.0;
  std::optional<double> orthogonality_error;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::optional<double> final_test_accuracy;
  fs::path checkpoint;
};

inline TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.epochs = static_cast<int>(cfg.integer("epochs"));
  tc.lr = cfg.real("lr");
  tc.momentum = cfg.real("momentum");
  tc.weight_decay = cfg.real("weight_decay");
  tc.lr_milestones = cfg.integer_list("lr_milestones");
  tc.lr_decay = cfg.real("lr_decay");
  tc.batch = cfg.natural("batch");
  tc.seed = cfg.natural("seed");
  try {
    tc.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return tc;
}

inline Model initial_model(const RunConfig& cfg) {
  const auto pos = parse_fw_position(cfg.str("fw_position"));
  if (!pos) throw ConfigError("fw_position must be one of none, low, mid, high");
  WhiteningConfig wc;
  wc.iterations = static_cast<int>(cfg.integer("newton_iters"));
  wc.eps = cfg.real("eps");
  wc.momentum = cfg.real("whitening_momentum");
  try {
    wc.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return Model::init(ModelSpec::reference(*pos, cfg.natural("seed")), wc, cfg.real("alpha"), cfg.real("lambda0"));
}

inline TrainResult cmd_train(const RunConfig& cfg, std::ostream& log) {
  const TrainConfig tc = train_config(cfg);
  Model model = initial_model(cfg);
  const fs::path data = cfg.str("data");
  const Dataset train = detail::load_input_dataset(data / "train.bin");
  const Dataset test = detail::load_input_dataset(data / "test.bin");
  detail::require_compatible(model, train);
  detail::require_compatible(model, test);
  const fs::path out = cfg.str("out");
  detail::write_resolved_config(cfg, "train");

  TrainResult result;
  result.checkpoint = detail::checkpoint_path(cfg);
  std::string csv =
      "epoch,lr,train_loss,train_accuracy,test_accuracy,orthogonality_error,fw_offdiagonal_mean,rejected_searches\n";
  json metrics;
  metrics["config"] = detail::config_json(cfg);
  metrics["epochs"] = json::array();

  std::vector<Tensor> velocity;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    EpochRecord rec;
    rec.stats = train_epoch(model, train, tc, epoch, velocity);
    if (!std::isfinite(rec.stats.train_loss))
      throw NumericalError("epoch " + std::to_string(epoch + 1) + ": non-finite training loss");
    rec.test_accuracy = evaluate(model, test).accuracy;
    if (model.has_fw()) rec.orthogonality_error = orthogonality_error(model.constraint.rotation);
    result.epochs.push_back(rec);

    const EpochStats& s = rec.stats;
    csv += std::to_string(epoch + 1) + "," + num(s.lr) + "," + num(s.train_loss) + "," + num(s.train_accuracy) + "," +
           num(rec.test_accuracy) + "," + (rec.orthogonality_error ? num(*rec.orthogonality_error) : "") + "," +
           (model.has_fw() ? num(s.fw_offdiagonal) : "") + "," + std::to_string(s.rejected_searches) + "\n";
    json e;
    e["epoch"] = epoch + 1;
    e["lr"] = s.lr;
    e["train_loss"] = s.train_loss;
    e["train_accuracy"] = s.train_accuracy;
    e["test_accuracy"] = rec.test_accuracy;
    e["orthogonality_error"] = rec.orthogonality_error ? json(*rec.orthogonality_error) : json(nullptr);
    e["fw_offdiagonal_mean"] = model.has_fw() ? json(s.fw_offdiagonal) : json(nullptr);
    e["rejected_searches"] = s.rejected_searches;
    metrics["epochs"].push_back(e);
    detail::write_text(out / "metrics.csv", csv);
    detail::write_text(out / "metrics.json", metrics.dump(2) + "\n");

    char line[200];
    std::snprintf(line, sizeof line, "epoch %3d  lr %.4g  loss %.6f  train_acc %.4f  test_acc %.4f", epoch + 1, s.lr,
                  s.train_loss, s.train_accuracy, rec.test_accuracy);
    log << line;
    if (rec.orthogonality_error) log << "  |C^T C - I| " << *rec.orthogonality_error;
    log << "\n";
  }

  if (!result.epochs.empty()) {
    result.final_test_accuracy = result.epochs.back().test_accuracy;
  } else if (!model.has_fw()) {
    result.final_test_accuracy = evaluate(model, test).accuracy;
  } else {
    log << "whitening statistics are untrained; skipping evaluation\n";
  }
  metrics["final_test_accuracy"] = result.final_test_accuracy ? json(*result.final_test_accuracy) : json(nullptr);
  detail::write_text(out / "metrics.csv", csv);
  detail::write_text(out / "metrics.json", metrics.dump(2) + "\n");
  save_checkpoint(result.checkpoint, model);
  if (result.final_test_accuracy) log << "final test accuracy " << num(*result.final_test_accuracy) << "\n";
  return result;
}

// ---- eval -------------------------------------------------------------------

struct EvalReport {
  EvalResult result;
  std::string text;
};

inline EvalReport cmd_eval(const RunConfig& cfg) {
  const fs::path ckpt = detail::checkpoint_path(cfg);
  const fs::path data = detail::eval_dataset_path(cfg);
  const Model model = detail::load_model(ckpt);
  const Dataset ds = detail::load_input_dataset(data);
  detail::require_compatible(model, ds);
  EvalReport rep;
  rep.result = evaluate(model, ds);
  const auto& c = rep.result.confusion;
  rep.text = "checkpoint = " + ckpt.string() + "\ndataset = " + data.string() +
             "\nfw_position = " + to_string(model.spec.fw_position) + "\nsamples = " + std::to_string(rep.result.total) +
             "\naccuracy = " + num(rep.result.accuracy) + "\nconfusion (rows true 0/1, cols predicted 0/1)\n" +
             std::to_string(c[0][0]) + "," + std::to_string(c[0][1]) + "\n" + std::to_string(c[1][0]) + "," +
             std::to_string(c[1][1]) + "\n";
  const fs::path out = cfg.str("out");
  detail::write_text(out / "eval_report.txt", rep.text);
  json j;
  j["checkpoint"] = ckpt.string();
  j["dataset"] = data.string();
  j["samples"] = rep.result.total;
  j["accuracy"] = rep.result.accuracy;
  j["confusion"] = {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}};
  detail::write_text(out / "eval_report.json", j.dump(2) + "\n");
  detail::write_resolved_config(cfg, "eval");
  return rep;
}

// ---- export-features ----------------------------------------------------------

struct ExportResult {
  std::string layer;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<fs::path> channel_files;
  fs::path merged;
  fs::path raw;
  Tensor values;  // channels x (height*width)
  double mean_abs_channel_correlation = 0.0;
};

inline std::vector<std::string> exportable_layers(const Model& model) {
  std::vector<std::string> names{"input"};
  for (auto& n : model.spec.layer_names()) names.push_back(n);
  return names;
}

// Per-channel activation maps of one image at a named layer, in evaluation mode.
inline ExportResult export_features(const Model& model, const Dataset& ds, std::size_t index, const std::string& layer) {
  const auto names = exportable_layers(model);
  const auto it = std::find(names.begin(), names.end(), layer);
  if (it == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw UsageError("unknown layer '" + layer + "'; valid layers: " + valid);
  }
  if (index >= ds.size())
    throw UsageError("image index " + std::to_string(index) + " out of range (dataset has " + std::to_string(ds.size()) +
                     ")");
  const std::size_t pos = static_cast<std::size_t>(it - names.begin());
  Tape tape;
  const ParamVars pv = ParamVars::place(tape, model, false);
  const std::size_t idx[] = {index};
  const Tensor images = ds.batch(idx);
  const ForwardPass fp = forward_eval(tape, model, images, pv);
  const Tensor& act = pos == 0 ? images : fp.outputs[pos - 1].value();

  ExportResult r;
  r.layer = layer;
  if (act.rank() == 4) {
    r.channels = act.dim(1), r.height = act.dim(2), r.width = act.dim(3);
    r.values = act.reshaped({r.channels, r.height * r.width});
  } else {
    r.channels = act.dim(0), r.height = 1, r.width = 1;
    r.values = act.reshaped({r.channels, 1});
  }
  r.mean_abs_channel_correlation = mean_abs_channel_correlation(r.values);
  return r;
}

inline ExportResult cmd_export_features(const RunConfig& cfg) {
  const Model model = detail::load_model(detail::checkpoint_path(cfg));
  const Dataset ds = detail::load_input_dataset(detail::eval_dataset_path(cfg));
  detail::require_compatible(model, ds);
  ExportResult r = export_features(model, ds, cfg.natural("index"), cfg.str("layer"));
  const fs::path out = cfg.str("out");
  const std::size_t hw = r.height * r.width;
  std::vector<double> merged(hw, 0.0);
  std::string csv = "channel,row,col,value\n";
  for (std::size_t c = 0; c < r.channels; ++c) {
    std::vector<double> map(r.values.data().begin() + static_cast<std::ptrdiff_t>(c * hw),
                            r.values.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * hw));
    for (std::size_t p = 0; p < hw; ++p) {
      merged[p] += map[p] / static_cast<double>(r.channels);
      csv += std::to_string(c) + "," + std::to_string(p / r.width) + "," + std::to_string(p % r.width) + "," +
             num(map[p]) + "\n";
    }
    char name[64];
    std::snprintf(name, sizeof name, "_ch%03zu.pgm", c);
    r.channel_files.push_back(out / (r.layer + name));
    detail::write_text(r.channel_files.back(), detail::pgm(map, r.height, r.width));
  }
  r.merged = out / (r.layer + "_merged.pgm");
  detail::write_text(r.merged, detail::pgm(merged, r.height, r.width));
  r.raw = out / (r.layer + "_raw.csv");
  detail::write_text(r.raw, csv);
  detail::write_text(out / (r.layer + "_summary.txt"),
                     "layer = " + r.layer + "\nindex = " + cfg.str("index") + "\nchannels = " +
                         std::to_string(r.channels) + "\nheight = " + std::to_string(r.height) + "\nwidth = " +
                         std::to_string(r.width) + "\nmean_abs_channel_correlation = " +
                         num(r.mean_abs_channel_correlation) + "\n");
  detail::write_resolved_config(cfg, "export-features");
  return r;
}

// ---- inspect-whitening --------------------------------------------------------

struct WhiteningReport {
  std::size_t features = 0;
  std::size_t samples = 0;
  Tensor input_covariance;
  Tensor whitening;
  CovarianceSummary output;
  double input_mean_abs_offdiagonal = 0.0;
  std::string text;
};

// Covariance of the whitening layer's input and output over a dataset, in evaluation mode.
inline WhiteningReport inspect_whitening(const Model& model, const Dataset& ds) {
  const auto fw = model.spec.fw_layer();
  if (!fw) throw UsageError("model has no whitening layer (fw_position = none)");
  const std::size_t d = model.spec.layers[*fw].out;
  std::vector<Tensor> ins, outs;
  for_each_eval_batch(model, ds, 250, [&](std::size_t, const ForwardPass& fp) {
    ins.push_back(detail::rows_of(*fw == 0 ? Tensor() : fp.outputs[*fw - 1].value()));
    outs.push_back(detail::rows_of(fp.outputs[*fw].value()));
  });
  auto concat = [d](const std::vector<Tensor>& parts) {
    std::size_t cols = 0;
    for (const auto& p : parts) cols += p.cols();
    Tensor all({d, cols});
    std::size_t off = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < p.cols(); ++j) all.at(i, off + j) = p.at(i, j);
      off += p.cols();
    }
    return all;
  };
  const Tensor in_rows = concat(ins);
  const Tensor out_rows = concat(outs);
  WhiteningReport r;
  r.features = d;
  r.samples = out_rows.cols();
  r.input_covariance = sample_covariance(in_rows);
  r.input_mean_abs_offdiagonal = mean_abs_offdiagonal(r.input_covariance);
  r.whitening = model.whitening.running_whitening;
  r.output = summarize_covariance(out_rows);
  r.text = "metric,value\nfeatures," + std::to_string(r.features) + "\nsamples," + std::to_string(r.samples) +
           "\nmax_abs_deviation_from_identity," + num(r.output.max_abs_identity_gap) + "\nmean_abs_offdiagonal," +
           num(r.output.mean_abs_offdiagonal) + "\nmin_eigenvalue," + num(r.output.min_eigenvalue) +
           "\nmax_eigenvalue," + num(r.output.max_eigenvalue) + "\ninput_mean_abs_offdiagonal," +
           num(r.input_mean_abs_offdiagonal) + "\n";
  return r;
}

inline WhiteningReport cmd_inspect_whitening(const RunConfig& cfg) {
  const Model model = detail::load_model(detail::checkpoint_path(cfg));
  if (!model.has_fw()) throw UsageError("model has no whitening layer (fw_position = none)");
  const Dataset ds = detail::load_input_dataset(detail::eval_dataset_path(cfg));
  detail::require_compatible(model, ds);
  WhiteningReport r = inspect_whitening(model, ds);
  const fs::path out = cfg.str("out");
  detail::write_text(out / "whitening_summary.csv", r.text);
  detail::write_text(out / "whitening_input_covariance.csv", detail::matrix_csv(r.input_covariance));
  detail::write_text(out / "whitening_matrix.csv", detail::matrix_csv(r.whitening));
  detail::write_text(out / "whitening_output_covariance.csv", detail::matrix_csv(r.output.covariance));
  detail::write_resolved_config(cfg, "inspect-whitening");
  return r;
}

// ---- dispatch ---------------------------------------------------------------

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train", "eval", "export-features", "inspect-whitening"};
  return names;
}

// Runs a command and maps failures onto the documented exit codes.
inline int run(const std::string& command, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    if (command == "gen-data") {
      const auto r = cmd_gen_data(cfg);
      out << "wrote " << r.train.string() << " and " << r.test.string() << (r.degenerate ? " (degenerate)" : "") << "\n";
    } else if (command == "train") {
      cmd_train(cfg, out);
    } else if (command == "eval") {
      out << cmd_eval(cfg).text;
    } else if (command == "export-features") {
      const auto r = cmd_export_features(cfg);
      out << "exported " << r.channels << " channel maps of layer " << r.layer << " (" << r.height << "x" << r.width
          << "), mean |channel correlation| " << num(r.mean_abs_channel_correlation) << "\n";
    } else if (command == "inspect-whitening") {
      out << cmd_inspect_whitening(cfg).text;
    } else {
      err << "unknown command '" << command << "'\n";
      return kUsage;
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const io::MissingFileError& e) {
    err << "missing input: " << e.what() << "\n";
    return kMissingInput;
  } catch (const FormatError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kMissingInput;
  } catch (const DataError& e) {
    err << "invalid input: " << e.what() << "\n";
    return kMissingInput;
  } catch (const CheckpointMismatchError& e) {
    err << "checkpoint mismatch: " << e.what() << "\n";
    return kCheckpointMismatch;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const ContractError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace ifmd::cli
