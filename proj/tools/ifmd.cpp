// ifmd: synthetic face-manipulation detection with feature whitening.
//
//   ifmd gen-data --seed 1 --out data
//   ifmd train --data data --fw-position high --out runs/fw_h
//   ifmd eval --checkpoint runs/fw_h/checkpoint.bin --data data --out runs/fw_h/eval
//   ifmd export-features --checkpoint ... --data data --index 1 --layer fw --out maps
//   ifmd inspect-whitening --checkpoint ... --data data --out report

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ifmd/commands.hpp"

namespace {

struct Flag {
  const char* name;
  const char* key;
  const char* help;
};

constexpr Flag kFlags[] = {
    {"--seed", "seed", "random seed"},
    {"--out", "out", "output directory"},
    {"--data", "data", "dataset directory (train.bin, test.bin) or dataset file"},
    {"--checkpoint", "checkpoint", "checkpoint path (default <out>/checkpoint.bin)"},
    {"--fw-position", "fw_position", "whitening placement: none, low, mid, high"},
    {"--epochs", "epochs", "training epochs"},
    {"--lr", "lr", "initial learning rate"},
    {"--newton-iters", "newton_iters", "Newton iterations in the whitening layer"},
    {"--alpha", "alpha", "EMA factor for the rotation gradient"},
    {"--amplitude", "amplitude", "checkerboard amplitude of fake images"},
    {"--index", "index", "image index for export-features"},
    {"--layer", "layer", "layer name for export-features"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Face manipulation detection with feature whitening"};
  app.require_subcommand(1);

  std::string config_file;
  std::map<std::string, std::optional<std::string>> overrides;
  for (const auto& name : ifmd::cli::command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_file, "file of 'key = value' lines");
    for (const Flag& f : kFlags) {
      auto& slot = overrides[f.key];
      sub->add_option_function<std::string>(f.name, [&slot](const std::string& v) { slot = v; }, f.help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return ifmd::cli::kUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  ifmd::RunConfig cfg;
  try {
    if (!config_file.empty()) cfg.merge_file(config_file);
    for (const auto& [key, value] : overrides)
      if (value) cfg.set(key, *value);
  } catch (const ifmd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return ifmd::cli::kUsage;
  }
  return ifmd::cli::run(command, cfg, std::cout, std::cerr);
}
