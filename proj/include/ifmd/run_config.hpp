#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ifmd/errors.hpp"
#include "ifmd/io.hpp"

namespace ifmd {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Flat "key = value" configuration with a closed key set. Values are layered:
// built-in defaults, then a config file, then command-line overrides.
class RunConfig {
 public:
  RunConfig() {
    // clang-format off
    values_ = {
        {"seed", "1"},            {"out", "."},              {"data", "data"},
        {"checkpoint", ""},       {"fw_position", "none"},   {"epochs", "40"},
        {"lr", "0.1"},            {"momentum", "0.9"},       {"weight_decay", "0.0005"},
        {"lr_milestones", "20,30"}, {"lr_decay", "0.1"},     {"batch", "64"},
        {"newton_iters", "5"},    {"eps", "1e-05"},          {"whitening_momentum", "0.1"},
        {"alpha", "0.9"},         {"lambda0", "0.1"},        {"amplitude", "0.15"},
        {"period", "2"},          {"n_train", "2000"},       {"n_test", "500"},
        {"index", "0"},           {"layer", "fw"},
    };
    // clang-format on
  }

  bool known(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown configuration key '" + key + "'");
    values_[key] = value;
  }

  // Parses "key = value" lines; '#' starts a comment. Dashes in keys are
  // accepted as underscores so flag spellings work too.
  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      std::string key = trim(t.substr(0, eq));
      for (char& c : key)
        if (c == '-') c = '_';
      try {
        set(key, trim(t.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::vector<char> bytes;
    try {
      bytes = io::read_file(path);
    } catch (const io::MissingFileError&) {
      throw ConfigError("cannot read config file " + path.string());
    }
    merge_text(std::string(bytes.begin(), bytes.end()), path.string());
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  std::int64_t integer(const std::string& key) const {
    const std::string& s = str(key);
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw ConfigError("key '" + key + "' expects an integer, got '" + s + "'");
    return v;
  }

  std::uint64_t natural(const std::string& key) const {
    const std::int64_t v = integer(key);
    if (v < 0) throw ConfigError("key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  std::vector<int> integer_list(const std::string& key) const {
    std::vector<int> out;
    std::istringstream in(str(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      int v = 0;
      auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || ptr != item.data() + item.size())
        throw ConfigError("key '" + key + "' expects comma-separated integers");
      out.push_back(v);
    }
    return out;
  }

  // Every key, sorted, one "key = value" per line.
  std::string resolved_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace ifmd
