#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "oommix/baselines.hpp"
#include "oommix/corpus.hpp"
#include "oommix/oommix.hpp"
#include "oommix/trainer.hpp"

namespace oommix {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat `key=value` settings with dotted keys. Every key has a default;
/// unknown keys are rejected.
class Config {
 public:
  Config() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "1"},
        {"model.layers", "4"},
        {"model.dim", "64"},
        {"model.heads", "4"},
        {"model.max_len", "32"},
        {"model.vocab", "1000"},
        {"model.dropout", "0.1"},
        {"model.ffn_mult", "4"},
        {"model.head_hidden", "0"},
        {"train.lr_encoder", "3e-4"},
        {"train.lr_head", "1e-3"},
        {"train.batch", "12"},
        {"train.warmup", "1000"},
        {"train.eval_every", "200"},
        {"train.patience", "10"},
        {"train.max_steps", "20000"},
        {"train.beta1", "0.9"},
        {"train.beta2", "0.999"},
        {"train.epsilon", "1e-8"},
        {"train.clip", "1.0"},
        {"train.eval_batch", "64"},
        {"oommix.m_g", "1"},
        {"oommix.m_d", "4"},
        {"oommix.e_init", "1"},
        {"oommix.e_adjust", "true"},
        {"oommix.e_window", "50"},
        {"oommix.e_threshold", "0.6"},
        {"oommix.e_factor", "1.5"},
        {"oommix.e_max", "8"},
        {"oommix.ld_reduction", "mean"},
        {"oommix.use_discriminator", "true"},
        {"mix.strategy", "oommix"},
        {"mix.fixed_lambda", "0.5"},
        {"mix.beta_a", "0.1"},
        {"mix.layer", ""},
        {"mix.beta_symmetrize", "false"},
        {"data.source", "synthetic"},
        {"data.train_csv", ""},
        {"data.valid_csv", ""},
        {"data.test_csv", ""},
        {"data.label_column", "0"},
        {"data.text_columns", "1"},
        {"data.train_size", "0"},
        {"data.valid_fraction", "0.1"},
        {"data.eda", "false"},
        {"data.eda_copies", "1"},
        {"data.eda_insert", "0.1"},
        {"data.eda_delete", "0.1"},
        {"data.eda_swap", "0.1"},
        {"synth.classes", "4"},
        {"synth.keywords", "5"},
        {"synth.q", "0.3"},
        {"synth.vocab", "200"},
        {"synth.length", "16"},
        {"synth.train", "2000"},
        {"synth.valid", "400"},
        {"synth.test", "1000"},
        {"synth.noise", "0"},
        {"analysis.split", "valid"},
        {"analysis.pairs", "500"},
        {"analysis.isomap_k", "15"},
        {"analysis.isomap_dim", "3"},
        {"analysis.max_points", "0"},
        {"analysis.bins", "20"},
        {"analysis.pca_target", "0.8"},
        {"sweep.m_g", "1,2,3"},
        {"sweep.m_d", "2,3,4"},
        {"sweep.seeds", "3"},
        {"sweep.allow_equal", "false"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
  }

  /// Parses one `key=value` assignment.
  void assign(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got: " + line);
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  /// Reads a file of assignments; blank lines and `#` comments are skipped.
  void load(std::istream& in, const std::string& origin = "<config>") {
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      try {
        assign(line);
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    load(in, path);
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + s + "'");
    }
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true/false, got '" + s + "'");
  }

  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size()) {
        throw ConfigError(key + ": expected integers, got '" + item + "'");
      }
      out.push_back(v);
    }
    return out;
  }

  /// All settings as `key=value` lines, sorted by key.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | csv
  std::string train_csv, valid_csv, test_csv;
  CsvSchema schema;
  std::size_t train_size = 0;  // 0 keeps every training example
  double valid_fraction = 0.1;
  bool eda = false;
  std::size_t eda_copies = 1;
  EdaConfig eda_cfg;
};

struct AnalysisConfig {
  std::string split = "valid";
  std::size_t pairs = 500;
  std::size_t isomap_k = 15;
  std::size_t isomap_dim = 3;
  std::size_t max_points = 0;  // 0 means every point
  std::size_t bins = 20;
  double pca_target = 0.8;
};

struct SweepConfig {
  std::vector<std::size_t> m_g, m_d;
  std::size_t seeds = 3;
  bool allow_equal = false;
};

/// Typed view of a Config.
struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  MixStrategy mix;
  DataConfig data;
  SynthConfig synth;
  AnalysisConfig analysis;
  SweepConfig sweep;
};

inline RunConfig to_run_config(const Config& c) {
  RunConfig r;
  r.seed = c.count("seed");

  auto& e = r.model.encoder;
  e.layers = c.count("model.layers");
  e.dim = c.count("model.dim");
  e.heads = c.count("model.heads");
  e.max_len = c.count("model.max_len");
  e.vocab = c.count("model.vocab");
  e.dropout = c.real("model.dropout");
  e.ffn_mult = c.count("model.ffn_mult");
  r.model.head_hidden = c.count("model.head_hidden");
  r.model.m_g = c.count("oommix.m_g");
  r.model.m_d = c.count("oommix.m_d");
  const auto& red = c.str("oommix.ld_reduction");
  if (red == "mean") r.model.ld_reduction = LdReduction::Mean;
  else if (red == "sum") r.model.ld_reduction = LdReduction::Sum;
  else throw ConfigError("oommix.ld_reduction: expected mean or sum, got '" + red + "'");

  auto& t = r.train;
  t.lr_encoder = c.real("train.lr_encoder");
  t.lr_head = c.real("train.lr_head");
  t.batch = c.count("train.batch");
  t.warmup_steps = c.count("train.warmup");
  t.eval_every = c.count("train.eval_every");
  t.patience = c.count("train.patience");
  t.max_steps = c.count("train.max_steps");
  t.beta1 = c.real("train.beta1");
  t.beta2 = c.real("train.beta2");
  t.epsilon = c.real("train.epsilon");
  t.clip_norm = c.real("train.clip");
  t.eval_batch = c.count("train.eval_batch");
  t.seed = r.seed;
  t.e_init = c.real("oommix.e_init");
  t.e_adjust = c.flag("oommix.e_adjust");
  t.e_window = c.count("oommix.e_window");
  t.e_threshold = c.real("oommix.e_threshold");
  t.e_factor = c.real("oommix.e_factor");
  t.e_max = c.real("oommix.e_max");

  try {
    r.mix.kind = MixStrategy::parse(c.str("mix.strategy"));
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("mix.strategy: ") + ex.what());
  }
  r.mix.fixed_lambda = c.real("mix.fixed_lambda");
  r.mix.beta_a = c.real("mix.beta_a");
  if (!c.str("mix.layer").empty()) r.mix.layer = c.count("mix.layer");
  r.mix.beta_symmetrize = c.flag("mix.beta_symmetrize");
  r.mix.use_discriminator = c.flag("oommix.use_discriminator");

  auto& d = r.data;
  d.source = c.str("data.source");
  if (d.source != "synthetic" && d.source != "csv") {
    throw ConfigError("data.source: expected synthetic or csv, got '" + d.source + "'");
  }
  d.train_csv = c.str("data.train_csv");
  d.valid_csv = c.str("data.valid_csv");
  d.test_csv = c.str("data.test_csv");
  d.schema.label_column = c.count("data.label_column");
  d.schema.text_columns = c.counts("data.text_columns");
  if (d.schema.text_columns.empty()) throw ConfigError("data.text_columns: empty");
  d.train_size = c.count("data.train_size");
  d.valid_fraction = c.real("data.valid_fraction");
  d.eda = c.flag("data.eda");
  d.eda_copies = c.count("data.eda_copies");
  d.eda_cfg = {c.real("data.eda_insert"), c.real("data.eda_delete"), c.real("data.eda_swap")};

  auto& s = r.synth;
  s.classes = c.count("synth.classes");
  s.keywords = c.count("synth.keywords");
  s.q = c.real("synth.q");
  s.vocab = c.count("synth.vocab");
  s.length = c.count("synth.length");
  s.train = c.count("synth.train");
  s.valid = c.count("synth.valid");
  s.test = c.count("synth.test");
  s.noise = c.real("synth.noise");

  auto& a = r.analysis;
  a.split = c.str("analysis.split");
  if (a.split != "train" && a.split != "valid" && a.split != "test") {
    throw ConfigError("analysis.split: expected train, valid or test");
  }
  a.pairs = c.count("analysis.pairs");
  a.isomap_k = c.count("analysis.isomap_k");
  a.isomap_dim = c.count("analysis.isomap_dim");
  a.max_points = c.count("analysis.max_points");
  a.bins = c.count("analysis.bins");
  a.pca_target = c.real("analysis.pca_target");

  r.sweep.m_g = c.counts("sweep.m_g");
  r.sweep.m_d = c.counts("sweep.m_d");
  r.sweep.seeds = c.count("sweep.seeds");
  r.sweep.allow_equal = c.flag("sweep.allow_equal");

  try {
    r.train.validate();
    r.mix.validate();
    r.synth.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  return r;
}

}  // namespace oommix
