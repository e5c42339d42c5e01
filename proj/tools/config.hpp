#pragma once

// Experiment config files: a small TOML subset. Supported syntax is
// `[table]`, `[[array-of-tables]]`, `key = value` with integers, floats,
// booleans, double-quoted strings and flat arrays of numbers, plus `#`
// comments. Anything else is a parse error with a line number.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "backfire/game.hpp"

namespace backfire::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Scalar = std::variant<std::int64_t, double, bool, std::string, std::vector<double>>;

struct Entry {
  Scalar value;
  int line = 0;
};

struct Table {
  std::string name;
  std::map<std::string, Entry> entries;
  int line = 0;
};

struct Document {
  std::vector<Table> tables;  // "" is the root table
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

inline double parse_number(const std::string& text, int line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) {
    throw ConfigError("line " + std::to_string(line) + ": '" + text + "' is not a number");
  }
  return v;
}

inline Scalar parse_value(const std::string& raw, int line) {
  const std::string text = trim(raw);
  if (text.empty()) throw ConfigError("line " + std::to_string(line) + ": missing value");
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') {
      throw ConfigError("line " + std::to_string(line) + ": unterminated string");
    }
    return text.substr(1, text.size() - 2);
  }
  if (text == "true") return true;
  if (text == "false") return false;
  if (text.front() == '[') {
    if (text.back() != ']') {
      throw ConfigError("line " + std::to_string(line) + ": unterminated array");
    }
    std::vector<double> out;
    std::stringstream ss(text.substr(1, text.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(parse_number(item, line));
    }
    return out;
  }
  const bool integral = text.find_first_of(".eE") == std::string::npos &&
                        text.find("inf") == std::string::npos &&
                        text.find("nan") == std::string::npos;
  if (integral) {
    std::size_t used = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != text.size()) {
      throw ConfigError("line " + std::to_string(line) + ": cannot parse value '" + text + "'");
    }
    return v;
  }
  return parse_number(text, line);
}

}  // namespace detail

inline Document parse_document(std::istream& in) {
  Document doc;
  doc.tables.push_back({"", {}, 0});
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string text = detail::trim(detail::strip_comment(raw));
    if (text.empty()) continue;
    if (text.rfind("[[", 0) == 0) {
      if (text.size() < 4 || text.substr(text.size() - 2) != "]]") {
        throw ConfigError("line " + std::to_string(line) + ": malformed table header");
      }
      doc.tables.push_back({"[" + detail::trim(text.substr(2, text.size() - 4)) + "]", {}, line});
      continue;
    }
    if (text.front() == '[') {
      if (text.back() != ']') {
        throw ConfigError("line " + std::to_string(line) + ": malformed table header");
      }
      const std::string name = detail::trim(text.substr(1, text.size() - 2));
      for (const auto& t : doc.tables) {
        if (t.name == name) {
          throw ConfigError("line " + std::to_string(line) + ": table [" + name +
                            "] defined twice");
        }
      }
      doc.tables.push_back({name, {}, line});
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    }
    const std::string key = detail::trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line) + ": empty key");
    auto& entries = doc.tables.back().entries;
    if (entries.count(key)) {
      throw ConfigError("line " + std::to_string(line) + ": duplicate key '" + key + "'");
    }
    entries.emplace(key, Entry{detail::parse_value(text.substr(eq + 1), line), line});
  }
  return doc;
}

// Typed, consumption-tracking view of one table; leftover keys are errors.
class Reader {
 public:
  Reader(const Table* table, std::string section) : table_(table), section_(std::move(section)) {}

  bool has(const std::string& key) const {
    return table_ != nullptr && table_->entries.count(key) > 0;
  }

  std::string path(const std::string& key) const {
    return section_.empty() ? key : section_ + "." + key;
  }

  double number(const std::string& key, double fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    if (const auto* i = std::get_if<std::int64_t>(&e->value)) return static_cast<double>(*i);
    if (const auto* d = std::get_if<double>(&e->value)) return *d;
    throw ConfigError(path(key) + " must be a number");
  }

  std::uint64_t unsigned_int(const std::string& key, std::uint64_t fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    const auto* i = std::get_if<std::int64_t>(&e->value);
    if (i == nullptr || *i < 0) throw ConfigError(path(key) + " must be a nonnegative integer");
    return static_cast<std::uint64_t>(*i);
  }

  bool boolean(const std::string& key, bool fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    const auto* b = std::get_if<bool>(&e->value);
    if (b == nullptr) throw ConfigError(path(key) + " must be true or false");
    return *b;
  }

  std::string string(const std::string& key, const std::string& fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    const auto* s = std::get_if<std::string>(&e->value);
    if (s == nullptr) throw ConfigError(path(key) + " must be a quoted string");
    return *s;
  }

  std::vector<std::size_t> size_list(const std::string& key,
                                     const std::vector<std::size_t>& fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    const auto* a = std::get_if<std::vector<double>>(&e->value);
    if (a == nullptr) throw ConfigError(path(key) + " must be an array of integers");
    std::vector<std::size_t> out;
    for (double v : *a) {
      if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
        throw ConfigError(path(key) + " entries must be positive integers");
      }
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  void require(const std::string& key, const std::string& why) const {
    if (!has(key)) throw ConfigError("missing required key " + path(key) + " (" + why + ")");
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [key, entry] : table_->entries) {
      if (!used_.count(key)) {
        throw ConfigError("unknown key " + path(key) + " (line " + std::to_string(entry.line) +
                          ")");
      }
    }
  }

 private:
  const Entry* take(const std::string& key) {
    if (!has(key)) return nullptr;
    used_.insert(key);
    return &table_->entries.at(key);
  }

  const Table* table_;
  std::string section_;
  std::set<std::string> used_;
};

namespace detail {

inline void check_range(bool ok, const std::string& key, const std::string& constraint) {
  if (!ok) throw ConfigError(key + " out of range: must be " + constraint);
}

inline PoisonRates read_rates(Reader& r) {
  PoisonRates rates = PoisonRates::uniform(0.2);
  if (r.has("p")) {
    if (r.has("p0") || r.has("p1") || r.has("p2")) {
      throw ConfigError(r.path("p") + " cannot be combined with p0/p1/p2");
    }
    const double p = r.number("p", 0.2);
    check_range(p > 0.0 && p <= 1.0, r.path("p"), "in (0, 1]");
    rates = PoisonRates::uniform(p);
  } else {
    rates.p0 = r.number("p0", 0.2);
    rates.p1 = r.number("p1", 0.2);
    rates.p2 = r.number("p2", 0.2);
    for (const auto& [k, v] : {std::pair{"p0", rates.p0}, {"p1", rates.p1}, {"p2", rates.p2}}) {
      check_range(v > 0.0 && v <= 1.0, r.path(k), "in (0, 1]");
    }
  }
  return rates;
}

inline SimilarityBackend read_backend(Reader& r) {
  const std::string s = r.string("similarity", "mmd");
  try {
    return similarity_backend_from_string(s);
  } catch (const std::invalid_argument&) {
    throw ConfigError(r.path("similarity") +
                      " must be one of mmd, js, spectral_signature, activation_clustering");
  }
}

}  // namespace detail

inline GameConfig config_from_document(const Document& doc) {
  const Table* root = nullptr;
  std::map<std::string, const Table*> sections;
  std::vector<const Table*> attacker_tables;
  for (const auto& t : doc.tables) {
    if (t.name.empty()) {
      root = &t;
    } else if (t.name == "[attackers]") {
      attacker_tables.push_back(&t);
    } else if (t.name == "dataset" || t.name == "model" || t.name == "pool" ||
               t.name == "defense" || t.name == "run") {
      sections[t.name] = &t;
    } else {
      throw ConfigError("unknown section [" + t.name + "] (line " + std::to_string(t.line) + ")");
    }
  }
  if (root != nullptr && !root->entries.empty()) {
    throw ConfigError("key '" + root->entries.begin()->first +
                      "' must live inside a section such as [run]");
  }
  auto section = [&](const std::string& name) {
    const auto it = sections.find(name);
    return Reader(it == sections.end() ? nullptr : it->second, name);
  };

  GameConfig cfg;

  Reader run = section("run");
  run.require("seed", "master seed of the game");
  cfg.seed = run.unsigned_int("seed", 0);
  cfg.name = run.string("name", "");
  cfg.single_reference = run.boolean("single_reference", false);
  cfg.jobs = run.unsigned_int("jobs", 1);
  detail::check_range(cfg.jobs >= 1, run.path("jobs"), ">= 1");
  run.finish();

  Reader ds = section("dataset");
  const std::string kind = ds.string("kind", "synthetic");
  if (kind == "synthetic") {
    cfg.dataset.kind = DatasetKind::synthetic;
  } else if (kind == "mnist-idx") {
    cfg.dataset.kind = DatasetKind::mnist_idx;
    ds.require("images_path", "kind = \"mnist-idx\"");
    ds.require("labels_path", "kind = \"mnist-idx\"");
    cfg.dataset.channels = 1;
    cfg.dataset.height = 28;
    cfg.dataset.width = 28;
  } else {
    throw ConfigError("dataset.kind must be \"synthetic\" or \"mnist-idx\"");
  }
  cfg.dataset.classes = ds.unsigned_int("classes", cfg.dataset.classes);
  detail::check_range(cfg.dataset.classes >= 2, ds.path("classes"), ">= 2");
  cfg.dataset.channels = ds.unsigned_int("channels", cfg.dataset.channels);
  detail::check_range(cfg.dataset.channels >= 1, ds.path("channels"), ">= 1");
  cfg.dataset.height = ds.unsigned_int("height", cfg.dataset.height);
  detail::check_range(cfg.dataset.height >= 8, ds.path("height"), ">= 8");
  cfg.dataset.width = ds.unsigned_int("width", cfg.dataset.width);
  detail::check_range(cfg.dataset.width >= 8, ds.path("width"), ">= 8");
  cfg.dataset.samples_per_class =
      ds.unsigned_int("samples_per_class", cfg.dataset.samples_per_class);
  detail::check_range(cfg.dataset.samples_per_class >= 1, ds.path("samples_per_class"), ">= 1");
  cfg.dataset.noise = ds.number("noise", cfg.dataset.noise);
  detail::check_range(cfg.dataset.noise >= 0.0, ds.path("noise"), ">= 0");
  cfg.dataset.distractors = ds.unsigned_int("distractors", cfg.dataset.distractors);
  cfg.dataset.seed = ds.unsigned_int("seed", cfg.dataset.seed);
  cfg.dataset.images_path = ds.string("images_path", "");
  cfg.dataset.labels_path = ds.string("labels_path", "");
  ds.finish();
  cfg.sync_architecture();

  Reader model = section("model");
  cfg.arch.hidden = model.size_list("hidden", cfg.arch.hidden);
  cfg.arch.conv_filters = model.unsigned_int("conv_filters", 0);
  const std::string act = model.string("activation", "relu");
  if (act == "relu") {
    cfg.arch.activation = Activation::relu;
  } else if (act == "tanh") {
    cfg.arch.activation = Activation::tanh;
  } else {
    throw ConfigError("model.activation must be \"relu\" or \"tanh\"");
  }
  cfg.regimen.epochs = model.unsigned_int("epochs", cfg.regimen.epochs);
  detail::check_range(cfg.regimen.epochs >= 1, model.path("epochs"), ">= 1");
  cfg.regimen.batch_size = model.unsigned_int("batch_size", cfg.regimen.batch_size);
  detail::check_range(cfg.regimen.batch_size >= 1, model.path("batch_size"), ">= 1");
  cfg.regimen.learning_rate = model.number("learning_rate", cfg.regimen.learning_rate);
  detail::check_range(cfg.regimen.learning_rate > 0.0, model.path("learning_rate"), "> 0");
  model.finish();

  Reader pool = section("pool");
  cfg.pool_size = pool.unsigned_int("size", cfg.pool_size);
  cfg.defender_fraction = pool.number("defender_fraction", cfg.defender_fraction);
  detail::check_range(cfg.defender_fraction > 0.0 && cfg.defender_fraction < 1.0,
                      pool.path("defender_fraction"), "in (0, 1)");
  if (pool.has("n_attackers")) {
    if (!attacker_tables.empty()) {
      throw ConfigError("pool.n_attackers cannot be combined with [[attackers]] tables");
    }
    const std::size_t n = pool.unsigned_int("n_attackers", 0);
    const PoisonRates rates = detail::read_rates(pool);
    const std::size_t label = pool.unsigned_int("target_label", 0);
    detail::check_range(label < cfg.dataset.classes, pool.path("target_label"),
                        "< dataset.classes");
    const bool distinct = pool.boolean("distinct_labels", false);
    for (std::size_t i = 0; i < n; ++i) {
      AttackerConfig a;
      a.agent_id = static_cast<AgentId>(i + 1);
      a.rates = rates;
      a.target_label = distinct ? (label + i) % cfg.dataset.classes : label;
      cfg.attackers.push_back(a);
    }
  } else {
    for (const char* k : {"p", "p0", "p1", "p2", "target_label", "distinct_labels"}) {
      if (pool.has(k)) {
        throw ConfigError(pool.path(k) + " is only valid together with pool.n_attackers");
      }
    }
  }
  pool.finish();

  for (std::size_t i = 0; i < attacker_tables.size(); ++i) {
    Reader r(attacker_tables[i], "attackers[" + std::to_string(i) + "]");
    AttackerConfig a;
    a.agent_id = static_cast<AgentId>(r.unsigned_int("id", i + 1));
    detail::check_range(a.agent_id >= 1, r.path("id"), ">= 1");
    a.rates = detail::read_rates(r);
    a.target_label = r.unsigned_int("target_label", 0);
    detail::check_range(a.target_label < cfg.dataset.classes, r.path("target_label"),
                        "< dataset.classes");
    a.min_salience = r.number("min_salience", a.min_salience);
    detail::check_range(a.min_salience >= 0.0, r.path("min_salience"), ">= 0");
    r.finish();
    cfg.attackers.push_back(a);
  }

  Reader def = section("defense");
  const std::string type = def.string("type", "none");
  if (type == "none") {
    cfg.defense = NoDefense{};
  } else if (type == "data_augmentation") {
    DataAugmentation d;
    d.mix_fraction = def.number("mix_fraction", d.mix_fraction);
    detail::check_range(d.mix_fraction >= 0.0 && d.mix_fraction <= 1.0,
                        def.path("mix_fraction"), "in [0, 1]");
    d.alpha = def.number("alpha", d.alpha);
    detail::check_range(d.alpha > 0.0, def.path("alpha"), "> 0");
    cfg.defense = d;
  } else if (type == "agent_augmentation") {
    def.require("n_simulated", "type = \"agent_augmentation\"");
    AgentAugmentation d;
    d.n_simulated = def.unsigned_int("n_simulated", d.n_simulated);
    detail::check_range(d.n_simulated >= 1, def.path("n_simulated"), ">= 1");
    d.p_sim = def.number("p_sim", d.p_sim);
    detail::check_range(d.p_sim > 0.0 && d.p_sim <= 1.0, def.path("p_sim"), "in (0, 1]");
    cfg.defense = d;
  } else if (type == "agent_indexing") {
    AgentIndexing d;
    const std::string mode = def.string("mode", "known");
    if (mode == "known") {
      d.mode = IndexMode::known;
    } else if (mode == "unknown") {
      d.mode = IndexMode::unknown;
    } else {
      throw ConfigError("defense.mode must be \"known\" or \"unknown\"");
    }
    d.similarity = detail::read_backend(def);
    d.bins = def.unsigned_int("bins", d.bins);
    detail::check_range(d.bins >= 2, def.path("bins"), ">= 2");
    if (def.has("bandwidth")) {
      d.bandwidth = def.number("bandwidth", 1.0);
      detail::check_range(*d.bandwidth > 0.0, def.path("bandwidth"), "> 0");
    }
    cfg.defense = d;
  } else {
    throw ConfigError(
        "defense.type must be none, data_augmentation, agent_augmentation or agent_indexing");
  }
  def.finish();

  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline GameConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return config_from_document(parse_document(in));
}

inline GameConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return config_from_document(parse_document(in));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace backfire::cli
