#pragma once

// Run manifests (JSON), the results CSV, and the sweep driver.

#include <atomic>
#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "backfire/game.hpp"

namespace backfire::cli {

using nlohmann::json;

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "run_id",        "seed",       "defense",     "n_attackers", "attacker_id",
      "poison_rate",   "trigger_label", "asr",      "robustness_acc", "std_acc",
      "mean_asr",      "std_asr",    "runtime_s"};
  return cols;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline json rates_json(const PoisonRates& r) { return {{"p0", r.p0}, {"p1", r.p1}, {"p2", r.p2}}; }

inline json defense_json(const DefenseConfig& d) {
  json j{{"type", defense_name(d)}};
  if (const auto* a = std::get_if<DataAugmentation>(&d)) {
    j["mix_fraction"] = a->mix_fraction;
    j["alpha"] = a->alpha;
  } else if (const auto* g = std::get_if<AgentAugmentation>(&d)) {
    j["n_simulated"] = g->n_simulated;
    j["p_sim"] = g->p_sim;
  } else if (const auto* i = std::get_if<AgentIndexing>(&d)) {
    j["type"] = "agent_indexing";
    j["mode"] = i->mode == IndexMode::known ? "known" : "unknown";
    j["similarity"] = std::string(to_string(i->similarity));
    j["bins"] = i->bins;
    j["bandwidth"] = i->bandwidth ? json(*i->bandwidth) : json(nullptr);
  }
  return j;
}

// Everything that can change a result; the thread count cannot, so it is left
// out of the digest.
inline json config_json(const GameConfig& cfg) {
  const auto& ds = cfg.dataset;
  json dataset{{"kind", ds.kind == DatasetKind::synthetic ? "synthetic" : "mnist-idx"},
               {"classes", ds.classes},
               {"channels", ds.channels},
               {"height", ds.height},
               {"width", ds.width},
               {"samples_per_class", ds.samples_per_class},
               {"noise", ds.noise},
               {"distractors", ds.distractors},
               {"seed", ds.seed},
               {"images_path", ds.images_path},
               {"labels_path", ds.labels_path}};
  json model{{"hidden", cfg.arch.hidden},
             {"conv_filters", cfg.arch.conv_filters},
             {"activation", cfg.arch.activation == Activation::relu ? "relu" : "tanh"},
             {"epochs", cfg.regimen.epochs},
             {"batch_size", cfg.regimen.batch_size},
             {"learning_rate", cfg.regimen.learning_rate}};
  json attackers = json::array();
  for (const auto& a : cfg.attackers) {
    attackers.push_back({{"id", a.agent_id},
                         {"rates", rates_json(a.rates)},
                         {"target_label", a.target_label},
                         {"min_salience", a.min_salience}});
  }
  return {{"name", cfg.name},
          {"seed", cfg.seed},
          {"dataset", dataset},
          {"model", model},
          {"pool", {{"size", cfg.pool_size}, {"defender_fraction", cfg.defender_fraction}}},
          {"attackers", attackers},
          {"defense", defense_json(cfg.defense)},
          {"single_reference", cfg.single_reference}};
}

inline std::string run_id(const GameConfig& cfg) {
  return "s" + std::to_string(cfg.seed) + "-" + hex64(tag_hash(config_json(cfg).dump()));
}

inline json similarity_json(const SimilarityReport& r) {
  json scores = json::object();
  for (const auto& [id, s] : r.scores) scores[std::to_string(id)] = s;
  return {{"backend", r.backend},
          {"scores", scores},
          {"selected", r.selected},
          {"fallback_to_full", r.fallback_to_full},
          {"warning", r.warning}};
}

inline json result_json(const GameResult& res) {
  json attackers = json::array();
  for (const auto& a : res.attackers) {
    json j{{"agent_id", a.agent_id},
           {"rates", rates_json(a.rates)},
           {"target_label", a.target_label},
           {"pattern_hash", hex64(a.pattern_hash)},
           {"asr", a.eval.asr},
           {"n_eval", a.eval.n_eval},
           {"robustness_acc", a.eval.robustness_acc}};
    j["single_reference_asr"] =
        a.eval.single_reference_asr ? json(*a.eval.single_reference_asr) : json(nullptr);
    j["excluded_model_std_acc"] =
        a.excluded_model_std_acc ? json(*a.excluded_model_std_acc) : json(nullptr);
    j["similarity"] = a.routing ? similarity_json(*a.routing) : json(nullptr);
    if (a.divergence) {
      j["divergence"] = {{"label", a.divergence->label},
                         {"value", a.divergence->divergence},
                         {"backend", a.divergence->backend}};
    }
    attackers.push_back(j);
  }
  json sims = json::array();
  for (auto h : res.simulated_pattern_hashes) sims.push_back(hex64(h));
  json owners = json::object();
  for (const auto& [excluded, hist] : res.ensemble_training_owners) {
    json h = json::object();
    for (const auto& [owner, count] : hist) h[std::to_string(owner)] = count;
    owners[std::to_string(excluded)] = h;
  }
  json out{{"defense", res.defense},
           {"seed", res.seed},
           {"std_acc", res.std_acc},
           {"attackers", attackers},
           {"simulated_pattern_hashes", sims},
           {"ensemble_training_owners", owners},
           {"epoch_loss", res.epoch_loss},
           {"runtime_s", res.runtime_s}};
  if (res.asr_summary) {
    out["mean_asr"] = res.asr_summary->mean;
    out["std_asr"] = res.asr_summary->std;
  }
  return out;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string poison_rate_field(const PoisonRates& r) {
  if (r.is_scalar()) return format_double(r.p0);
  return format_double(r.p0) + "/" + format_double(r.p1) + "/" + format_double(r.p2);
}

using CsvRow = std::vector<std::string>;

// One row per attacker, then the defender row (attacker_id -1).
inline std::vector<CsvRow> csv_rows(const std::string& id, const GameConfig& cfg,
                                    const GameResult& res) {
  const std::string mean = res.asr_summary ? format_double(res.asr_summary->mean) : "";
  const std::string sd = res.asr_summary ? format_double(res.asr_summary->std) : "";
  const std::string common_acc = format_double(res.std_acc);
  const std::string runtime = format_double(res.runtime_s);
  std::vector<CsvRow> rows;
  for (const auto& a : res.attackers) {
    rows.push_back({id, std::to_string(cfg.seed), res.defense,
                    std::to_string(cfg.attackers.size()), std::to_string(a.agent_id),
                    poison_rate_field(a.rates), std::to_string(a.target_label),
                    format_double(a.eval.asr), format_double(a.eval.robustness_acc), common_acc,
                    mean, sd, runtime});
  }
  rows.push_back({id, std::to_string(cfg.seed), res.defense, std::to_string(cfg.attackers.size()),
                  "-1", "", "", "", "", common_acc, mean, sd, runtime});
  return rows;
}

inline std::string csv_join(const CsvRow& row) {
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    out += row[i];
  }
  return out;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << csv_join(csv_columns()) << '\n';
  for (const auto& r : rows) out << csv_join(r) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<CsvRow> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw std::invalid_argument("CSV has no column '" + name + "'");
  }
};

inline CsvRow csv_split(const std::string& line) {
  CsvRow out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
  t.header = csv_split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = csv_split(line);
    if (row.size() != t.header.size()) {
      throw std::runtime_error(path.string() + ": row has " + std::to_string(row.size()) +
                               " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct RunOutcome {
  std::string run_id;
  GameConfig config;
  std::optional<GameResult> result;
  std::string error;
};

struct SweepOutcome {
  std::vector<RunOutcome> runs;
  bool all_ok() const {
    for (const auto& r : runs) {
      if (!r.result) return false;
    }
    return true;
  }
};

inline json manifest_json(const RunOutcome& run, const std::string& started,
                          const std::string& finished) {
  json j{{"run_id", run.run_id},
         {"config", config_json(run.config)},
         {"started_at", started},
         {"finished_at", finished}};
  if (run.result) {
    j["result"] = result_json(*run.result);
  } else {
    j["error"] = run.error;
  }
  return j;
}

// Runs every config, at most `jobs` at a time. Each run writes its own
// manifest under out_dir/runs; results.csv is written once at the end in
// config order. Failures are recorded, not thrown.
inline SweepOutcome run_and_persist(const std::vector<GameConfig>& configs,
                                    const std::filesystem::path& out_dir, std::size_t jobs = 1,
                                    std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "runs");
  SweepOutcome sweep;
  sweep.runs.resize(configs.size());
  for (std::size_t i = 0; i < configs.size(); ++i) {
    sweep.runs[i].config = configs[i];
    sweep.runs[i].run_id = run_id(configs[i]);
  }
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      RunOutcome& run = sweep.runs[i];
      const std::string started = utc_timestamp(std::chrono::system_clock::now());
      try {
        run.result = run_game(run.config);
      } catch (const std::exception& e) {
        run.error = e.what();
      }
      const std::string finished = utc_timestamp(std::chrono::system_clock::now());
      const fs::path path = out_dir / "runs" / (run.run_id + ".json");
      std::ofstream out(path);
      out << manifest_json(run, started, finished).dump(2) << '\n';
      if (!out) {
        run.result.reset();
        run.error = "cannot write manifest " + path.string();
      }
      if (log != nullptr) {
        std::lock_guard<std::mutex> lock(log_mu);
        *log << "[" << (i + 1) << "/" << configs.size() << "] " << run.run_id << " "
             << run.config.name << ": ";
        if (run.result) {
          *log << "std_acc " << format_double(run.result->std_acc);
          if (run.result->asr_summary) {
            *log << " mean_asr " << format_double(run.result->asr_summary->mean);
          }
        } else {
          *log << "FAILED " << run.error;
        }
        *log << '\n';
      }
    }
  };
  const std::size_t width = std::max<std::size_t>(1, std::min(jobs, configs.size()));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < width; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<CsvRow> rows;
  for (const auto& run : sweep.runs) {
    if (!run.result) continue;
    for (auto& r : csv_rows(run.run_id, run.config, *run.result)) rows.push_back(std::move(r));
  }
  write_csv(out_dir / "results.csv", rows);
  return sweep;
}

// Markdown summary: one line per run, "mean ± std (standard accuracy)" in
// percent.
inline std::string report_markdown(const CsvTable& t) {
  const std::size_t c_run = t.column("run_id"), c_def = t.column("defense"),
                    c_n = t.column("n_attackers"), c_att = t.column("attacker_id"),
                    c_mean = t.column("mean_asr"), c_std = t.column("std_asr"),
                    c_acc = t.column("std_acc"), c_seed = t.column("seed"),
                    c_asr = t.column("asr");
  auto pct = [](const std::string& s) {
    if (s.empty()) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * std::stod(s);
    return os.str();
  };
  std::ostringstream os;
  os << "| run_id | seed | defense | N | ASR % (mean ± std) (std acc %) | per-attacker ASR % |\n";
  os << "|---|---|---|---|---|---|\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const CsvRow*>> by_run;
  for (const auto& r : t.rows) {
    if (!by_run.count(r[c_run])) order.push_back(r[c_run]);
    by_run[r[c_run]].push_back(&r);
  }
  for (const auto& id : order) {
    const auto& rows = by_run[id];
    const CsvRow& first = *rows.front();
    std::string per;
    for (const auto* r : rows) {
      if ((*r)[c_att] == "-1") continue;
      if (!per.empty()) per += ", ";
      per += pct((*r)[c_asr]);
    }
    os << "| " << id << " | " << first[c_seed] << " | " << first[c_def] << " | " << first[c_n]
       << " | " << pct(first[c_mean]) << " ± " << pct(first[c_std]) << " (" << pct(first[c_acc])
       << ") | " << (per.empty() ? "-" : per) << " |\n";
  }
  return os.str();
}

}  // namespace backfire::cli
