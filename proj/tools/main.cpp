#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "config.hpp"
#include "persist.hpp"
#include "presets.hpp"

namespace fs = std::filesystem;
using namespace backfire;

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent backdoor game simulator"};
  app.require_subcommand(1);

  std::string out_dir = "results";
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;

  auto* run = app.add_subcommand("run", "Run one config file");
  std::string config_path;
  run->add_option("config,--config", config_path, "Config file")->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seed", seed, "Override the config's master seed");
  run->add_option("--jobs", jobs, "Threads for ensemble training")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Run a preset or a set of config files");
  std::string preset_name;
  std::vector<std::string> sweep_configs;
  bool include_n100 = false;
  sweep->add_option("--preset", preset_name, "table1, table2 or table3")
      ->check(CLI::IsMember({"table1", "table2", "table3"}));
  sweep->add_option("targets,--config", sweep_configs,
                    "Config files, or a preset name in place of --preset");
  sweep->add_flag("--include-n100", include_n100, "Add N=100 to the table3 grid");
  sweep->add_option("--out", out_dir, "Output directory");
  sweep->add_option("--seed", seed, "Master seed (overrides config files)");
  sweep->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize a results CSV as markdown");
  std::string csv_path;
  report->add_option("csv", csv_path, "results.csv")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::cout << cli::report_markdown(cli::read_csv(csv_path));
      return 0;
    }

    std::vector<GameConfig> configs;
    if (run->parsed()) {
      if (config_path.empty()) {
        std::cerr << "run: a config file is required\n";
        return 2;
      }
      GameConfig cfg = cli::parse_config(config_path);
      if (seed) cfg.seed = *seed;
      cfg.jobs = jobs;
      configs.push_back(cfg);
      jobs = 1;
    } else {
      if (preset_name.empty() && sweep_configs.size() == 1 &&
          (sweep_configs[0] == "table1" || sweep_configs[0] == "table2" ||
           sweep_configs[0] == "table3")) {
        preset_name = sweep_configs[0];
        sweep_configs.clear();
      }
      if (preset_name.empty() == sweep_configs.empty()) {
        std::cerr << "sweep: give exactly one of --preset or config files\n";
        return 2;
      }
      if (!preset_name.empty()) {
        configs = cli::preset(preset_name, seed.value_or(0), include_n100);
      } else {
        for (const auto& p : sweep_configs) {
          GameConfig cfg = cli::parse_config(p);
          if (seed) cfg.seed = *seed;
          configs.push_back(cfg);
        }
      }
    }

    const auto outcome = cli::run_and_persist(configs, out_dir, jobs, &std::cerr);
    std::cerr << "wrote " << (fs::path(out_dir) / "results.csv").string() << '\n';
    for (const auto& r : outcome.runs) {
      if (!r.result) std::cerr << "run " << r.run_id << " failed: " << r.error << '\n';
    }
    return outcome.all_ok() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
