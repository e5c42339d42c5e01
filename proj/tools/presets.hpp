#pragma once

// Scenario presets mirroring the three experiment tables: attacker-count
// growth with poison-rate escalation, trigger-label selection, and the
// defense grid.

#include <string>
#include <vector>

#include "backfire/game.hpp"

namespace backfire::cli {

inline GameConfig base_config(std::uint64_t seed) {
  GameConfig cfg;
  cfg.seed = seed;
  cfg.sync_architecture();
  return cfg;
}

// N = 1..5 at p = 0.2, then N = 5 with one attacker escalating to 0.4, then
// N = 5 with everybody at 0.9. One shared trigger label throughout.
inline std::vector<GameConfig> preset_table1(std::uint64_t seed) {
  std::vector<GameConfig> out;
  for (std::size_t n = 1; n <= 5; ++n) {
    GameConfig cfg = base_config(seed);
    cfg.attackers = uniform_attackers(n, 0.2);
    cfg.name = "table1-n" + std::to_string(n) + "-p0.2";
    out.push_back(cfg);
  }
  GameConfig unilateral = base_config(seed);
  unilateral.attackers = uniform_attackers(5, 0.2);
  unilateral.attackers.front().rates = PoisonRates::uniform(0.4);
  unilateral.name = "table1-n5-unilateral-p0.4";
  out.push_back(unilateral);

  GameConfig mutual = base_config(seed);
  mutual.attackers = uniform_attackers(5, 0.9);
  mutual.name = "table1-n5-all-p0.9";
  out.push_back(mutual);
  return out;
}

// N in {2, 4}: all attackers on label 0, or attacker i on label i - 1.
inline std::vector<GameConfig> preset_table2(std::uint64_t seed) {
  std::vector<GameConfig> out;
  for (std::size_t n : {2, 4}) {
    for (bool distinct : {false, true}) {
      GameConfig cfg = base_config(seed);
      cfg.attackers = uniform_attackers(n, 0.2);
      if (distinct) {
        for (std::size_t i = 0; i < n; ++i) cfg.attackers[i].target_label = i;
      }
      cfg.name = "table2-n" + std::to_string(n) + (distinct ? "-distinct" : "-same") + "-labels";
      out.push_back(cfg);
    }
  }
  return out;
}

inline std::vector<DefenseConfig> table3_defenses() {
  return {NoDefense{}, DataAugmentation{}, AgentAugmentation{}, AgentIndexing{}};
}

// Every defense crossed with N in {1, 2, 5, 10} (and 100 on request).
inline std::vector<GameConfig> preset_table3(std::uint64_t seed, bool include_n100 = false) {
  std::vector<std::size_t> counts{1, 2, 5, 10};
  if (include_n100) counts.push_back(100);
  std::vector<GameConfig> out;
  for (const auto& defense : table3_defenses()) {
    for (std::size_t n : counts) {
      GameConfig cfg = base_config(seed);
      cfg.attackers = uniform_attackers(n, 0.2);
      cfg.defense = defense;
      cfg.name = "table3-" + defense_name(defense) + "-n" + std::to_string(n);
      out.push_back(cfg);
    }
  }
  return out;
}

inline std::vector<GameConfig> preset(const std::string& name, std::uint64_t seed,
                                      bool include_n100 = false) {
  if (name == "table1") return preset_table1(seed);
  if (name == "table2") return preset_table2(seed);
  if (name == "table3") return preset_table3(seed, include_n100);
  throw std::invalid_argument("unknown preset '" + name + "' (expected table1, table2 or table3)");
}

}  // namespace backfire::cli
