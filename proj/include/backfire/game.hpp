#pragma once

// One round of the multi-agent backdoor game: a defender and N independent
// attackers contribute sub-datasets to a shared pool, the defender trains on
// the pool (after an optional defense transform), and every attacker's
// trigger is evaluated on its held-out split.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "backfire/data.hpp"
#include "backfire/defenses.hpp"
#include "backfire/metrics.hpp"
#include "backfire/nn.hpp"
#include "backfire/similarity.hpp"
#include "backfire/trigger.hpp"

namespace backfire {

inline constexpr double kContributedFraction = 0.8;
inline constexpr std::size_t kMinShare = 5;

struct AttackerConfig {
  AgentId agent_id = 1;
  PoisonRates rates;
  std::size_t target_label = 0;
  // Redraw the trigger until its mean perturbation norm on the attacker's own
  // clean data reaches this value (0 disables the check).
  double min_salience = kDefaultMinSalience;

  friend bool operator==(const AttackerConfig&, const AttackerConfig&) = default;
};

struct GameConfig {
  DatasetSpec dataset;
  Architecture arch;  // input extents and class count follow the dataset
  TrainRegimen regimen;
  std::size_t pool_size = 1000;
  double defender_fraction = 0.4;
  std::vector<AttackerConfig> attackers;
  DefenseConfig defense = NoDefense{};
  std::uint64_t seed = 0;
  // Also run each attacker alone against an undefended pool.
  bool single_reference = false;
  // Worker threads for ensemble training.
  std::size_t jobs = 1;
  std::string name;

  void sync_architecture() {
    arch.input = dataset.image_shape();
    arch.classes = dataset.classes;
  }

  std::size_t defender_share() const {
    return round_half_up(defender_fraction * static_cast<double>(pool_size));
  }

  std::size_t attacker_share() const {
    if (attackers.empty()) return 0;
    return round_half_up((1.0 - defender_fraction) * static_cast<double>(pool_size) /
                         static_cast<double>(attackers.size()));
  }

  void validate() const {
    dataset.validate();
    regimen.validate();
    backfire::validate(defense);
    if (!(defender_fraction > 0.0 && defender_fraction < 1.0)) {
      throw std::invalid_argument("pool.defender_fraction must lie in (0, 1)");
    }
    if (arch.input != dataset.image_shape() || arch.classes != dataset.classes) {
      throw std::invalid_argument("model architecture does not match the dataset");
    }
    if (defender_share() < kMinShare) {
      throw std::invalid_argument("defender share of " + std::to_string(defender_share()) +
                                  " samples is below the minimum of 5");
    }
    std::vector<AgentId> seen;
    for (const auto& a : attackers) {
      a.rates.validate();
      if (a.agent_id < 1) throw std::invalid_argument("attacker ids start at 1");
      if (a.target_label >= dataset.classes) {
        throw std::invalid_argument("attacker " + std::to_string(a.agent_id) +
                                    " targets label " + std::to_string(a.target_label) +
                                    " outside the class range");
      }
      if (std::find(seen.begin(), seen.end(), a.agent_id) != seen.end()) {
        throw std::invalid_argument("duplicate attacker id " + std::to_string(a.agent_id));
      }
      seen.push_back(a.agent_id);
    }
    if (!attackers.empty() && attacker_share() < kMinShare) {
      throw std::invalid_argument("attacker share of " + std::to_string(attacker_share()) +
                                  " samples is below the minimum of 5");
    }
    if (std::holds_alternative<AgentIndexing>(defense) && attackers.empty()) {
      throw std::invalid_argument("agent indexing needs at least one attacker");
    }
  }
};

// Attackers numbered 1..n, all at scalar rate p and one target label.
inline std::vector<AttackerConfig> uniform_attackers(std::size_t n, double p,
                                                     std::size_t target_label = 0) {
  std::vector<AttackerConfig> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({static_cast<AgentId>(i + 1), PoisonRates::uniform(p), target_label});
  }
  return out;
}

struct PoolAssembly {
  // Contributed sub-datasets: defender first, then attackers by id.
  std::vector<SubDataset> pool;
  SubDataset defender_test;
  // Clean held-out splits, triggered at evaluation time.
  std::map<AgentId, SubDataset> attacker_tests;
  std::map<AgentId, TriggerSpec> triggers;
};

namespace detail {

// Raw samples for one agent. Synthetic data is an independent draw seeded by
// (seed xor agent id); IDX data is a disjoint slice of one shuffled corpus.
class SampleSource {
 public:
  explicit SampleSource(const GameConfig& cfg) : cfg_(cfg) {
    if (cfg.dataset.kind == DatasetKind::mnist_idx) {
      corpus_ = load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
      if (!corpus_.empty() && corpus_.images.front().pixels.shape() != cfg.dataset.image_shape()) {
        throw std::invalid_argument("IDX images are " +
                                    shape_string(corpus_.images.front().pixels.shape()) +
                                    " but the dataset spec says " +
                                    shape_string(cfg.dataset.image_shape()));
      }
      for (const auto& img : corpus_.images) {
        if (img.label >= cfg.dataset.classes) {
          throw std::invalid_argument("IDX label exceeds dataset.classes");
        }
      }
      Rng rng(derive_seed(cfg.seed, "corpus-order"));
      order_ = shuffled_indices(corpus_.size(), rng);
    }
  }

  SubDataset draw(AgentId agent, std::size_t count) {
    SubDataset out;
    if (cfg_.dataset.kind == DatasetKind::synthetic) {
      out = draw_synthetic(cfg_.dataset, count, cfg_.seed ^ agent);
    } else {
      if (cursor_ + count > order_.size()) {
        throw std::invalid_argument("IDX corpus of " + std::to_string(order_.size()) +
                                    " images is too small for the configured pool");
      }
      for (std::size_t i = 0; i < count; ++i) {
        out.images.push_back(corpus_.images[order_[cursor_++]]);
      }
    }
    out.owner = agent;
    return out;
  }

 private:
  const GameConfig& cfg_;
  SubDataset corpus_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline std::size_t raw_draw_for(std::size_t contributed) {
  return round_half_up(static_cast<double>(contributed) / kContributedFraction);
}

}  // namespace detail

inline PoolAssembly assemble_pool(const GameConfig& cfg) {
  cfg.validate();
  detail::SampleSource source(cfg);
  PoolAssembly out;

  const std::size_t defender_raw = detail::raw_draw_for(cfg.defender_share());
  auto [def_train, def_test] =
      split(source.draw(kDefender, defender_raw), kContributedFraction, cfg.seed ^ kDefender);
  def_train.owner = def_test.owner = kDefender;
  out.pool.push_back(std::move(def_train));
  out.defender_test = std::move(def_test);

  const std::size_t share = cfg.attacker_share();
  for (const auto& a : cfg.attackers) {
    const std::uint64_t agent_seed = cfg.seed ^ a.agent_id;
    auto [contributed, held_out] =
        split(source.draw(a.agent_id, detail::raw_draw_for(share)), kContributedFraction,
              agent_seed);
    TriggerSpec t = generate_working_trigger(cfg.dataset.image_shape(), a.rates, a.target_label,
                                             agent_seed, a.agent_id, contributed,
                                             a.min_salience);
    SubDataset poisoned = poison_subdataset(contributed, t, agent_seed);
    poisoned.owner = a.agent_id;
    held_out.owner = a.agent_id;
    out.pool.push_back(std::move(poisoned));
    out.attacker_tests.emplace(a.agent_id, std::move(held_out));
    out.triggers.emplace(a.agent_id, std::move(t));
  }
  return out;
}

struct AttackerResult {
  AgentId agent_id = 0;
  PoisonRates rates;
  std::size_t target_label = 0;
  std::uint64_t pattern_hash = 0;
  EvalRecord eval;
  // Agent indexing: clean accuracy of the model that excludes this attacker.
  std::optional<double> excluded_model_std_acc;
  std::optional<SimilarityReport> routing;
  std::optional<DivergenceRecord> divergence;
};

struct GameResult {
  std::string defense;
  std::uint64_t seed = 0;
  std::vector<AttackerResult> attackers;
  double std_acc = 0.0;
  std::optional<AsrSummary> asr_summary;
  // Defense audit trails.
  std::vector<std::uint64_t> simulated_pattern_hashes;
  std::map<AgentId, std::map<AgentId, std::size_t>> ensemble_training_owners;
  std::vector<double> epoch_loss;
  double runtime_s = 0.0;
};

inline std::uint64_t init_seed_for(const GameConfig& cfg) { return derive_seed(cfg.seed, "init"); }
inline std::uint64_t shuffle_seed_for(const GameConfig& cfg) {
  return derive_seed(cfg.seed, "shuffle");
}


namespace detail {

inline GameConfig single_reference_config(const GameConfig& cfg, const AttackerConfig& a) {
  GameConfig ref = cfg;
  ref.attackers = {a};
  ref.defense = NoDefense{};
  ref.single_reference = false;
  return ref;
}

}  // namespace detail

inline GameResult run_game(const GameConfig& input) {
  const auto start = std::chrono::steady_clock::now();
  GameConfig cfg = input;
  cfg.regimen.shuffle_seed = shuffle_seed_for(cfg);
  PoolAssembly assembly = assemble_pool(cfg);
  const std::size_t classes = cfg.dataset.classes;

  GameResult res;
  res.defense = defense_name(cfg.defense);
  res.seed = cfg.seed;

  std::vector<SubDataset> pool = assembly.pool;
  if (const auto* da = std::get_if<DataAugmentation>(&cfg.defense)) {
    pool = cutmix_transform(pool, da->mix_fraction, da->alpha, classes,
                            derive_seed(cfg.seed, "defense"));
  } else if (const auto* aa = std::get_if<AgentAugmentation>(&cfg.defense)) {
    AugmentationReport rep;
    pool.front() = agent_augment(pool.front(), aa->n_simulated, aa->p_sim,
                                 derive_seed(cfg.seed, "defense"), &rep);
    res.simulated_pattern_hashes = rep.pattern_hashes;
  }

  const Model init = Model::initialized(cfg.arch, init_seed_for(cfg));
  std::optional<ModelEnsemble> ensemble;
  std::optional<SimilarityIndex> index;
  Model full;
  if (const auto* ai = std::get_if<AgentIndexing>(&cfg.defense)) {
    ensemble = build_ensemble(pool, {cfg.arch, cfg.regimen, init_seed_for(cfg), cfg.jobs});
    full = ensemble->full;
    res.ensemble_training_owners = ensemble->training_owners;
    if (ai->mode == IndexMode::unknown) {
      index.emplace(pool, ai->similarity, ai->bins, ai->bandwidth,
                    derive_seed(cfg.seed, "similarity"));
    }
  } else {
    std::vector<const SubDataset*> subs;
    for (const auto& s : pool) subs.push_back(&s);
    TrainHistory history;
    full = train(init, to_training_set(subs, classes), cfg.regimen, &history);
    res.epoch_loss = std::move(history.epoch_loss);
  }

  const Tensor clean_x = stack_pixels(assembly.defender_test.images);
  std::vector<std::size_t> clean_y;
  for (const auto& img : assembly.defender_test.images) clean_y.push_back(img.label);
  res.std_acc = compute_accuracy(predict_rows(full, clean_x), clean_y);

  std::vector<double> asrs;
  for (const auto& a : cfg.attackers) {
    const TriggerSpec& t = assembly.triggers.at(a.agent_id);
    const SubDataset& test = assembly.attacker_tests.at(a.agent_id);
    const Tensor x = stack_pixels(trigger_all(test, t).images);
    std::vector<std::size_t> y;
    for (const auto& img : test.images) y.push_back(img.label);

    AttackerResult ar;
    ar.agent_id = a.agent_id;
    ar.rates = a.rates;
    ar.target_label = a.target_label;
    ar.pattern_hash = t.pattern_hash;

    std::vector<std::size_t> pred;
    if (ensemble) {
      IndexedPrediction ip = index ? infer_unknown(*ensemble, x, *index)
                                   : infer_known(*ensemble, x, a.agent_id);
      pred = std::move(ip.predictions);
      ar.routing = std::move(ip.report);
      ar.excluded_model_std_acc =
          compute_accuracy(predict_rows(ensemble->excluding.at(a.agent_id), clean_x), clean_y);
    } else {
      pred = predict_rows(full, x);
    }
    ar.eval = compute_asr(pred, y, a.target_label, a.agent_id);
    ar.divergence = class_divergence(pool, a.target_label, a.agent_id);
    if (cfg.single_reference) {
      const GameResult ref = run_game(detail::single_reference_config(input, a));
      ar.eval.single_reference_asr = ref.attackers.front().eval.asr;
    }
    asrs.push_back(ar.eval.asr);
    res.attackers.push_back(std::move(ar));
  }
  if (!asrs.empty()) res.asr_summary = aggregate_asr(asrs);
  res.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace backfire
