#pragma once

#include <algorithm>
#include <cmath>
#include <future>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "backfire/data.hpp"
#include "backfire/nn.hpp"
#include "backfire/random.hpp"
#include "backfire/similarity.hpp"
#include "backfire/trigger.hpp"

namespace backfire {

struct NoDefense {
  friend bool operator==(const NoDefense&, const NoDefense&) = default;
};

// CutMix over the assembled pool.
struct DataAugmentation {
  double mix_fraction = 0.5;
  double alpha = 1.0;
  friend bool operator==(const DataAugmentation&, const DataAugmentation&) = default;
};

// The defender triggers 60% of its own share with simulated attackers'
// patterns, keeping true labels.
struct AgentAugmentation {
  std::size_t n_simulated = 5;
  double p_sim = 0.2;
  friend bool operator==(const AgentAugmentation&, const AgentAugmentation&) = default;
};

enum class IndexMode { known, unknown };

// Leave-one-agent-out ensemble; queries route to the model that never saw
// the querying agent's data.
struct AgentIndexing {
  IndexMode mode = IndexMode::known;
  SimilarityBackend similarity = SimilarityBackend::mmd;
  std::size_t bins = 16;
  std::optional<double> bandwidth;  // median heuristic when unset
  friend bool operator==(const AgentIndexing&, const AgentIndexing&) = default;
};

using DefenseConfig = std::variant<NoDefense, DataAugmentation, AgentAugmentation, AgentIndexing>;

inline std::string defense_name(const DefenseConfig& d) {
  struct {
    std::string operator()(const NoDefense&) const { return "none"; }
    std::string operator()(const DataAugmentation&) const { return "data_augmentation"; }
    std::string operator()(const AgentAugmentation&) const { return "agent_augmentation"; }
    std::string operator()(const AgentIndexing& a) const {
      return a.mode == IndexMode::known ? "agent_indexing" : "agent_indexing_unknown";
    }
  } v;
  return std::visit(v, d);
}

inline void validate(const DefenseConfig& d) {
  if (const auto* a = std::get_if<DataAugmentation>(&d)) {
    if (!(a->mix_fraction >= 0.0 && a->mix_fraction <= 1.0)) {
      throw std::invalid_argument("defense.mix_fraction must lie in [0, 1]");
    }
    if (!(a->alpha > 0.0)) throw std::invalid_argument("defense.alpha must be > 0");
  } else if (const auto* g = std::get_if<AgentAugmentation>(&d)) {
    if (g->n_simulated < 1) throw std::invalid_argument("defense.n_simulated must be >= 1");
    if (!(g->p_sim > 0.0 && g->p_sim <= 1.0)) {
      throw std::invalid_argument("defense.p_sim must lie in (0, 1]");
    }
  } else if (const auto* i = std::get_if<AgentIndexing>(&d)) {
    if (i->bins < 2) throw std::invalid_argument("defense.bins must be >= 2");
    if (i->bandwidth && !(*i->bandwidth > 0.0)) {
      throw std::invalid_argument("defense.bandwidth must be > 0");
    }
  }
}

// ---------------------------------------------------------------------------
// CutMix

struct CutMixPatch {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  double lambda = 1.0;  // as drawn
  std::size_t area() const { return height * width; }
};

// Square patch of side ceil(sqrt(1 - lambda) * H) x ceil(sqrt(1 - lambda) * W)
// at a uniform position fully inside the image.
inline CutMixPatch cutmix_patch(const Shape& dims, double lambda, Rng& rng) {
  CutMixPatch p;
  p.lambda = lambda;
  const double ratio = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  p.height = std::min(dims[1], ceil_count(ratio * static_cast<double>(dims[1])));
  p.width = std::min(dims[2], ceil_count(ratio * static_cast<double>(dims[2])));
  if (p.area() == 0) return p;
  p.row = uniform_index(rng, dims[1] - p.height + 1);
  p.col = uniform_index(rng, dims[2] - p.width + 1);
  return p;
}

// Pastes the patch of `b` into `a`. The label weights follow the pasted area,
// so the mixed row is (1 - area/HW) * onehot(a) + (area/HW) * onehot(b).
inline LabeledImage cutmix_pair(const LabeledImage& a, const LabeledImage& b,
                                const CutMixPatch& patch, std::size_t classes) {
  const auto& shape = a.pixels.shape();
  if (b.pixels.shape() != shape) throw ShapeError("CutMix images differ in shape");
  LabeledImage out = a;
  if (patch.area() == 0) return out;
  const std::size_t h = shape[1], w = shape[2];
  for (std::size_t ch = 0; ch < shape[0]; ++ch) {
    for (std::size_t r = patch.row; r < patch.row + patch.height; ++r) {
      for (std::size_t c = patch.col; c < patch.col + patch.width; ++c) {
        const std::size_t i = (ch * h + r) * w + c;
        out.pixels[i] = b.pixels[i];
      }
    }
  }
  auto label_row = [classes](const LabeledImage& img) {
    if (img.soft_label) return *img.soft_label;
    std::vector<double> row(classes, 0.0);
    row.at(img.label) = 1.0;
    return row;
  };
  const double w_b = static_cast<double>(patch.area()) / static_cast<double>(h * w);
  const double w_a = 1.0 - w_b;
  const auto ya = label_row(a), yb = label_row(b);
  std::vector<double> mixed(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    // Keeps every row summing to exactly 1 when a and b share a class.
    if (ya[c] == 1.0 && yb[c] == 1.0) {
      mixed[c] = 1.0;
    } else {
      mixed[c] = w_a * ya[c] + w_b * yb[c];
    }
  }
  out.soft_label = std::move(mixed);
  return out;
}

struct CutMixRecord {
  std::size_t target = 0;  // flat pool index of a
  std::size_t source = 0;  // flat pool index of b
  CutMixPatch patch;
};

// Mixes round(mix_fraction * n) seeded images of the pool, each with a
// distinct seeded partner. Owner tags stay with the receiving image.
inline std::vector<SubDataset> cutmix_transform(const std::vector<SubDataset>& pool,
                                                double mix_fraction, double alpha,
                                                std::size_t classes, std::uint64_t seed,
                                                std::vector<CutMixRecord>* log = nullptr) {
  validate(DefenseConfig{DataAugmentation{mix_fraction, alpha}});
  std::vector<std::pair<std::size_t, std::size_t>> where;  // flat -> (sub, idx)
  for (std::size_t s = 0; s < pool.size(); ++s) {
    for (std::size_t i = 0; i < pool[s].size(); ++i) where.emplace_back(s, i);
  }
  std::vector<SubDataset> out = pool;
  const std::size_t n = where.size();
  if (n < 2) return out;
  const Shape dims = pool[where[0].first].images[where[0].second].pixels.shape();
  for (const auto& [s, i] : where) {
    if (pool[s].images[i].pixels.shape() != dims) {
      throw ShapeError("CutMix needs images of one shape");
    }
  }
  Rng rng(derive_seed(seed, "cutmix"));
  const std::size_t count = std::min(n, round_half_up(mix_fraction * static_cast<double>(n)));
  auto order = shuffled_indices(n, rng);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t a = order[k];
    std::size_t b = uniform_index(rng, n - 1);
    if (b >= a) ++b;
    const double lambda = sample_beta(rng, alpha, alpha);
    const CutMixPatch patch = cutmix_patch(dims, lambda, rng);
    const auto& img_a = pool[where[a].first].images[where[a].second];
    const auto& img_b = pool[where[b].first].images[where[b].second];
    out[where[a].first].images[where[a].second] = cutmix_pair(img_a, img_b, patch, classes);
    if (log != nullptr) log->push_back({a, b, patch});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agent augmentation

struct AugmentationReport {
  std::size_t clean = 0;
  std::vector<std::size_t> slice_sizes;
  std::vector<std::uint64_t> pattern_hashes;
};

inline SubDataset agent_augment(const SubDataset& share, std::size_t n_simulated, double p_sim,
                                std::uint64_t seed, AugmentationReport* report = nullptr) {
  validate(DefenseConfig{AgentAugmentation{n_simulated, p_sim}});
  if (share.empty()) throw std::invalid_argument("agent augmentation of an empty share");
  const std::size_t n = share.size();
  const std::size_t clean = round_half_up(0.4 * static_cast<double>(n));
  const std::size_t poisoned = n - clean;
  if (poisoned / n_simulated == 0) {
    throw std::invalid_argument("agent augmentation: " + std::to_string(poisoned) +
                                " samples cannot fill " + std::to_string(n_simulated) +
                                " simulated slices");
  }
  Rng rng(derive_seed(seed, "agent-augment"));
  const auto order = shuffled_indices(n, rng);
  const Shape dims = share.images.front().pixels.shape();

  SubDataset out;
  out.owner = share.owner;
  out.provenance = Provenance::defender_simulated_poison;
  out.images.reserve(n);
  for (std::size_t i = 0; i < clean; ++i) out.images.push_back(share.images[order[i]]);

  AugmentationReport rep;
  rep.clean = clean;
  std::size_t next = clean;
  for (std::size_t k = 0; k < n_simulated; ++k) {
    const std::size_t size = poisoned / n_simulated + (k < poisoned % n_simulated ? 1 : 0);
    const TriggerSpec t = generate_trigger(dims, PoisonRates::uniform(p_sim), 0,
                                           derive_seed(seed, "sim", k), kDefender);
    for (std::size_t i = 0; i < size; ++i) {
      out.images.push_back(
          apply_trigger(share.images[order[next++]], t, LabelPolicy::keep_true_label));
    }
    rep.slice_sizes.push_back(size);
    rep.pattern_hashes.push_back(t.pattern_hash);
  }
  if (report != nullptr) *report = std::move(rep);
  return out;
}

// ---------------------------------------------------------------------------
// Agent indexing

struct ModelEnsemble {
  // Model trained on every sub-dataset except the key agent's.
  std::map<AgentId, Model> excluding;
  Model full;
  // Owner histogram of each model's training multiset (audit trail).
  std::map<AgentId, std::map<AgentId, std::size_t>> training_owners;
  std::map<AgentId, std::size_t> full_training_owners;

  std::size_t model_count() const { return excluding.size() + 1; }
};

namespace detail {

inline std::map<AgentId, std::size_t> owner_histogram(
    std::span<const SubDataset* const> subs) {
  std::map<AgentId, std::size_t> h;
  for (const auto* s : subs) h[s->owner] += s->size();
  return h;
}

}  // namespace detail

struct EnsembleOptions {
  Architecture arch;
  TrainRegimen regimen;
  std::uint64_t init_seed = 0;
  std::size_t jobs = 1;
};

// Shuffle seed of a leave-one-out member; the full model keeps the base
// regimen seed so it matches an undefended run.
inline std::uint64_t excluded_shuffle_seed(std::uint64_t base, AgentId excluded) {
  return derive_seed(base, "exclude", excluded);
}

inline ModelEnsemble build_ensemble(const std::vector<SubDataset>& pool,
                                    const EnsembleOptions& opts) {
  std::vector<AgentId> owners;
  for (const auto& s : pool) {
    if (std::find(owners.begin(), owners.end(), s.owner) == owners.end()) {
      owners.push_back(s.owner);
    }
  }
  std::sort(owners.begin(), owners.end());
  if (owners.size() < 2) {
    throw std::invalid_argument("agent indexing needs at least two contributing agents");
  }

  struct Job {
    std::optional<AgentId> excluded;
    std::vector<const SubDataset*> subs;
  };
  std::vector<Job> jobs;
  for (AgentId id : owners) {
    Job j{id, {}};
    for (const auto& s : pool) {
      if (s.owner != id && !s.empty()) j.subs.push_back(&s);
    }
    std::size_t total = 0;
    for (const auto* s : j.subs) total += s->size();
    if (total == 0) {
      throw std::invalid_argument("excluding agent " + std::to_string(id) +
                                  " leaves no training data");
    }
    jobs.push_back(std::move(j));
  }
  Job full{std::nullopt, {}};
  for (const auto& s : pool) {
    if (!s.empty()) full.subs.push_back(&s);
  }
  jobs.push_back(std::move(full));

  const Model init = Model::initialized(opts.arch, opts.init_seed);
  auto run = [&](const Job& j) {
    TrainRegimen r = opts.regimen;
    if (j.excluded) r.shuffle_seed = excluded_shuffle_seed(r.shuffle_seed, *j.excluded);
    return train(init, to_training_set(j.subs, opts.arch.classes), r);
  };

  std::vector<Model> models(jobs.size());
  const std::size_t width = std::max<std::size_t>(1, opts.jobs);
  for (std::size_t start = 0; start < jobs.size(); start += width) {
    std::vector<std::future<Model>> futs;
    const std::size_t end = std::min(jobs.size(), start + width);
    for (std::size_t k = start; k + 1 < end; ++k) {
      futs.push_back(std::async(std::launch::async, run, std::cref(jobs[k])));
    }
    models[end - 1] = run(jobs[end - 1]);
    for (std::size_t k = start; k + 1 < end; ++k) models[k] = futs[k - start].get();
  }

  ModelEnsemble ens;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    if (jobs[k].excluded) {
      ens.excluding.emplace(*jobs[k].excluded, std::move(models[k]));
      ens.training_owners[*jobs[k].excluded] = detail::owner_histogram(jobs[k].subs);
    } else {
      ens.full = std::move(models[k]);
      ens.full_training_owners = detail::owner_histogram(jobs[k].subs);
    }
  }
  return ens;
}

struct IndexedPrediction {
  std::vector<std::size_t> predictions;
  // Agent whose leave-one-out model answered; nullopt = full model.
  std::optional<AgentId> routed_to;
  std::optional<SimilarityReport> report;
  bool fallback_to_full = false;
  std::string warning;
};

// Known mode: route to the model excluding `agent`. Agents the ensemble does
// not know, and the defender itself, get the full model.
inline IndexedPrediction infer_known(const ModelEnsemble& ens, const Tensor& query,
                                     AgentId agent) {
  IndexedPrediction out;
  if (agent == kDefender) {
    out.predictions = predict_rows(ens.full, query);
    return out;
  }
  const auto it = ens.excluding.find(agent);
  if (it == ens.excluding.end()) {
    out.fallback_to_full = true;
    out.warning = "agent " + std::to_string(agent) + " is not indexed; used the full model";
    out.predictions = predict_rows(ens.full, query);
    return out;
  }
  out.routed_to = agent;
  out.predictions = predict_rows(it->second, query);
  return out;
}

// Unknown mode: the most similar contributed sub-dataset picks the route.
inline IndexedPrediction infer_unknown(const ModelEnsemble& ens, const Tensor& query,
                                       const SimilarityIndex& index) {
  SimilarityReport rep = index.score(query);
  IndexedPrediction out = infer_known(ens, query, rep.selected);
  rep.fallback_to_full = out.fallback_to_full;
  rep.warning = out.warning;
  out.report = std::move(rep);
  return out;
}

}  // namespace backfire
