#include <algorithm>
#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "backfire/defenses.hpp"

using namespace backfire;

namespace {

SubDataset synthetic(std::size_t n, std::uint64_t seed, AgentId owner) {
  DatasetSpec spec;
  SubDataset s = draw_synthetic(spec, n, seed);
  s.owner = owner;
  return s;
}

std::multiset<std::size_t> labels_of(const SubDataset& s) {
  std::multiset<std::size_t> out;
  for (const auto& img : s.images) out.insert(img.label);
  return out;
}

}  // namespace

TEST(CutMix, LambdaOneLeavesTheImageAlone) {
  Rng rng(1);
  const SubDataset d = synthetic(2, 1, 0);
  const CutMixPatch p = cutmix_patch({1, 16, 16}, 1.0, rng);
  EXPECT_EQ(p.area(), 0u);
  const LabeledImage out = cutmix_pair(d.images[0], d.images[1], p, 10);
  EXPECT_TRUE(out.pixels == d.images[0].pixels);
  ASSERT_TRUE(out.soft_label.has_value() == false);
  EXPECT_EQ(out.label, d.images[0].label);
}

TEST(CutMix, PatchSizeFollowsLambda) {
  Rng rng(2);
  const CutMixPatch p = cutmix_patch({1, 16, 16}, 0.75, rng);
  EXPECT_EQ(p.height, 8u);
  EXPECT_EQ(p.width, 8u);
  EXPECT_EQ(p.area(), 64u);
  EXPECT_LE(p.row + p.height, 16u);
  EXPECT_LE(p.col + p.width, 16u);
}

TEST(CutMix, MixedPixelsAndLabelWeights) {
  LabeledImage a{Tensor({1, 8, 8}, 0.0), 1};
  LabeledImage b{Tensor({1, 8, 8}, 1.0), 3};
  CutMixPatch p;
  p.row = 2;
  p.col = 4;
  p.height = 4;
  p.width = 4;
  const LabeledImage out = cutmix_pair(a, b, p, 5);
  double sum = 0.0;
  for (double v : out.pixels.values()) sum += v;
  EXPECT_EQ(sum, 16.0);
  EXPECT_EQ(out.pixels[2 * 8 + 4], 1.0);
  EXPECT_EQ(out.pixels[0], 0.0);
  ASSERT_TRUE(out.soft_label.has_value());
  EXPECT_EQ(*out.soft_label, (std::vector<double>{0, 0.75, 0, 0.25, 0}));

  b.label = 1;
  EXPECT_EQ(*cutmix_pair(a, b, p, 5).soft_label, (std::vector<double>{0, 1, 0, 0, 0}));
}

TEST(CutMix, TransformRowsSumToOneAndCountsMatch) {
  std::vector<SubDataset> pool{synthetic(60, 1, 0), synthetic(40, 2, 1)};
  std::vector<CutMixRecord> log;
  const auto out = cutmix_transform(pool, 0.5, 1.0, 10, 7, &log);
  EXPECT_EQ(log.size(), 50u);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].owner, 0u);
  EXPECT_EQ(out[1].owner, 1u);
  std::size_t soft = 0;
  for (const auto& s : out) {
    for (const auto& img : s.images) {
      if (!img.soft_label) continue;
      ++soft;
      double sum = 0.0;
      for (double v : *img.soft_label) sum += v;
      EXPECT_EQ(sum, 1.0);
    }
  }
  EXPECT_LE(soft, 50u);
  const auto again = cutmix_transform(pool, 0.5, 1.0, 10, 7);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t i = 0; i < out[s].size(); ++i) {
      EXPECT_TRUE(out[s].images[i].pixels == again[s].images[i].pixels);
    }
  }
  EXPECT_THROW(cutmix_transform(pool, 1.5, 1.0, 10, 7), std::invalid_argument);
}

TEST(AgentAugment, SplitsFortySixty) {
  const SubDataset share = synthetic(400, 3, 0);
  AugmentationReport rep;
  const SubDataset out = agent_augment(share, 4, 0.2, 11, &rep);
  EXPECT_EQ(rep.clean, 160u);
  EXPECT_EQ(rep.slice_sizes, (std::vector<std::size_t>{60, 60, 60, 60}));
  EXPECT_EQ(std::set<std::uint64_t>(rep.pattern_hashes.begin(), rep.pattern_hashes.end()).size(),
            4u);
  std::size_t simulated = 0;
  for (const auto& img : out.images) {
    simulated += img.provenance == Provenance::defender_simulated_poison;
  }
  EXPECT_EQ(simulated, 240u);
  EXPECT_EQ(out.owner, 0u);
}

TEST(AgentAugment, TenSamplesOneSlicePreserveLabels) {
  const SubDataset share = synthetic(10, 4, 0);
  AugmentationReport rep;
  const SubDataset out = agent_augment(share, 1, 0.2, 5, &rep);
  EXPECT_EQ(rep.clean, 4u);
  EXPECT_EQ(rep.slice_sizes, std::vector<std::size_t>{6});
  EXPECT_EQ(labels_of(out), labels_of(share));
}

TEST(AgentAugment, LabelMultisetIsConserved) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SubDataset share = synthetic(37 + seed, seed, 0);
    EXPECT_EQ(labels_of(agent_augment(share, 1 + seed % 5, 0.2, seed)), labels_of(share));
  }
}

TEST(AgentAugment, RejectsEmptySlices) {
  EXPECT_THROW(agent_augment(synthetic(5, 1, 0), 4, 0.2, 1), std::invalid_argument);
  EXPECT_THROW(agent_augment(synthetic(50, 1, 0), 0, 0.2, 1), std::invalid_argument);
  EXPECT_THROW(agent_augment(synthetic(50, 1, 0), 2, 0.0, 1), std::invalid_argument);
}

namespace {

EnsembleOptions small_options() {
  EnsembleOptions o;
  o.arch.hidden = {16};
  o.regimen.epochs = 3;
  o.init_seed = 3;
  return o;
}

}  // namespace

TEST(Ensemble, OneModelPerAgentPlusFull) {
  const std::vector<SubDataset> pool{synthetic(40, 1, 0), synthetic(30, 2, 1),
                                     synthetic(30, 3, 2)};
  const ModelEnsemble ens = build_ensemble(pool, small_options());
  EXPECT_EQ(ens.model_count(), 4u);
  for (AgentId id : {0u, 1u, 2u}) {
    ASSERT_TRUE(ens.excluding.count(id));
    const auto& hist = ens.training_owners.at(id);
    EXPECT_EQ(hist.count(id), 0u) << "model excluding " << id;
    std::size_t total = 0;
    for (const auto& [owner, n] : hist) total += n;
    EXPECT_EQ(total, 100u - pool[id].size());
  }
  EXPECT_EQ(ens.full_training_owners.size(), 3u);
}

TEST(Ensemble, TrainingIsDeterministicAndParallelSafe) {
  const std::vector<SubDataset> pool{synthetic(40, 1, 0), synthetic(30, 2, 1),
                                     synthetic(30, 3, 2)};
  EnsembleOptions serial = small_options(), parallel = small_options();
  parallel.jobs = 4;
  const ModelEnsemble a = build_ensemble(pool, serial), b = build_ensemble(pool, parallel);
  for (const auto& [id, m] : a.excluding) {
    const auto pa = m.parameters(), pb = b.excluding.at(id).parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_TRUE(*pa[k] == *pb[k]);
  }
}

TEST(Ensemble, NeedsTwoOwners) {
  const std::vector<SubDataset> pool{synthetic(40, 1, 0), synthetic(40, 2, 0)};
  EXPECT_THROW(build_ensemble(pool, small_options()), std::invalid_argument);
}

TEST(Ensemble, KnownRoutingAndFallback) {
  const std::vector<SubDataset> pool{synthetic(40, 1, 0), synthetic(30, 2, 1),
                                     synthetic(30, 3, 2)};
  const ModelEnsemble ens = build_ensemble(pool, small_options());
  const Tensor q = stack_pixels(synthetic(10, 9, 0).images);
  const auto routed = infer_known(ens, q, 2);
  EXPECT_EQ(routed.routed_to, std::optional<AgentId>(2));
  EXPECT_EQ(routed.predictions, predict_rows(ens.excluding.at(2), q));
  EXPECT_FALSE(routed.fallback_to_full);

  const auto defender = infer_known(ens, q, kDefender);
  EXPECT_FALSE(defender.routed_to.has_value());
  EXPECT_EQ(defender.predictions, predict_rows(ens.full, q));

  const auto stranger = infer_known(ens, q, 42);
  EXPECT_TRUE(stranger.fallback_to_full);
  EXPECT_FALSE(stranger.warning.empty());
  EXPECT_EQ(stranger.predictions, predict_rows(ens.full, q));
}

TEST(Ensemble, UnknownRoutingUsesTheMostSimilarAgent) {
  std::vector<SubDataset> pool{synthetic(100, 1, 0)};
  const auto t = generate_trigger({1, 16, 16}, PoisonRates::uniform(0.2), 0, 4, 1);
  SubDataset att = poison_subdataset(synthetic(60, 2, 1), t, 1);
  att.owner = 1;
  pool.push_back(att);
  pool.push_back(synthetic(60, 3, 2));
  const ModelEnsemble ens = build_ensemble(pool, small_options());
  const SimilarityIndex index(pool, SimilarityBackend::mmd);
  const Tensor q = stack_pixels(trigger_all(synthetic(25, 8, 1), t).images);
  const auto out = infer_unknown(ens, q, index);
  ASSERT_TRUE(out.report.has_value());
  EXPECT_EQ(out.report->selected, 1u);
  EXPECT_EQ(out.routed_to, std::optional<AgentId>(1));
}

TEST(DefenseConfig, NamesAndValidation) {
  EXPECT_EQ(defense_name(NoDefense{}), "none");
  EXPECT_EQ(defense_name(DataAugmentation{}), "data_augmentation");
  EXPECT_EQ(defense_name(AgentAugmentation{}), "agent_augmentation");
  EXPECT_EQ(defense_name(AgentIndexing{}), "agent_indexing");
  EXPECT_EQ(defense_name(AgentIndexing{IndexMode::unknown}), "agent_indexing_unknown");
  EXPECT_THROW(validate(AgentAugmentation{0, 0.2}), std::invalid_argument);
  EXPECT_THROW(validate(DataAugmentation{0.5, 0.0}), std::invalid_argument);
  EXPECT_THROW(validate(AgentIndexing{IndexMode::known, SimilarityBackend::js, 1}),
               std::invalid_argument);
}
