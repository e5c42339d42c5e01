// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "backfire/defenses.hpp"
#include "backfire/game.hpp"
#include "gradcheck.hpp"
#include "persist.hpp"
#include "presets.hpp"

namespace fs = std::filesystem;
using namespace backfire;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

std::map<std::string, GameResult> g_cache;

const GameResult& play(const GameConfig& cfg) {
  const std::string id = cli::run_id(cfg);
  auto it = g_cache.find(id);
  if (it == g_cache.end()) it = g_cache.emplace(id, run_game(cfg)).first;
  return it->second;
}

double mean_asr(const GameResult& r) { return r.asr_summary ? r.asr_summary->mean : 0.0; }

double average(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// table1 order: n1, n2, n3, n4, n5, unilateral, mutual.
GameConfig table1(std::uint64_t seed, std::size_t k) { return cli::preset_table1(seed)[k]; }

GameConfig table3(std::uint64_t seed, const DefenseConfig& d, std::size_t n) {
  for (const auto& cfg : cli::preset_table3(seed)) {
    if (cfg.defense.index() == d.index() && cfg.attackers.size() == n) return cfg;
  }
  throw std::logic_error("no table3 cell");
}

Verdict backfiring() {
  std::vector<double> n1, n2, n5;
  for (auto s : kSeeds) {
    n1.push_back(mean_asr(play(table1(s, 0))));
    n2.push_back(mean_asr(play(table1(s, 1))));
    n5.push_back(mean_asr(play(table1(s, 4))));
  }
  const double a1 = average(n1), a2 = average(n2), a5 = average(n5);
  return {a1 >= 0.80 && a2 < a1 && a5 <= 0.5 * a1,
          "mean ASR N=1 " + fmt(a1) + ", N=2 " + fmt(a2) + ", N=5 " + fmt(a5)};
}

Verdict unilateral_escalation() {
  int wins = 0;
  std::string per;
  for (auto s : kSeeds) {
    const GameResult& r = play(table1(s, 5));
    double others = 0.0;
    for (std::size_t i = 1; i < r.attackers.size(); ++i) others += r.attackers[i].eval.asr;
    others /= static_cast<double>(r.attackers.size() - 1);
    const double lead = r.attackers.front().eval.asr;
    wins += lead > others;
    per += " " + fmt(lead, 2) + "/" + fmt(others, 2);
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds (escalator/others:" + per + ")"};
}

Verdict mutual_escalation() {
  std::vector<double> high, low;
  for (auto s : kSeeds) {
    high.push_back(mean_asr(play(table1(s, 6))));
    low.push_back(mean_asr(play(table1(s, 4))));
  }
  const double h = average(high), l = average(low);
  return {h <= l + 0.05, "mean ASR all p=0.9 " + fmt(h) + " vs all p=0.2 " + fmt(l)};
}

Verdict trigger_labels() {
  std::vector<double> distinct, single;
  for (auto s : kSeeds) {
    distinct.push_back(mean_asr(play(cli::preset_table2(s)[3])));
    single.push_back(mean_asr(play(table1(s, 0))));
  }
  const double d = average(distinct), one = average(single);
  return {d < one, "N=4 distinct labels " + fmt(d) + " vs N=1 " + fmt(one)};
}

Verdict agent_augmentation() {
  bool ok = true;
  std::string detail;
  for (std::size_t n : {1u, 2u, 5u}) {
    std::vector<double> pre, post, acc_pre, acc_post;
    for (auto s : kSeeds) {
      const GameResult& a = play(table3(s, NoDefense{}, n));
      const GameResult& b = play(table3(s, AgentAugmentation{}, n));
      pre.push_back(mean_asr(a));
      post.push_back(mean_asr(b));
      acc_pre.push_back(a.std_acc);
      acc_post.push_back(b.std_acc);
    }
    const double drop = average(acc_pre) - average(acc_post);
    ok = ok && average(post) < 0.5 * average(pre) && drop <= 0.15;
    detail += "N=" + std::to_string(n) + " ASR " + fmt(average(pre)) + "->" + fmt(average(post)) +
              " acc drop " + fmt(drop) + "; ";
  }
  return {ok, detail};
}

Verdict agent_indexing_known() {
  const double ceiling = 1.0 / 10.0 + 0.10;
  double worst_asr = 0.0, worst_gap = 0.0;
  std::size_t leaked = 0;
  for (std::size_t n : {1u, 2u, 5u}) {
    for (auto s : kSeeds) {
      const GameResult& r = play(table3(s, AgentIndexing{}, n));
      for (const auto& a : r.attackers) {
        worst_asr = std::max(worst_asr, a.eval.asr);
        worst_gap = std::max(worst_gap, std::abs(r.std_acc - a.excluded_model_std_acc.value()));
      }
      for (const auto& [excluded, owners] : r.ensemble_training_owners) {
        const auto it = owners.find(excluded);
        if (it != owners.end()) leaked += it->second;
      }
    }
  }
  return {worst_asr <= ceiling && worst_gap <= 0.05 && leaked == 0,
          "max ASR " + fmt(worst_asr) + " (ceiling " + fmt(ceiling, 2) + "), max accuracy gap " +
              fmt(worst_gap) + ", excluded-owner samples " + std::to_string(leaked)};
}

Verdict agent_indexing_unknown() {
  constexpr std::size_t kQuery = 30;
  std::map<SimilarityBackend, int> hits;
  for (std::uint64_t s = 1; s <= 50; ++s) {
    GameConfig cfg = cli::base_config(s);
    cfg.attackers = uniform_attackers(5, 0.2);
    const PoolAssembly a = assemble_pool(cfg);
    const AgentId k = 1 + s % 5;
    const SubDataset fresh = draw_synthetic(cfg.dataset, kQuery, derive_seed(s, "query"));
    const Tensor q = stack_pixels(trigger_all(fresh, a.triggers.at(k)).images);
    for (auto backend : {SimilarityBackend::mmd, SimilarityBackend::js}) {
      const SimilarityIndex index(a.pool, backend, 16, std::nullopt, derive_seed(s, "similarity"));
      hits[backend] += index.score(q).selected == k;
    }
  }
  const int m = hits[SimilarityBackend::mmd], j = hits[SimilarityBackend::js];
  return {m >= 40 && j >= 40, "MMD " + std::to_string(m) + "/50, JS " + std::to_string(j) +
                                  "/50 with " + std::to_string(kQuery) + "-sample queries"};
}

Verdict gradient_oracle() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    worst = std::max(worst, gradcheck::max_relative_error(gradcheck::random_problem(rng, trial)));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst < 1e-4 && secs < 60.0,
          "max relative error " + std::to_string(worst) + " in " + fmt(secs, 2) + " s"};
}

Verdict trigger_exactness() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0), rate(0.05, 1.0);
  std::uniform_int_distribution<std::size_t> side(8, 28), chans(1, 3);
  std::size_t formula_bad = 0, count_bad = 0, count_checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = chans(rng), h = side(rng), w = side(rng);
    LabeledImage x{Tensor({c, h, w}), 0};
    for (double& v : x.pixels.values()) v = u(rng);
    TriggerSpec t;
    t.mask = Tensor({h, w});
    const double density = u(rng);
    for (double& v : t.mask.values()) v = u(rng) < density ? 1.0 : 0.0;
    t.pattern = Tensor({c, h, w});
    for (double& v : t.pattern.values()) v = u(rng);
    const LabeledImage out = apply_trigger(x, t);
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      const double l = t.mask[i % (h * w)];
      formula_bad += out.pixels[i] != x.pixels[i] * (1.0 - l) + t.pattern[i] * l;
    }
  }
  for (int trial = 0; count_checked < 1000; ++trial) {
    const double p1 = rate(rng), p2 = rate(rng);
    const std::size_t h = side(rng), w = side(rng);
    const std::size_t area = ceil_count(p1 * static_cast<double>(h)) *
                             ceil_count(p1 * static_cast<double>(w));
    const std::size_t expected = round_half_up(p2 * static_cast<double>(area));
    if (expected == 0) continue;
    ++count_checked;
    const TriggerSpec t = generate_trigger({1, h, w}, {0.2, p1, p2}, 0, rng());
    count_bad += t.masked_pixels() != expected ||
                 t.region.height * t.region.width != area;
  }
  return {formula_bad == 0 && count_bad == 0,
          std::to_string(formula_bad) + " formula mismatches over 1000 triples, " +
              std::to_string(count_bad) + " cardinality mismatches over 1000 draws"};
}

std::multiset<std::pair<std::uint64_t, std::size_t>> keyed(const SubDataset& d) {
  std::multiset<std::pair<std::uint64_t, std::size_t>> out;
  for (const auto& img : d.images) out.insert({image_hash(img), img.label});
  return out;
}

Verdict pool_arithmetic() {
  GameConfig cfg = cli::base_config(7);
  cfg.attackers = uniform_attackers(3, 0.2);
  const PoolAssembly a = assemble_pool(cfg);
  std::vector<std::size_t> shares;
  for (const auto& s : a.pool) shares.push_back(s.size());
  bool ok = shares == std::vector<std::size_t>{400, 200, 200, 200};

  // Redo each agent's draw and split, then compare multisets.
  std::size_t bad = 0;
  for (AgentId id = 0; id <= 3; ++id) {
    const SubDataset raw =
        draw_synthetic(cfg.dataset, id == kDefender ? 500 : 250, cfg.seed ^ id);
    const auto [first, second] = split(raw, 0.8, cfg.seed ^ id);
    auto joined = keyed(first);
    for (const auto& k : keyed(second)) joined.insert(k);
    bad += joined != keyed(raw);
    bad += first.size() != (id == kDefender ? 400u : 200u);
    const SubDataset& held = id == kDefender ? a.defender_test : a.attacker_tests.at(id);
    bad += keyed(held) != keyed(second);
    // Clean survivors of the contributed side are untouched copies.
    const SubDataset& contributed = a.pool[id];
    for (std::size_t i = 0; i < contributed.size(); ++i) {
      if (contributed.images[i].provenance == Provenance::clean) {
        bad += image_hash(contributed.images[i]) != image_hash(first.images[i]);
      }
    }
  }
  ok = ok && bad == 0;
  return {ok, "shares (" + std::to_string(shares[0]) + ", " + std::to_string(shares[1]) + ", " +
                  std::to_string(shares[2]) + ", " + std::to_string(shares[3]) + "), " +
                  std::to_string(bad) + " partition violations"};
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "backfire_acceptance";
  fs::remove_all(root);
  std::vector<cli::CsvTable> tables;
  for (const char* leg : {"a", "b"}) {
    const auto sweep = cli::run_and_persist(cli::preset_table3(11), root / leg);
    if (!sweep.all_ok()) return {false, "a table3 run failed"};
    tables.push_back(cli::read_csv(root / leg / "results.csv"));
  }
  const std::size_t runtime = tables[0].column("runtime_s");
  std::size_t diffs = 0;
  if (tables[0].rows.size() != tables[1].rows.size()) ++diffs;
  for (std::size_t r = 0; r < std::min(tables[0].rows.size(), tables[1].rows.size()); ++r) {
    for (std::size_t c = 0; c < tables[0].header.size(); ++c) {
      if (c != runtime) diffs += tables[0].rows[r][c] != tables[1].rows[r][c];
    }
  }
  fs::remove_all(root);
  return {diffs == 0, std::to_string(tables[0].rows.size()) + " rows compared, " +
                          std::to_string(diffs) + " differing fields"};
}

Verdict cutmix_contract() {
  Rng rng(5);
  std::size_t sum_bad = 0, area_bad = 0;
  double worst = 0.0;
  LabeledImage a{Tensor({1, 16, 16}, 0.0), 1}, b{Tensor({1, 16, 16}, 1.0), 4};
  for (int i = 0; i < 1000; ++i) {
    const double lambda = sample_beta(rng, 1.0, 1.0);
    const std::size_t h = 8 + i % 17, w = 8 + (i * 7) % 19;
    const CutMixPatch p = cutmix_patch({1, h, w}, lambda, rng);
    const double side = std::sqrt(1.0 - lambda);
    area_bad += p.height != ceil_count(side * static_cast<double>(h)) ||
                p.width != ceil_count(side * static_cast<double>(w));
    const double hw = static_cast<double>(h * w);
    const double gap = std::abs(static_cast<double>(p.area()) / hw - (1.0 - lambda));
    worst = std::max(worst, gap);
    // One pixel row plus one pixel column bounds the rounding up.
    area_bad += gap > (static_cast<double>(h + w) + 1.0) / hw;

    a.pixels = Tensor({1, h, w}, 0.0);
    b.pixels = Tensor({1, h, w}, 1.0);
    b.label = i % 10;
    const LabeledImage mixed = cutmix_pair(a, b, p, 10);
    if (mixed.soft_label) {
      double total = 0.0;
      for (double v : *mixed.soft_label) total += v;
      sum_bad += total != 1.0;
    }
  }
  DatasetSpec spec;
  const std::vector<SubDataset> pool{draw_synthetic(spec, 500, 1), draw_synthetic(spec, 500, 2)};
  for (const auto& sub : cutmix_transform(pool, 0.5, 1.0, 10, 3)) {
    for (const auto& img : sub.images) {
      if (!img.soft_label) continue;
      double total = 0.0;
      for (double v : *img.soft_label) total += v;
      sum_bad += total != 1.0;
    }
  }
  return {sum_bad == 0 && area_bad == 0,
          std::to_string(sum_bad) + " rows off 1, " + std::to_string(area_bad) +
              " patch violations, worst area gap " + fmt(worst)};
}

Verdict similarity_sanity() {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({40, 64});
  for (double& v : x.values()) v = u(rng);
  const double self = mmd2_biased(x, x, 1.0);
  const double js_same = similarity_js(x, x, 16);
  const double js_apart = -similarity_js(Tensor({10, 64}, 0.0), Tensor({10, 64}, 1.0), 16);

  int separated = 0;
  DatasetSpec spec;
  for (std::uint64_t t = 0; t < 50; ++t) {
    const Tensor a = stack_pixels(draw_synthetic(spec, 60, 3 * t + 1).images);
    const Tensor b = stack_pixels(draw_synthetic(spec, 60, 3 * t + 2).images);
    const auto trig = generate_trigger(spec.image_shape(), PoisonRates::uniform(0.2), 0, t);
    const Tensor c = stack_pixels(trigger_all(draw_synthetic(spec, 60, 3 * t + 3), trig).images);
    const double bw = median_bandwidth(a, t);
    separated += mmd2_unbiased(a, b, bw) < mmd2_unbiased(a, c, bw);
  }
  const bool ok = self <= 1e-9 && js_same == 0.0 &&
                  std::abs(js_apart - std::log(2.0)) <= 1e-12 && separated >= 45;
  std::ostringstream os;
  os << "MMD2(X,X) " << self << ", JS same " << -js_same << ", JS disjoint - ln2 "
     << (js_apart - std::log(2.0)) << ", separation " << separated << "/50";
  return {ok, os.str()};
}

Verdict idx_loader() {
  const fs::path dir = fs::temp_directory_path() / "backfire_acceptance_idx";
  fs::create_directories(dir);
  std::mt19937_64 rng(8);
  IdxImages imgs;
  imgs.count = 12;
  imgs.rows = 28;
  imgs.cols = 28;
  for (std::size_t i = 0; i < 12 * 784; ++i) imgs.pixels.push_back(static_cast<std::uint8_t>(rng()));
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(static_cast<std::uint8_t>(i % 10));
  const std::string ip = (dir / "images").string(), lp = (dir / "labels").string();
  write_idx_images(ip, imgs);
  write_idx_labels(lp, labels);
  auto bytes = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
  };
  const auto original = bytes(ip), original_labels = bytes(lp);
  write_idx_images((dir / "images2").string(), read_idx_images(ip));
  write_idx_labels((dir / "labels2").string(), read_idx_labels(lp));
  const bool exact = bytes((dir / "images2").string()) == original &&
                     bytes((dir / "labels2").string()) == original_labels &&
                     load_idx(ip, lp).size() == 12;

  auto corrupt = [&](const std::string& path, std::vector<char> buf, char magic_low) {
    buf[3] = magic_low;
    std::ofstream(path, std::ios::binary).write(buf.data(), static_cast<std::streamsize>(buf.size()));
  };
  corrupt((dir / "bad_images").string(), original, 0x01);
  corrupt((dir / "bad_labels").string(), original_labels, 0x02);
  int rejected = 0;
  for (const auto& [i, l] : {std::pair{dir / "bad_images", dir / "labels"},
                             std::pair{dir / "images", dir / "bad_labels"}}) {
    try {
      load_idx(i.string(), l.string());
    } catch (const IdxError& e) {
      rejected += e.kind() == IdxErrorKind::bad_magic;
    }
  }
  fs::remove_all(dir);
  return {exact && rejected == 2, std::string(exact ? "byte-exact" : "NOT byte-exact") +
                                      " round trip, " + std::to_string(rejected) +
                                      "/2 corrupt magics rejected as bad_magic"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"backfiring trend", backfiring},
      {"unilateral escalation", unilateral_escalation},
      {"mutual escalation does not help", mutual_escalation},
      {"trigger-label effect", trigger_labels},
      {"agent augmentation", agent_augmentation},
      {"agent indexing, known index", agent_indexing_known},
      {"agent indexing, unknown index routing", agent_indexing_unknown},
      {"gradient oracle", gradient_oracle},
      {"trigger formula exactness", trigger_exactness},
      {"split and pool arithmetic", pool_arithmetic},
      {"determinism of the defense grid", determinism},
      {"CutMix contract", cutmix_contract},
      {"MMD/JS sanity", similarity_sanity},
      {"IDX loader", idx_loader},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << ": "
              << criteria[i].first << " | " << v.detail << " [" << fmt(secs, 1) << " s]"
              << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
