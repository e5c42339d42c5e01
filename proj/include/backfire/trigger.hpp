#pragma once

// Randomized BadNet-style triggers. An attacker owns one binary mask l and
// one color pattern m; a triggered image is x * (1 - l) + m * l with the label
// rewritten to the attacker's target.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "backfire/data.hpp"
#include "backfire/random.hpp"
#include "backfire/tensor.hpp"

namespace backfire {

class TriggerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// p0: share of contributed samples poisoned. p1: linear extent of the trigger
// region along height and width. p2: fill fraction inside that region.
struct PoisonRates {
  double p0 = 0.2;
  double p1 = 0.2;
  double p2 = 0.2;

  static PoisonRates uniform(double p) { return {p, p, p}; }

  bool is_scalar() const { return p0 == p1 && p1 == p2; }

  void validate() const {
    for (double p : {p0, p1, p2}) {
      if (!(p > 0.0 && p <= 1.0)) {
        throw TriggerError("poison rates must lie in (0, 1], got " + std::to_string(p));
      }
    }
  }

  friend bool operator==(const PoisonRates&, const PoisonRates&) = default;
};

struct TriggerRegion {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t area() const { return height * width; }
};

struct TriggerSpec {
  Tensor mask;     // [height x width], {0, 1}, broadcast over channels
  Tensor pattern;  // [channels x height x width], zero outside the mask
  std::size_t target_label = 0;
  PoisonRates rates;
  AgentId owner = 0;
  TriggerRegion region;
  std::uint64_t pattern_hash = 0;

  std::size_t masked_pixels() const {
    std::size_t n = 0;
    for (double v : mask.values()) n += v != 0.0;
    return n;
  }
};

inline std::uint64_t trigger_pattern_hash(const Tensor& mask, const Tensor& pattern) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.values().data());
    for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix(mask);
  mix(pattern);
  return h;
}

// Region of ceil(p1*H) x ceil(p1*W) at a uniform position; exactly
// round(p2 * area) of its pixels masked; independent uniform color per masked
// pixel and channel.
inline TriggerSpec generate_trigger(const Shape& dims, const PoisonRates& rates,
                                    std::size_t target_label, std::uint64_t seed,
                                    AgentId owner = 0) {
  rates.validate();
  if (dims.size() != 3) {
    throw TriggerError("trigger dims must be {channels, height, width}, got " +
                       shape_string(dims));
  }
  const std::size_t channels = dims[0], height = dims[1], width = dims[2];
  TriggerRegion region;
  region.height = ceil_count(rates.p1 * static_cast<double>(height));
  region.width = ceil_count(rates.p1 * static_cast<double>(width));
  if (region.height < 1 || region.width < 1 || region.height > height ||
      region.width > width) {
    throw TriggerError("trigger region does not fit in " + shape_string(dims));
  }
  const std::size_t masked = round_half_up(rates.p2 * static_cast<double>(region.area()));
  if (masked == 0) {
    throw TriggerError("p2 = " + std::to_string(rates.p2) + " masks no pixel of a " +
                       std::to_string(region.area()) + "-pixel region");
  }

  Rng rng(derive_seed(seed, "trigger"));
  region.row = uniform_index(rng, height - region.height + 1);
  region.col = uniform_index(rng, width - region.width + 1);

  TriggerSpec t;
  t.mask = Tensor({height, width});
  t.pattern = Tensor({channels, height, width});
  t.target_label = target_label;
  t.rates = rates;
  t.owner = owner;
  t.region = region;

  auto cells = shuffled_indices(region.area(), rng);
  cells.resize(masked);
  std::sort(cells.begin(), cells.end());
  for (std::size_t cell : cells) {
    const std::size_t r = region.row + cell / region.width;
    const std::size_t c = region.col + cell % region.width;
    t.mask[r * width + c] = 1.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      t.pattern[(ch * height + r) * width + c] = uniform01(rng);
    }
  }
  t.pattern_hash = trigger_pattern_hash(t.mask, t.pattern);
  return t;
}

enum class LabelPolicy { replace_with_target, keep_true_label };

inline LabeledImage apply_trigger(const LabeledImage& x, const TriggerSpec& t,
                                  LabelPolicy policy = LabelPolicy::replace_with_target) {
  const auto& shape = x.pixels.shape();
  if (shape.size() != 3 || t.pattern.shape() != shape || t.mask.dim(0) != shape[1] ||
      t.mask.dim(1) != shape[2]) {
    throw ShapeError("image " + shape_string(shape) + " does not match trigger " +
                     shape_string(t.pattern.shape()));
  }
  const std::size_t plane = shape[1] * shape[2];
  LabeledImage out = x;
  for (std::size_t ch = 0; ch < shape[0]; ++ch) {
    for (std::size_t k = 0; k < plane; ++k) {
      const double l = t.mask[k];
      const std::size_t i = ch * plane + k;
      out.pixels[i] = x.pixels[i] * (1.0 - l) + t.pattern[i] * l;
    }
  }
  if (policy == LabelPolicy::replace_with_target) {
    out.label = t.target_label;
    out.provenance = Provenance::attacker_poisoned;
  } else {
    out.provenance = Provenance::defender_simulated_poison;
  }
  out.soft_label.reset();
  return out;
}

// Triggers a seeded uniform choice of exactly round(p0 * n) images; the rest
// are copied untouched.
inline SubDataset poison_subdataset(const SubDataset& sub, const TriggerSpec& t,
                                    std::uint64_t seed,
                                    LabelPolicy policy = LabelPolicy::replace_with_target) {
  if (sub.empty()) throw std::invalid_argument("cannot poison an empty sub-dataset");
  const std::size_t n = sub.size();
  const std::size_t count = std::min(n, round_half_up(t.rates.p0 * static_cast<double>(n)));
  Rng rng(derive_seed(seed, "poison-select"));
  auto order = shuffled_indices(n, rng);
  std::vector<bool> selected(n, false);
  for (std::size_t i = 0; i < count; ++i) selected[order[i]] = true;

  SubDataset out;
  out.owner = sub.owner;
  out.provenance = count > 0 ? (policy == LabelPolicy::replace_with_target
                                    ? Provenance::attacker_poisoned
                                    : Provenance::defender_simulated_poison)
                             : sub.provenance;
  out.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.images.push_back(selected[i] ? apply_trigger(sub.images[i], t, policy)
                                     : sub.images[i]);
  }
  return out;
}

// Mean L2 norm of the perturbation the trigger causes on `reference`.
inline double trigger_salience(const TriggerSpec& t, const SubDataset& reference) {
  if (reference.empty()) return 0.0;
  double total = 0.0;
  for (const auto& img : reference.images) {
    const LabeledImage triggered = apply_trigger(img, t);
    double sq = 0.0;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double d = triggered.pixels[i] - img.pixels[i];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(reference.size());
}

inline constexpr double kDefaultMinSalience = 0.8;
inline constexpr std::size_t kMaxTriggerAttempts = 100;

// An attacker only ships a pattern that visibly perturbs its own data.
// Attempt k > 0 draws from derive_seed(seed, "retry", k); when no attempt
// reaches `min_salience` the most salient candidate is kept.
inline TriggerSpec generate_working_trigger(const Shape& dims, const PoisonRates& rates,
                                            std::size_t target_label, std::uint64_t seed,
                                            AgentId owner, const SubDataset& reference,
                                            double min_salience) {
  TriggerSpec best = generate_trigger(dims, rates, target_label, seed, owner);
  if (min_salience <= 0.0) return best;
  double best_salience = trigger_salience(best, reference);
  for (std::size_t k = 1; k < kMaxTriggerAttempts && best_salience < min_salience; ++k) {
    TriggerSpec t =
        generate_trigger(dims, rates, target_label, derive_seed(seed, "retry", k), owner);
    const double s = trigger_salience(t, reference);
    if (s > best_salience) {
      best = std::move(t);
      best_salience = s;
    }
  }
  return best;
}

// Test-time mode: every image triggered (poison rate 1.0), labels rewritten.
inline SubDataset trigger_all(const SubDataset& sub, const TriggerSpec& t) {
  SubDataset out;
  out.owner = sub.owner;
  out.provenance = Provenance::attacker_poisoned;
  out.images.reserve(sub.size());
  for (const auto& img : sub.images) out.images.push_back(apply_trigger(img, t));
  return out;
}

}  // namespace backfire
