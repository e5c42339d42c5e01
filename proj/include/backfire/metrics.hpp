#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "backfire/data.hpp"

namespace backfire {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalRecord {
  AgentId attacker_id = 0;
  double asr = 0.0;
  // Samples left after dropping those whose true label is the target.
  std::size_t n_eval = 0;
  // Share of triggered samples still classified as their true label.
  double robustness_acc = 0.0;
  std::optional<double> single_reference_asr;
};

inline EvalRecord compute_asr(std::span<const std::size_t> predictions,
                              std::span<const std::size_t> true_labels,
                              std::size_t target_label, AgentId attacker_id = 0) {
  if (predictions.size() != true_labels.size()) {
    throw MetricError("predictions and labels differ in length");
  }
  EvalRecord rec;
  rec.attacker_id = attacker_id;
  std::size_t hits = 0, robust = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    robust += predictions[i] == true_labels[i];
    if (true_labels[i] == target_label) continue;
    ++rec.n_eval;
    hits += predictions[i] == target_label;
  }
  if (rec.n_eval == 0) {
    throw MetricError("every sample already carries the target label; ASR undefined");
  }
  rec.asr = static_cast<double>(hits) / static_cast<double>(rec.n_eval);
  rec.robustness_acc =
      static_cast<double>(robust) / static_cast<double>(predictions.size());
  return rec;
}

inline double compute_accuracy(std::span<const std::size_t> predictions,
                               std::span<const std::size_t> true_labels) {
  if (predictions.size() != true_labels.size()) {
    throw MetricError("predictions and labels differ in length");
  }
  if (predictions.empty()) throw MetricError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    hits += predictions[i] == true_labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

struct AsrSummary {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline AsrSummary aggregate_asr(std::span<const double> asrs) {
  if (asrs.empty()) throw MetricError("no ASR records to aggregate");
  const double n = static_cast<double>(asrs.size());
  double sum = 0.0;
  for (double a : asrs) sum += a;
  const double mean = sum / n;
  double var = 0.0;
  for (double a : asrs) var += (a - mean) * (a - mean);
  return {mean, std::sqrt(var / n)};
}

inline AsrSummary aggregate_asr(std::span<const EvalRecord> records) {
  std::vector<double> asrs;
  asrs.reserve(records.size());
  for (const auto& r : records) asrs.push_back(r.asr);
  return aggregate_asr(asrs);
}

// Jensen-Shannon divergence of two discrete distributions, natural log, so
// the maximum is ln 2.
inline double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw MetricError("histograms differ in bin count");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log(q[i] / m);
  }
  return js;
}

inline std::size_t intensity_bin(double v, std::size_t bins) {
  if (!(v > 0.0)) return 0;
  const auto b = static_cast<std::size_t>(v * static_cast<double>(bins));
  return b >= bins ? bins - 1 : b;
}

// One normalized intensity histogram per pixel position (channel-major).
class PixelHistograms {
 public:
  PixelHistograms(std::size_t positions, std::size_t bins)
      : positions_(positions), bins_(bins), counts_(positions * bins, 0.0) {
    if (bins < 2) throw MetricError("histograms need at least 2 bins");
  }

  template <typename Rows>
  static PixelHistograms from_rows(const Rows& rows, std::size_t positions,
                                   std::size_t bins) {
    PixelHistograms h(positions, bins);
    for (const auto& row : rows) h.add(row);
    return h;
  }

  void add(std::span<const double> pixels) {
    if (pixels.size() != positions_) {
      throw ShapeError("image has " + std::to_string(pixels.size()) +
                       " pixels, histograms track " + std::to_string(positions_));
    }
    for (std::size_t k = 0; k < positions_; ++k) {
      counts_[k * bins_ + intensity_bin(pixels[k], bins_)] += 1.0;
    }
    ++samples_;
  }

  std::size_t positions() const { return positions_; }
  std::size_t bins() const { return bins_; }
  std::size_t samples() const { return samples_; }

  std::vector<double> distribution(std::size_t position) const {
    std::vector<double> p(counts_.begin() + static_cast<std::ptrdiff_t>(position * bins_),
                          counts_.begin() + static_cast<std::ptrdiff_t>((position + 1) * bins_));
    const double n = static_cast<double>(samples_);
    for (double& v : p) v /= n;
    return p;
  }

 private:
  std::size_t positions_;
  std::size_t bins_;
  std::vector<double> counts_;
  std::size_t samples_ = 0;
};

inline double mean_pixel_js(const PixelHistograms& a, const PixelHistograms& b) {
  if (a.positions() != b.positions() || a.bins() != b.bins()) {
    throw MetricError("histogram sets differ in shape");
  }
  if (a.samples() == 0 || b.samples() == 0) {
    throw MetricError("histogram set is empty");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < a.positions(); ++k) {
    total += js_divergence(a.distribution(k), b.distribution(k));
  }
  return total / static_cast<double>(a.positions());
}

struct DivergenceRecord {
  std::size_t label = 0;
  AgentId agent = 0;
  double divergence = 0.0;
  std::string backend = "js-pixel-histogram";
};

// Mean per-pixel JS divergence between agent j's class-Y images and the
// class-Y images of every agent in the pool (j included).
inline DivergenceRecord class_divergence(std::span<const SubDataset> pool,
                                         std::size_t label, AgentId agent,
                                         std::size_t bins = 16) {
  std::vector<std::span<const double>> own, all;
  for (const auto& sub : pool) {
    for (const auto& img : sub.images) {
      if (img.label != label) continue;
      all.push_back(img.pixels.data());
      if (sub.owner == agent) own.push_back(img.pixels.data());
    }
  }
  if (own.empty()) {
    throw MetricError("agent " + std::to_string(agent) +
                      " contributed no samples of class " + std::to_string(label));
  }
  const std::size_t positions = own.front().size();
  const auto own_h = PixelHistograms::from_rows(own, positions, bins);
  const auto all_h = PixelHistograms::from_rows(all, positions, bins);
  return {label, agent, mean_pixel_js(own_h, all_h), "js-pixel-histogram"};
}

}  // namespace backfire
