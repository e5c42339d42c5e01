#pragma once

// Distribution similarity between an inference-time batch and contributed
// sub-datasets, on flattened pixels. Higher means more similar: the MMD
// backend returns -MMD^2 and the JS backend returns -JS.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "backfire/data.hpp"
#include "backfire/metrics.hpp"
#include "backfire/random.hpp"

namespace backfire {

enum class SimilarityBackend { mmd, js, spectral_signature, activation_clustering };

inline std::string_view to_string(SimilarityBackend b) {
  switch (b) {
    case SimilarityBackend::mmd: return "mmd";
    case SimilarityBackend::js: return "js";
    case SimilarityBackend::spectral_signature: return "spectral_signature";
    case SimilarityBackend::activation_clustering: return "activation_clustering";
  }
  return "?";
}

inline SimilarityBackend similarity_backend_from_string(std::string_view s) {
  for (auto b : {SimilarityBackend::mmd, SimilarityBackend::js,
                 SimilarityBackend::spectral_signature,
                 SimilarityBackend::activation_clustering}) {
    if (to_string(b) == s) return b;
  }
  throw std::invalid_argument("unknown similarity backend '" + std::string(s) + "'");
}

class UnimplementedBackend : public std::logic_error {
 public:
  explicit UnimplementedBackend(SimilarityBackend b)
      : std::logic_error("similarity backend '" + std::string(to_string(b)) +
                         "' is not implemented") {}
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline void check_batches(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("similarity batches must be [n x d] with equal d, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  if (a.dim(0) == 0 || b.dim(0) == 0) {
    throw std::invalid_argument("similarity batches must be nonempty");
  }
}

inline void check_bandwidth(double bandwidth) {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("MMD bandwidth must be positive");
  }
}

// Sum of RBF kernel values over all (i, j) pairs, or only i != j when
// `within` is set (then a and b are the same batch).
inline double kernel_sum(const Tensor& a, const Tensor& b, double bandwidth, bool within) {
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  double sum = 0.0;
  if (within) {
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      for (std::size_t j = i + 1; j < a.dim(0); ++j) {
        sum += 2.0 * std::exp(-gamma * squared_distance(a.row(i), a.row(j)));
      }
    }
    return sum;
  }
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(0); ++j) {
      sum += std::exp(-gamma * squared_distance(a.row(i), b.row(j)));
    }
  }
  return sum;
}

}  // namespace detail

// Biased (V-statistic) squared MMD with an RBF kernel of width `bandwidth`.
inline double mmd2_biased(const Tensor& a, const Tensor& b, double bandwidth) {
  detail::check_batches(a, b);
  detail::check_bandwidth(bandwidth);
  const double m = static_cast<double>(a.dim(0)), n = static_cast<double>(b.dim(0));
  const double kaa = detail::kernel_sum(a, a, bandwidth, false);
  const double kbb = detail::kernel_sum(b, b, bandwidth, false);
  const double kab = detail::kernel_sum(a, b, bandwidth, false);
  return kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n);
}

// Unbiased (U-statistic) squared MMD; needs at least two samples per batch.
inline double mmd2_unbiased(const Tensor& a, const Tensor& b, double bandwidth) {
  detail::check_batches(a, b);
  detail::check_bandwidth(bandwidth);
  if (a.dim(0) < 2 || b.dim(0) < 2) {
    throw std::invalid_argument("unbiased MMD needs at least two samples per batch");
  }
  const double m = static_cast<double>(a.dim(0)), n = static_cast<double>(b.dim(0));
  const double kaa = detail::kernel_sum(a, a, bandwidth, true);
  const double kbb = detail::kernel_sum(b, b, bandwidth, true);
  const double kab = detail::kernel_sum(a, b, bandwidth, false);
  return kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n);
}

inline double similarity_mmd(const Tensor& a, const Tensor& b, double bandwidth) {
  return -mmd2_unbiased(a, b, bandwidth);
}

inline double similarity_js(const Tensor& a, const Tensor& b, std::size_t bins) {
  detail::check_batches(a, b);
  if (bins < 2) throw std::invalid_argument("JS similarity needs at least 2 bins");
  std::vector<std::span<const double>> ra, rb;
  for (std::size_t i = 0; i < a.dim(0); ++i) ra.push_back(a.row(i));
  for (std::size_t i = 0; i < b.dim(0); ++i) rb.push_back(b.row(i));
  const auto ha = PixelHistograms::from_rows(ra, a.dim(1), bins);
  const auto hb = PixelHistograms::from_rows(rb, b.dim(1), bins);
  return -mean_pixel_js(ha, hb);
}

// Median pairwise Euclidean distance over at most `max_samples` rows drawn
// without replacement.
inline double median_bandwidth(const Tensor& rows, std::uint64_t seed,
                               std::size_t max_samples = 200) {
  if (rows.rank() != 2 || rows.dim(0) < 2) {
    throw std::invalid_argument("median heuristic needs at least two rows");
  }
  Rng rng(derive_seed(seed, "median-bandwidth"));
  auto order = shuffled_indices(rows.dim(0), rng);
  order.resize(std::min(order.size(), max_samples));
  std::vector<double> dists;
  dists.reserve(order.size() * (order.size() - 1) / 2);
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      dists.push_back(std::sqrt(detail::squared_distance(rows.row(order[i]), rows.row(order[j]))));
    }
  }
  auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  const double med = *mid;
  return med > 0.0 ? med : 1.0;
}

struct SimilarityReport {
  std::map<AgentId, double> scores;
  AgentId selected = 0;
  std::string backend;
  // Set when the query could not be routed to a leave-one-out model.
  bool fallback_to_full = false;
  std::string warning;
};

// Reference statistics for every contributed sub-dataset, computed once so
// each query costs one pass over the references.
class SimilarityIndex {
 public:
  SimilarityIndex(std::span<const SubDataset> pool, SimilarityBackend backend,
                  std::size_t bins = 16, std::optional<double> bandwidth = std::nullopt,
                  std::uint64_t seed = 0)
      : backend_(backend), bins_(bins) {
    if (backend != SimilarityBackend::mmd && backend != SimilarityBackend::js) {
      throw UnimplementedBackend(backend);
    }
    if (bins < 2) throw std::invalid_argument("JS similarity needs at least 2 bins");
    std::vector<const LabeledImage*> everything;
    for (const auto& sub : pool) {
      if (sub.empty()) continue;
      Reference ref;
      ref.owner = sub.owner;
      ref.rows = stack_pixels(sub.images);
      refs_.push_back(std::move(ref));
      for (const auto& img : sub.images) everything.push_back(&img);
    }
    if (refs_.empty()) throw std::invalid_argument("similarity index over an empty pool");
    std::sort(refs_.begin(), refs_.end(),
              [](const Reference& a, const Reference& b) { return a.owner < b.owner; });
    // Merge sub-datasets that share an owner.
    std::vector<Reference> merged;
    for (auto& r : refs_) {
      if (!merged.empty() && merged.back().owner == r.owner) {
        const Tensor& prev = merged.back().rows;
        std::vector<double> data(prev.values());
        data.insert(data.end(), r.rows.values().begin(), r.rows.values().end());
        merged.back().rows = Tensor({prev.dim(0) + r.rows.dim(0), prev.dim(1)}, std::move(data));
      } else {
        merged.push_back(std::move(r));
      }
    }
    refs_ = std::move(merged);

    if (backend_ == SimilarityBackend::mmd) {
      if (bandwidth) {
        detail::check_bandwidth(*bandwidth);
        bandwidth_ = *bandwidth;
      } else {
        std::vector<LabeledImage> sample;
        for (const auto* img : everything) sample.push_back(*img);
        bandwidth_ = median_bandwidth(stack_pixels(sample), seed);
      }
      for (auto& r : refs_) {
        const double n = static_cast<double>(r.rows.dim(0));
        r.self_term = r.rows.dim(0) < 2
                          ? 0.0
                          : detail::kernel_sum(r.rows, r.rows, bandwidth_, true) / (n * (n - 1.0));
      }
    } else {
      // Histogram JS shrinks as the reference grows, so a large sub-dataset
      // would win on sample size alone. Every reference is scored on a seeded
      // subsample the size of the smallest one.
      std::size_t common = refs_.front().rows.dim(0);
      for (const auto& r : refs_) common = std::min(common, r.rows.dim(0));
      Rng rng(derive_seed(seed, "js-reference"));
      for (auto& r : refs_) {
        std::vector<std::size_t> keep = shuffled_indices(r.rows.dim(0), rng);
        keep.resize(common);
        std::sort(keep.begin(), keep.end());
        std::vector<std::span<const double>> rows;
        for (std::size_t i : keep) rows.push_back(r.rows.row(i));
        r.hist.emplace(PixelHistograms::from_rows(rows, r.rows.dim(1), bins_));
      }
    }
  }

  SimilarityBackend backend() const { return backend_; }
  double bandwidth() const { return bandwidth_; }

  // Scores every reference against the query; ties go to the lowest owner.
  SimilarityReport score(const Tensor& query) const {
    SimilarityReport rep;
    rep.backend = std::string(to_string(backend_));
    double best = -std::numeric_limits<double>::infinity();
    bool first = true;
    std::optional<PixelHistograms> qh;
    double q_self = 0.0;
    if (backend_ == SimilarityBackend::js) {
      std::vector<std::span<const double>> rows;
      for (std::size_t i = 0; i < query.dim(0); ++i) rows.push_back(query.row(i));
      qh.emplace(PixelHistograms::from_rows(rows, query.dim(1), bins_));
    } else {
      if (query.dim(0) < 2) {
        throw std::invalid_argument("MMD routing needs at least two query samples");
      }
      const double m = static_cast<double>(query.dim(0));
      q_self = detail::kernel_sum(query, query, bandwidth_, true) / (m * (m - 1.0));
    }
    for (const auto& r : refs_) {
      detail::check_batches(query, r.rows);
      double s = 0.0;
      if (backend_ == SimilarityBackend::js) {
        s = -mean_pixel_js(*qh, *r.hist);
      } else {
        const double m = static_cast<double>(query.dim(0));
        const double n = static_cast<double>(r.rows.dim(0));
        const double cross = detail::kernel_sum(query, r.rows, bandwidth_, false) / (m * n);
        s = -(q_self + r.self_term - 2.0 * cross);
      }
      rep.scores[r.owner] = s;
      if (first || s > best) {
        best = s;
        rep.selected = r.owner;
        first = false;
      }
    }
    return rep;
  }

 private:
  struct Reference {
    AgentId owner = 0;
    Tensor rows;
    double self_term = 0.0;
    std::optional<PixelHistograms> hist;
  };

  SimilarityBackend backend_;
  std::size_t bins_;
  double bandwidth_ = 0.0;
  std::vector<Reference> refs_;
};

}  // namespace backfire
