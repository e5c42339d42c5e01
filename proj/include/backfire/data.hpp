#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "backfire/nn.hpp"
#include "backfire/random.hpp"
#include "backfire/tensor.hpp"

namespace backfire {

using AgentId = std::uint32_t;
inline constexpr AgentId kDefender = 0;

enum class Provenance { clean, attacker_poisoned, defender_simulated_poison };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::attacker_poisoned: return "attacker-poisoned";
    case Provenance::defender_simulated_poison: return "defender-simulated-poison";
  }
  return "?";
}

struct LabeledImage {
  Tensor pixels;  // [channels x height x width], values in [0, 1]
  std::size_t label = 0;
  Provenance provenance = Provenance::clean;
  // Set by mixing augmentations; a probability row over the classes that
  // replaces the one-hot label during training.
  std::optional<std::vector<double>> soft_label;
};

struct SubDataset {
  std::vector<LabeledImage> images;
  AgentId owner = kDefender;
  Provenance provenance = Provenance::clean;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
};

enum class DatasetKind { synthetic, mnist_idx };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::size_t classes = 10;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t samples_per_class = 200;
  double noise = 0.05;
  // Pixels per image overwritten with a uniform random intensity at a uniform
  // random position. Part of the noise model: ignored when noise == 0.
  std::size_t distractors = 8;
  std::uint64_t seed = 0;
  // mnist_idx only.
  std::string images_path;
  std::string labels_path;

  Shape image_shape() const { return {channels, height, width}; }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("dataset.classes must be >= 2");
    if (height < 8 || width < 8) {
      throw std::invalid_argument("dataset height and width must be >= 8");
    }
    if (channels < 1) throw std::invalid_argument("dataset.channels must be >= 1");
    if (kind == DatasetKind::synthetic) {
      if (samples_per_class < 1) {
        throw std::invalid_argument("dataset.samples_per_class must be >= 1");
      }
      if (!(noise >= 0.0) || !std::isfinite(noise)) {
        throw std::invalid_argument("dataset.noise must be >= 0");
      }
    } else if (images_path.empty() || labels_path.empty()) {
      throw std::invalid_argument(
          "mnist-idx datasets need images_path and labels_path");
    }
  }
};

// 64-bit FNV-1a over the raw pixel bytes and the label.
inline std::uint64_t image_hash(const LabeledImage& img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix(img.pixels.values().data(), img.pixels.size() * sizeof(double));
  const std::uint64_t label = img.label;
  mix(&label, sizeof label);
  return h;
}

namespace detail {

// Lit grid cells and block intensities for one class. Depends only on the
// class index and image geometry, never on the generation seed, so every
// agent samples from the same class-conditional distribution.
struct ClassPattern {
  Tensor base;  // [channels x height x width]
};

inline std::vector<ClassPattern> class_patterns(const DatasetSpec& spec) {
  const std::size_t cell = std::max<std::size_t>(2, std::min(spec.height, spec.width) / 4);
  const std::size_t grid_rows = spec.height / cell;
  const std::size_t grid_cols = spec.width / cell;
  const std::size_t cells = grid_rows * grid_cols;
  const std::size_t lit = std::max<std::size_t>(2, cells / 3);
  const std::size_t block = std::max<std::size_t>(1, cell - 1);

  std::set<std::vector<std::size_t>> used;
  std::vector<ClassPattern> out;
  out.reserve(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(0x5eedc1a55ULL ^ (spec.height << 16) ^ spec.width,
                        "class-pattern", c));
    std::vector<std::size_t> chosen;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) {
        throw std::invalid_argument(
            "image too small to give every class a distinct pattern");
      }
      auto order = shuffled_indices(cells, rng);
      chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(lit));
      std::sort(chosen.begin(), chosen.end());
      if (used.insert(chosen).second) break;
    }
    Tensor base(spec.image_shape());
    const std::size_t plane = spec.height * spec.width;
    for (std::size_t id : chosen) {
      const std::size_t r0 = (id / grid_cols) * cell + uniform_index(rng, cell - block + 1);
      const std::size_t c0 = (id % grid_cols) * cell + uniform_index(rng, cell - block + 1);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        const double level = 0.6 + 0.4 * uniform01(rng);
        for (std::size_t r = r0; r < r0 + block; ++r) {
          for (std::size_t q = c0; q < c0 + block; ++q) {
            base[ch * plane + r * spec.width + q] = level;
          }
        }
      }
    }
    out.push_back({std::move(base)});
  }
  return out;
}

inline LabeledImage render(const ClassPattern& pattern, std::size_t label,
                           double noise, std::size_t distractors, Rng& rng) {
  LabeledImage img{pattern.base, label, Provenance::clean, std::nullopt};
  if (noise > 0.0) {
    // Sparse part of the noise model: stray pixels, so clean images are not
    // perfectly dark off-pattern.
    for (std::size_t i = 0; i < distractors; ++i) {
      const std::size_t pos = uniform_index(rng, img.pixels.size());
      img.pixels[pos] = uniform01(rng);
    }
    std::normal_distribution<double> gauss(0.0, noise);
    for (double& v : img.pixels.values()) v = std::clamp(v + gauss(rng), 0.0, 1.0);
  }
  return img;
}

}  // namespace detail

// samples_per_class images of every class, grouped by class.
inline SubDataset generate_synthetic(const DatasetSpec& spec) {
  spec.validate();
  if (spec.kind != DatasetKind::synthetic) {
    throw std::invalid_argument("generate_synthetic needs a synthetic spec");
  }
  const auto patterns = detail::class_patterns(spec);
  Rng rng(derive_seed(spec.seed, "synthetic-noise"));
  SubDataset out;
  out.images.reserve(spec.classes * spec.samples_per_class);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      out.images.push_back(detail::render(patterns[c], c, spec.noise, spec.distractors, rng));
    }
  }
  return out;
}

// `count` synthetic images with class-balanced labels in seeded order.
inline SubDataset draw_synthetic(const DatasetSpec& spec, std::size_t count,
                                 std::uint64_t seed) {
  spec.validate();
  const auto patterns = detail::class_patterns(spec);
  Rng rng(derive_seed(seed, "synthetic-draw"));
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = i % spec.classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  SubDataset out;
  out.images.reserve(count);
  for (std::size_t label : labels) {
    out.images.push_back(detail::render(patterns[label], label, spec.noise, spec.distractors, rng));
  }
  return out;
}

// Seeded shuffle, then prefix split. The first part holds
// round_half_up(fraction * n) images.
inline std::pair<SubDataset, SubDataset> split(const SubDataset& sub,
                                               double fraction,
                                               std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split fraction must lie in (0, 1)");
  }
  const std::size_t n = sub.size();
  const std::size_t first = round_half_up(fraction * static_cast<double>(n));
  if (first == 0 || first >= n) {
    throw std::invalid_argument("split of " + std::to_string(n) +
                                " images at fraction " + std::to_string(fraction) +
                                " leaves an empty part");
  }
  Rng rng(derive_seed(seed, "split"));
  const auto order = shuffled_indices(n, rng);
  std::pair<SubDataset, SubDataset> parts;
  for (auto* part : {&parts.first, &parts.second}) {
    part->owner = sub.owner;
    part->provenance = sub.provenance;
  }
  parts.first.images.reserve(first);
  parts.second.images.reserve(n - first);
  for (std::size_t i = 0; i < n; ++i) {
    (i < first ? parts.first : parts.second).images.push_back(sub.images[order[i]]);
  }
  return parts;
}

// Flattened inputs and label rows for a list of sub-datasets.
inline TrainingSet to_training_set(std::span<const SubDataset* const> subs,
                                   std::size_t classes) {
  std::size_t n = 0, width = 0;
  for (const SubDataset* s : subs) {
    n += s->size();
    if (!s->empty() && width == 0) width = s->images.front().pixels.size();
  }
  TrainingSet ts{Tensor({n, width}), Tensor({n, classes})};
  std::size_t row = 0;
  for (const SubDataset* s : subs) {
    for (const LabeledImage& img : s->images) {
      if (img.pixels.size() != width) {
        throw ShapeError("images in a training set must share dimensions");
      }
      if (img.label >= classes) {
        throw std::invalid_argument("label " + std::to_string(img.label) +
                                    " outside [0, " + std::to_string(classes) + ")");
      }
      std::copy(img.pixels.values().begin(), img.pixels.values().end(),
                ts.inputs.row(row).begin());
      auto target = ts.targets.row(row);
      if (img.soft_label) {
        std::copy(img.soft_label->begin(), img.soft_label->end(), target.begin());
      } else {
        target[img.label] = 1.0;
      }
      ++row;
    }
  }
  return ts;
}

inline TrainingSet to_training_set(const SubDataset& sub, std::size_t classes) {
  const SubDataset* one[] = {&sub};
  return to_training_set(one, classes);
}

// [n x pixels] matrix of the images, in order.
inline Tensor stack_pixels(std::span<const LabeledImage> images) {
  const std::size_t width = images.empty() ? 0 : images.front().pixels.size();
  Tensor out({images.size(), width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::copy(images[i].pixels.values().begin(), images[i].pixels.values().end(),
              out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX (LeCun MNIST distribution format): big-endian int32 magic, dimension
// counts, then unsigned bytes.

enum class IdxErrorKind { open_failed, bad_magic, truncated, count_mismatch, write_failed };

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  IdxErrorKind kind() const noexcept { return kind_; }

 private:
  IdxErrorKind kind_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::open_failed, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf,
                               std::size_t offset, const std::string& path) {
  if (buf.size() < offset + 4) {
    throw IdxError(IdxErrorKind::truncated, path + ": truncated header");
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(static_cast<std::uint8_t>(v >> 24));
  buf.push_back(static_cast<std::uint8_t>(v >> 16));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
  buf.push_back(static_cast<std::uint8_t>(v));
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IdxError(IdxErrorKind::write_failed, "cannot write " + path);
}

inline void check_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want) {
    char msg[96];
    std::snprintf(msg, sizeof msg, ": magic number 0x%08x, expected 0x%08x", got, want);
    throw IdxError(IdxErrorKind::bad_magic, path + msg);
  }
}

}  // namespace detail

inline IdxImages read_idx_images(const std::string& path) {
  const auto buf = detail::read_file(path);
  detail::check_magic(detail::read_be32(buf, 0, path), kIdxImagesMagic, path);
  IdxImages out;
  out.count = detail::read_be32(buf, 4, path);
  out.rows = detail::read_be32(buf, 8, path);
  out.cols = detail::read_be32(buf, 12, path);
  const std::size_t payload = std::size_t{out.count} * out.rows * out.cols;
  if (buf.size() < 16 + payload) {
    throw IdxError(IdxErrorKind::truncated,
                   path + ": expected " + std::to_string(payload) +
                       " pixel bytes, found " + std::to_string(buf.size() - 16));
  }
  out.pixels.assign(buf.begin() + 16, buf.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return out;
}

inline std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  const auto buf = detail::read_file(path);
  detail::check_magic(detail::read_be32(buf, 0, path), kIdxLabelsMagic, path);
  const std::size_t count = detail::read_be32(buf, 4, path);
  if (buf.size() < 8 + count) {
    throw IdxError(IdxErrorKind::truncated,
                   path + ": expected " + std::to_string(count) +
                       " label bytes, found " + std::to_string(buf.size() - 8));
  }
  return {buf.begin() + 8, buf.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline void write_idx_images(const std::string& path, const IdxImages& images) {
  std::vector<std::uint8_t> buf;
  buf.reserve(16 + images.pixels.size());
  detail::put_be32(buf, kIdxImagesMagic);
  detail::put_be32(buf, images.count);
  detail::put_be32(buf, images.rows);
  detail::put_be32(buf, images.cols);
  buf.insert(buf.end(), images.pixels.begin(), images.pixels.end());
  detail::write_file(path, buf);
}

inline void write_idx_labels(const std::string& path,
                             std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> buf;
  buf.reserve(8 + labels.size());
  detail::put_be32(buf, kIdxLabelsMagic);
  detail::put_be32(buf, static_cast<std::uint32_t>(labels.size()));
  buf.insert(buf.end(), labels.begin(), labels.end());
  detail::write_file(path, buf);
}

// Single-channel images scaled to [0, 1] by /255.
inline SubDataset load_idx(const std::string& images_path,
                           const std::string& labels_path) {
  const IdxImages images = read_idx_images(images_path);
  const auto labels = read_idx_labels(labels_path);
  if (labels.size() != images.count) {
    throw IdxError(IdxErrorKind::count_mismatch,
                   images_path + " holds " + std::to_string(images.count) +
                       " images but " + labels_path + " holds " +
                       std::to_string(labels.size()) + " labels");
  }
  const std::size_t plane = std::size_t{images.rows} * images.cols;
  SubDataset out;
  out.images.reserve(images.count);
  for (std::size_t i = 0; i < images.count; ++i) {
    Tensor px({1, images.rows, images.cols});
    for (std::size_t k = 0; k < plane; ++k) {
      px[k] = static_cast<double>(images.pixels[i * plane + k]) / 255.0;
    }
    out.images.push_back({std::move(px), labels[i], Provenance::clean, std::nullopt});
  }
  return out;
}

// Inverse of load_idx for single-channel images with labels < 256.
inline void save_idx(const SubDataset& sub, const std::string& images_path,
                     const std::string& labels_path) {
  IdxImages images;
  images.count = static_cast<std::uint32_t>(sub.size());
  if (!sub.empty()) {
    const auto& shape = sub.images.front().pixels.shape();
    if (shape.size() != 3 || shape[0] != 1) {
      throw ShapeError("IDX export needs 1 x H x W images");
    }
    images.rows = static_cast<std::uint32_t>(shape[1]);
    images.cols = static_cast<std::uint32_t>(shape[2]);
  }
  std::vector<std::uint8_t> labels;
  for (const auto& img : sub.images) {
    for (double v : img.pixels.values()) {
      images.pixels.push_back(
          static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
    if (img.label > 255) throw std::invalid_argument("IDX labels must be < 256");
    labels.push_back(static_cast<std::uint8_t>(img.label));
  }
  write_idx_images(images_path, images);
  write_idx_labels(labels_path, labels);
}

}  // namespace backfire
