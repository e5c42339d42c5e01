#pragma once

// Minimal feed-forward classifier: dense and 3x3 convolution layers with an
// element-wise nonlinearity, softmax cross-entropy against soft or hard
// label rows, and plain minibatch SGD. Everything is double precision and
// single threaded so a training run is a pure function of its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "backfire/random.hpp"
#include "backfire/tensor.hpp"

namespace backfire {

class LabelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { relu, tanh };

inline constexpr double kLabelSumTolerance = 1e-6;

struct Architecture {
  // Per-sample input extents, e.g. {channels, height, width} or {features}.
  Shape input{1, 16, 16};
  std::vector<std::size_t> hidden{128};
  std::size_t classes = 10;
  // Prepend one valid 3x3 convolution with this many filters (0 = none).
  // Requires a {channels, height, width} input.
  std::size_t conv_filters = 0;
  Activation activation = Activation::relu;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct TrainRegimen {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("learning_rate must be a positive number");
    }
  }
};

// Weights are stored input-major ([in x out]) so the forward pass and the
// weight gradient are both contiguous row updates.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct ConvLayer {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t filters = 0;
  Tensor weight;  // [filters x channels x 3 x 3]
  Tensor bias;    // [filters]

  std::size_t out_height() const { return height - 2; }
  std::size_t out_width() const { return width - 2; }
  std::size_t out_size() const { return filters * out_height() * out_width(); }
};

using Layer = std::variant<DenseLayer, ConvLayer>;

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline std::size_t layer_out_size(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(l)>, DenseLayer>) {
          return l.out;
        } else {
          return l.out_size();
        }
      },
      layer);
}

}  // namespace detail

class Model {
 public:
  Model() = default;

  // Parameters drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static Model initialized(const Architecture& arch, std::uint64_t seed) {
    Model m = zeros(arch);
    Rng rng(derive_seed(seed, "model-init"));
    for (auto& layer : m.layers_) {
      std::visit(
          [&](auto& l) {
            std::size_t fan_in = 0;
            if constexpr (std::is_same_v<std::decay_t<decltype(l)>,
                                         DenseLayer>) {
              fan_in = l.in;
            } else {
              fan_in = l.channels * 9;
            }
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& w : l.weight.values()) w = dist(rng);
            for (double& b : l.bias.values()) b = dist(rng);
          },
          layer);
    }
    return m;
  }

  static Model zeros(const Architecture& arch) {
    if (arch.classes < 2) {
      throw std::invalid_argument("model needs at least 2 classes");
    }
    Model m;
    m.arch_ = arch;
    std::size_t width = shape_volume(arch.input);
    if (width == 0) throw std::invalid_argument("model input is empty");
    if (arch.conv_filters > 0) {
      if (arch.input.size() != 3 || arch.input[1] < 3 || arch.input[2] < 3) {
        throw std::invalid_argument(
            "convolution needs a {channels, height, width} input of at least "
            "3x3");
      }
      ConvLayer c;
      c.channels = arch.input[0];
      c.height = arch.input[1];
      c.width = arch.input[2];
      c.filters = arch.conv_filters;
      c.weight = Tensor({c.filters, c.channels, 3, 3});
      c.bias = Tensor({c.filters});
      width = c.out_size();
      m.layers_.emplace_back(std::move(c));
    }
    auto add_dense = [&](std::size_t out) {
      DenseLayer d;
      d.in = width;
      d.out = out;
      d.weight = Tensor({width, out});
      d.bias = Tensor({out});
      width = out;
      m.layers_.emplace_back(std::move(d));
    };
    for (std::size_t h : arch.hidden) add_dense(h);
    add_dense(arch.classes);
    return m;
  }

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t classes() const noexcept { return arch_.classes; }
  std::size_t input_size() const { return shape_volume(arch_.input); }

  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  // Parameter tensors in a fixed order: per layer, weight then bias.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& layer : layers_) {
      std::visit(
          [&](auto& l) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
          },
          layer);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& layer : layers_) {
      std::visit(
          [&](const auto& l) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
          },
          layer);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

 private:
  Architecture arch_;
  std::vector<Layer> layers_;
};

// Inputs plus one probability row per sample; hard labels are one-hot rows.
struct TrainingSet {
  Tensor inputs;   // [n x input_size]
  Tensor targets;  // [n x classes]

  std::size_t size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

using Gradients = std::vector<Tensor>;

namespace detail {

inline std::size_t batch_rows(const Model& model, const Tensor& batch) {
  if (batch.rank() < 2) {
    throw ShapeError("batch must have a leading batch axis, got shape " +
                     shape_string(batch.shape()));
  }
  const Shape& in = model.architecture().input;
  const Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const bool flat_ok = inner.size() == 1 && inner[0] == shape_volume(in);
  if (!flat_ok && inner != in) {
    throw ShapeError("batch sample shape " + shape_string(inner) +
                     " does not match model input " + shape_string(in));
  }
  return batch.dim(0);
}

inline void activate(Activation act, std::span<double> v) {
  if (act == Activation::relu) {
    for (double& x : v) x = x > 0.0 ? x : 0.0;
  } else {
    for (double& x : v) x = std::tanh(x);
  }
}

// dz = da * act'(z), computed from the post-activation values.
inline void activation_backward(Activation act, std::span<const double> post,
                                std::span<double> grad) {
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!(post[i] > 0.0)) grad[i] = 0.0;
    }
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      grad[i] *= 1.0 - post[i] * post[i];
    }
  }
}

inline void dense_forward(const DenseLayer& l, const double* x, double* y,
                          std::size_t rows) {
  for (std::size_t b = 0; b < rows; ++b) {
    double* yb = y + b * l.out;
    std::copy(l.bias.values().begin(), l.bias.values().end(), yb);
    const double* xb = x + b * l.in;
    for (std::size_t i = 0; i < l.in; ++i) {
      if (xb[i] != 0.0) axpy(xb[i], l.weight.values().data() + i * l.out, yb, l.out);
    }
  }
}

inline void dense_backward(const DenseLayer& l, const double* x,
                           const double* dy, std::size_t rows, Tensor& dw,
                           Tensor& db, double* dx) {
  for (std::size_t b = 0; b < rows; ++b) {
    const double* xb = x + b * l.in;
    const double* dyb = dy + b * l.out;
    axpy(1.0, dyb, db.values().data(), l.out);
    for (std::size_t i = 0; i < l.in; ++i) {
      if (xb[i] != 0.0) axpy(xb[i], dyb, dw.values().data() + i * l.out, l.out);
    }
    if (dx != nullptr) {
      double* dxb = dx + b * l.in;
      for (std::size_t i = 0; i < l.in; ++i) {
        dxb[i] = dot(l.weight.values().data() + i * l.out, dyb, l.out);
      }
    }
  }
}

inline void conv_forward(const ConvLayer& l, const double* x, double* y,
                         std::size_t rows) {
  const std::size_t oh = l.out_height(), ow = l.out_width();
  const std::size_t in_size = l.channels * l.height * l.width;
  const double* w = l.weight.values().data();
  for (std::size_t b = 0; b < rows; ++b) {
    const double* xb = x + b * in_size;
    double* yb = y + b * l.out_size();
    for (std::size_t f = 0; f < l.filters; ++f) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          double s = l.bias[f];
          for (std::size_t ch = 0; ch < l.channels; ++ch) {
            const double* wk = w + (f * l.channels + ch) * 9;
            const double* xc = xb + ch * l.height * l.width;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const double* xr = xc + (r + ky) * l.width + c;
              s += wk[ky * 3] * xr[0] + wk[ky * 3 + 1] * xr[1] +
                   wk[ky * 3 + 2] * xr[2];
            }
          }
          yb[(f * oh + r) * ow + c] = s;
        }
      }
    }
  }
}

inline void conv_backward(const ConvLayer& l, const double* x,
                          const double* dy, std::size_t rows, Tensor& dw,
                          Tensor& db, double* dx) {
  const std::size_t oh = l.out_height(), ow = l.out_width();
  const std::size_t in_size = l.channels * l.height * l.width;
  const double* w = l.weight.values().data();
  double* gw = dw.values().data();
  if (dx != nullptr) std::fill(dx, dx + rows * in_size, 0.0);
  for (std::size_t b = 0; b < rows; ++b) {
    const double* xb = x + b * in_size;
    const double* dyb = dy + b * l.out_size();
    double* dxb = dx != nullptr ? dx + b * in_size : nullptr;
    for (std::size_t f = 0; f < l.filters; ++f) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const double g = dyb[(f * oh + r) * ow + c];
          if (g == 0.0) continue;
          db[f] += g;
          for (std::size_t ch = 0; ch < l.channels; ++ch) {
            const std::size_t k0 = (f * l.channels + ch) * 9;
            const std::size_t plane = ch * l.height * l.width;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::size_t xi = plane + (r + ky) * l.width + c + kx;
                gw[k0 + ky * 3 + kx] += g * xb[xi];
                if (dxb != nullptr) dxb[xi] += g * w[k0 + ky * 3 + kx];
              }
            }
          }
        }
      }
    }
  }
}

// Per-layer post-activation outputs for one batch; outputs[0] is the input.
struct ForwardCache {
  std::vector<std::vector<double>> outputs;
};

inline void forward_cached(const Model& model, std::span<const double> input,
                           std::size_t rows, ForwardCache& cache) {
  const auto& layers = model.layers();
  cache.outputs.resize(layers.size() + 1);
  cache.outputs[0].assign(input.begin(), input.end());
  for (std::size_t k = 0; k < layers.size(); ++k) {
    auto& out = cache.outputs[k + 1];
    out.resize(rows * layer_out_size(layers[k]));
    const double* x = cache.outputs[k].data();
    std::visit(
        [&](const auto& l) {
          if constexpr (std::is_same_v<std::decay_t<decltype(l)>, DenseLayer>) {
            dense_forward(l, x, out.data(), rows);
          } else {
            conv_forward(l, x, out.data(), rows);
          }
        },
        layers[k]);
    if (k + 1 < layers.size()) activate(model.architecture().activation, out);
  }
}

inline void backward_cached(const Model& model, const ForwardCache& cache,
                            std::vector<double> grad, std::size_t rows,
                            Gradients& grads) {
  const auto& layers = model.layers();
  std::vector<double> next;
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) {
      activation_backward(model.architecture().activation,
                          cache.outputs[k + 1], grad);
    }
    const double* x = cache.outputs[k].data();
    double* dx = nullptr;
    if (k > 0) {
      next.assign(cache.outputs[k].size(), 0.0);
      dx = next.data();
    }
    Tensor& dw = grads[2 * k];
    Tensor& db = grads[2 * k + 1];
    std::visit(
        [&](const auto& l) {
          if constexpr (std::is_same_v<std::decay_t<decltype(l)>, DenseLayer>) {
            dense_backward(l, x, grad.data(), rows, dw, db, dx);
          } else {
            conv_backward(l, x, grad.data(), rows, dw, db, dx);
          }
        },
        layers[k]);
    if (k > 0) grad.swap(next);
  }
}

inline Gradients zero_gradients(const Model& model) {
  Gradients g;
  for (const Tensor* p : model.parameters()) g.emplace_back(p->shape());
  return g;
}

inline void check_label_rows(const Tensor& labels, std::size_t rows,
                             std::size_t classes) {
  if (labels.rank() != 2 || labels.dim(0) != rows || labels.dim(1) != classes) {
    throw ShapeError("label matrix shape " + shape_string(labels.shape()) +
                     " does not match [" + std::to_string(rows) + "x" +
                     std::to_string(classes) + "]");
  }
  for (std::size_t b = 0; b < rows; ++b) {
    double sum = 0.0;
    for (double v : labels.row(b)) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw LabelError("label row " + std::to_string(b) +
                         " has a negative or non-finite entry");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > kLabelSumTolerance) {
      throw LabelError("label row " + std::to_string(b) + " sums to " +
                       std::to_string(sum) + ", expected 1");
    }
  }
}

// Mean cross-entropy over the batch; overwrites `logits` with the gradient of
// that mean with respect to the logits.
inline double softmax_xent_inplace(std::span<double> logits,
                                   std::span<const double> targets,
                                   std::size_t rows, std::size_t classes) {
  double total = 0.0;
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t b = 0; b < rows; ++b) {
    double* z = logits.data() + b * classes;
    const double* y = targets.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      const double log_p = z[c] - zmax - log_denom;
      if (y[c] != 0.0) total -= y[c] * log_p;
      z[c] = (std::exp(log_p) - y[c]) * inv_rows;
    }
  }
  return total * inv_rows;
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double zmax = *std::max_element(p.begin(), p.end());
  double denom = 0.0;
  for (double& v : p) {
    v = std::exp(v - zmax);
    denom += v;
  }
  for (double& v : p) v /= denom;
  return p;
}

// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

// Logits of shape [B x C].
inline Tensor forward(const Model& model, const Tensor& batch) {
  const std::size_t rows = detail::batch_rows(model, batch);
  detail::ForwardCache cache;
  detail::forward_cached(model, batch.data(), rows, cache);
  return Tensor({rows, model.classes()}, std::move(cache.outputs.back()));
}

inline std::vector<std::size_t> predict(const Model& model,
                                        const Tensor& batch) {
  const Tensor logits = forward(model, batch);
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = argmax(logits.row(b));
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;  // same order and shapes as Model::parameters()
};

inline LossAndGrad loss_and_grad(const Model& model, const Tensor& batch,
                                 const Tensor& labels) {
  const std::size_t rows = detail::batch_rows(model, batch);
  if (rows == 0) throw ShapeError("empty batch");
  detail::check_label_rows(labels, rows, model.classes());
  detail::ForwardCache cache;
  detail::forward_cached(model, batch.data(), rows, cache);
  std::vector<double> grad = cache.outputs.back();
  LossAndGrad out;
  out.loss = detail::softmax_xent_inplace(grad, labels.data(), rows,
                                          model.classes());
  out.grads = detail::zero_gradients(model);
  detail::backward_cached(model, cache, std::move(grad), rows, out.grads);
  return out;
}

struct TrainHistory {
  // Mean minibatch loss per epoch, measured during the epoch.
  std::vector<double> epoch_loss;
};

inline Model train(Model model, const TrainingSet& data,
                   const TrainRegimen& regimen,
                   TrainHistory* history = nullptr) {
  regimen.validate();
  const std::size_t n = data.size();
  if (n == 0) throw std::invalid_argument("cannot train on an empty dataset");
  const std::size_t width = model.input_size();
  const std::size_t classes = model.classes();
  if (data.inputs.size() != n * width) {
    throw ShapeError("training inputs " + shape_string(data.inputs.shape()) +
                     " do not match model input width " +
                     std::to_string(width));
  }
  detail::check_label_rows(data.targets, n, classes);

  Rng rng(regimen.shuffle_seed);
  auto order = iota_indices(n);
  auto params = model.parameters();
  Gradients grads = detail::zero_gradients(model);
  detail::ForwardCache cache;
  std::vector<double> xbatch, ybatch, grad;
  if (history != nullptr) history->epoch_loss.clear();

  for (std::size_t epoch = 0; epoch < regimen.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += regimen.batch_size) {
      const std::size_t rows = std::min(regimen.batch_size, n - start);
      xbatch.resize(rows * width);
      ybatch.resize(rows * classes);
      for (std::size_t r = 0; r < rows; ++r) {
        const auto xs = data.inputs.row(order[start + r]);
        const auto ys = data.targets.row(order[start + r]);
        std::copy(xs.begin(), xs.end(), xbatch.begin() + r * width);
        std::copy(ys.begin(), ys.end(), ybatch.begin() + r * classes);
      }
      detail::forward_cached(model, xbatch, rows, cache);
      grad = cache.outputs.back();
      loss_sum += detail::softmax_xent_inplace(grad, ybatch, rows, classes);
      ++batches;
      for (Tensor& g : grads) g.fill(0.0);
      detail::backward_cached(model, cache, std::move(grad), rows, grads);
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k]->data();
        const auto g = grads[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
          p[i] -= regimen.learning_rate * g[i];
        }
      }
    }
    if (history != nullptr) {
      history->epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
  }
  return model;
}

// Predictions for a [n x input] matrix, evaluated in chunks.
inline std::vector<std::size_t> predict_rows(const Model& model,
                                             const Tensor& inputs,
                                             std::size_t chunk = 256) {
  const std::size_t n = inputs.empty() ? 0 : inputs.dim(0);
  const std::size_t width = model.input_size();
  if (n > 0 && inputs.size() != n * width) {
    throw ShapeError("inputs " + shape_string(inputs.shape()) +
                     " do not match model input width " +
                     std::to_string(width));
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  detail::ForwardCache cache;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t rows = std::min(chunk, n - start);
    detail::forward_cached(
        model, inputs.data().subspan(start * width, rows * width), rows, cache);
    const auto& logits = cache.outputs.back();
    for (std::size_t r = 0; r < rows; ++r) {
      out.push_back(argmax(std::span<const double>(
          logits.data() + r * model.classes(), model.classes())));
    }
  }
  return out;
}

}  // namespace backfire
