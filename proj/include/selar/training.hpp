#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "selar/dataset.hpp"
#include "selar/error.hpp"
#include "selar/model.hpp"
#include "selar/parallel.hpp"
#include "selar/tensor.hpp"

namespace selar {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double decay_factor = 0.1;
  std::size_t decay_epoch = 15;  // decay applied once, after this epoch
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double weight_init_scale = 1.0;
  std::size_t threads = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) {
      throw ValidationError("momentum must be in [0, 1)");
    }
    if (!(decay_factor > 0 && decay_factor <= 1)) {
      throw ValidationError("decay_factor must be in (0, 1]");
    }
    if (decay_epoch < 1) throw ValidationError("decay_epoch must be >= 1");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(weight_init_scale > 0)) {
      throw ValidationError("weight_init_scale must be > 0");
    }
  }

  double learning_rate_at(std::size_t epoch) const {
    return epoch > decay_epoch ? learning_rate * decay_factor : learning_rate;
  }
};

/// Architecture choices for a freshly initialized model.
struct ModelOptions {
  Aggregation aggregation = Aggregation::Gmp;
  Space space = Space::Attribute;
  bool use_bias = false;
};

template <class T>
struct GradientSet {
  BasicTensor<T> d_weights;
  std::optional<std::vector<T>> d_bias;

  static GradientSet zeros_like(const auto& model) {
    GradientSet g{BasicTensor<T>(model.weights.shape()), std::nullopt};
    if (model.bias) g.d_bias = std::vector<T>(model.bias->size(), T{});
    return g;
  }

  template <class U>
  GradientSet<U> cast() const {
    GradientSet<U> out{d_weights.template cast<U>(), std::nullopt};
    if (d_bias) out.d_bias = std::vector<U>(d_bias->begin(), d_bias->end());
    return out;
  }

  void add(const GradientSet& other) {
    auto dst = d_weights.mutable_data();
    auto src = other.d_weights.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    if (d_bias) {
      for (std::size_t i = 0; i < d_bias->size(); ++i) {
        (*d_bias)[i] += (*other.d_bias)[i];
      }
    }
  }

  double norm() const {
    double s = 0.0;
    for (T v : d_weights.data()) s += static_cast<double>(v) * v;
    if (d_bias) for (T v : *d_bias) s += static_cast<double>(v) * v;
    return std::sqrt(s);
  }
};

/// Numerically stable softmax (max subtraction), evaluated in double.
template <class T>
std::vector<double> softmax(std::span<const T> logits) {
  if (logits.empty()) throw ValidationError("softmax of an empty vector");
  const double peak = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

template <class T>
std::vector<double> softmax(const std::vector<T>& logits) {
  return softmax(std::span<const T>(logits));
}

/// -log softmax(logits)[label], computed as logsumexp - logits[label].
template <class T>
double cross_entropy(std::span<const T> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw ValidationError("label index " + std::to_string(label) +
                          " out of range for " + std::to_string(logits.size()) +
                          " classes");
  }
  const double peak = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double total = 0.0;
  for (T z : logits) total += std::exp(static_cast<double>(z) - peak);
  return peak + std::log(total) - static_cast<double>(logits[label]);
}

template <class T>
double cross_entropy(const std::vector<T>& logits, std::size_t label) {
  return cross_entropy(std::span<const T>(logits), label);
}

/// Distributes the gradient of a pooled vector back onto the spatial grid.
/// Returns a [locations x channels] row-major buffer. GAP spreads each
/// channel's gradient uniformly; GMP sends all of it to the stored argmax.
inline std::vector<double> route_gradient(
    std::span<const double> pooled_grad, std::size_t locations,
    Aggregation aggregation,
    const std::optional<std::vector<std::size_t>>& arg_locations) {
  const std::size_t channels = pooled_grad.size();
  std::vector<double> routed(locations * channels, 0.0);
  if (aggregation == Aggregation::Gap) {
    const double share = 1.0 / static_cast<double>(locations);
    for (std::size_t p = 0; p < locations; ++p) {
      for (std::size_t c = 0; c < channels; ++c) {
        routed[p * channels + c] = pooled_grad[c] * share;
      }
    }
    return routed;
  }
  if (!arg_locations || arg_locations->size() != channels) {
    throw ValidationError("GMP gradient routing needs one argmax per channel");
  }
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t p = (*arg_locations)[c];
    if (p >= locations) throw ValidationError("argmax location out of range");
    routed[p * channels + c] = pooled_grad[c];
  }
  return routed;
}

namespace detail {

template <class T>
void check_trace(const BasicTensor<T>& featmap,
                 const BasicProjectionModel<T>& model,
                 const AttributeMatrix& attrs,
                 const BasicForwardTrace<T>& trace) {
  std::size_t expected = 0;
  switch (model.space) {
    case Space::Visual: expected = model.channels(); break;
    case Space::Attribute: expected = model.attributes(); break;
    case Space::Class: expected = attrs.rows(); break;
  }
  if (trace.logits.size() != attrs.rows() || trace.aggregated.size() != expected) {
    throw ValidationError("forward trace does not match model and attributes");
  }
  if (trace.arg_locations.has_value() != (model.aggregation == Aggregation::Gmp)) {
    throw ValidationError("forward trace aggregation does not match model");
  }
  (void)featmap;
}

// dW += scale * sum_p routed[p, :] (outer) x[p, :]
template <class T>
void accumulate_outer(const BasicTensor<T>& featmap,
                      std::span<const double> routed, std::size_t attributes,
                      double scale, GradientSet<double>& acc) {
  const std::size_t locations = spatial_size(featmap);
  const std::size_t channels = featmap.dim(2);
  auto dw = acc.d_weights.mutable_data();
  const auto x = featmap.data();
  for (std::size_t p = 0; p < locations; ++p) {
    const T* xp = x.data() + p * channels;
    for (std::size_t l = 0; l < attributes; ++l) {
      const double g = routed[p * attributes + l];
      if (g == 0.0) continue;
      double* row = dw.data() + l * channels;
      for (std::size_t d = 0; d < channels; ++d) {
        row[d] += scale * g * static_cast<double>(xp[d]);
      }
    }
  }
  if (acc.d_bias) {
    for (std::size_t p = 0; p < locations; ++p) {
      for (std::size_t l = 0; l < attributes; ++l) {
        (*acc.d_bias)[l] += scale * routed[p * attributes + l];
      }
    }
  }
}

}  // namespace detail

/// Adds scale * dLoss/dW (and dLoss/db) for one sample to `acc`.
template <class T>
void accumulate_gradient(const BasicTensor<T>& featmap,
                         const BasicProjectionModel<T>& model,
                         const AttributeMatrix& attrs,
                         const BasicForwardTrace<T>& trace, std::size_t label,
                         double scale, GradientSet<double>& acc) {
  detail::check_trace(featmap, model, attrs, trace);
  if (label >= attrs.rows()) {
    throw ValidationError("label index " + std::to_string(label) +
                          " out of range for " + std::to_string(attrs.rows()) +
                          " classes");
  }
  const std::size_t classes = attrs.rows();
  const std::size_t attributes = model.attributes();
  const std::size_t locations = spatial_size(featmap);
  const auto& A = attrs.values();

  // dL/dz = softmax(z) - onehot(label)
  std::vector<double> dz = softmax(std::span<const T>(trace.logits));
  dz[label] -= 1.0;

  auto attr_grad = [&](std::span<const double> dclass) {
    std::vector<double> da(attributes, 0.0);
    for (std::size_t k = 0; k < classes; ++k) {
      if (dclass[k] == 0.0) continue;
      for (std::size_t l = 0; l < attributes; ++l) {
        da[l] += dclass[k] * static_cast<double>(A(k, l));
      }
    }
    return da;
  };

  switch (model.space) {
    case Space::Visual: {
      const auto da = attr_grad(dz);
      auto dw = acc.d_weights.mutable_data();
      const std::size_t channels = model.channels();
      for (std::size_t l = 0; l < attributes; ++l) {
        for (std::size_t d = 0; d < channels; ++d) {
          dw[l * channels + d] +=
              scale * da[l] * static_cast<double>(trace.aggregated[d]);
        }
      }
      if (acc.d_bias) {
        for (std::size_t l = 0; l < attributes; ++l) (*acc.d_bias)[l] += scale * da[l];
      }
      break;
    }
    case Space::Attribute: {
      const auto da = attr_grad(dz);
      const auto routed = route_gradient(da, locations, model.aggregation,
                                         trace.arg_locations);
      detail::accumulate_outer(featmap, routed, attributes, scale, acc);
      break;
    }
    case Space::Class: {
      const auto routed_scores = route_gradient(dz, locations, model.aggregation,
                                                trace.arg_locations);
      std::vector<double> routed(locations * attributes, 0.0);
      for (std::size_t p = 0; p < locations; ++p) {
        const auto dap = attr_grad(
            std::span<const double>(routed_scores).subspan(p * classes, classes));
        std::copy(dap.begin(), dap.end(), routed.begin() + p * attributes);
      }
      detail::accumulate_outer(featmap, routed, attributes, scale, acc);
      break;
    }
  }
}

/// Gradient of the per-sample cross-entropy loss with respect to W and b.
template <class T>
GradientSet<T> backward(const BasicTensor<T>& featmap,
                        const BasicProjectionModel<T>& model,
                        const AttributeMatrix& attrs,
                        const BasicForwardTrace<T>& trace, std::size_t label) {
  auto acc = GradientSet<double>::zeros_like(model);
  accumulate_gradient(featmap, model, attrs, trace, label, 1.0, acc);
  return acc.template cast<T>();
}

/// velocity <- momentum * velocity + grads; weights <- weights - lr * velocity
template <class T>
void sgd_step(BasicProjectionModel<T>& model, const GradientSet<T>& grads,
              GradientSet<T>& velocity, double lr, double momentum) {
  if (grads.d_weights.shape() != model.weights.shape() ||
      velocity.d_weights.shape() != model.weights.shape() ||
      grads.d_bias.has_value() != model.bias.has_value() ||
      velocity.d_bias.has_value() != model.bias.has_value()) {
    throw ShapeError("gradient shapes do not match model " +
                     shape_to_string(model.weights.shape()));
  }
  auto update = [&](std::span<T> w, std::span<const T> g, std::span<T> v) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double vi = momentum * static_cast<double>(v[i]) + static_cast<double>(g[i]);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * vi);
    }
  };
  update(model.weights.mutable_data(), grads.d_weights.data(),
         velocity.d_weights.mutable_data());
  if (model.bias) {
    update(std::span<T>(*model.bias), std::span<const T>(*grads.d_bias),
           std::span<T>(*velocity.d_bias));
  }
}

/// Uniform init in [-s, s], s = scale / sqrt(D). Bias starts at zero.
inline ProjectionModel init_model(std::size_t attributes, std::size_t channels,
                                  const ModelOptions& options, double init_scale,
                                  std::mt19937_64& rng) {
  if (attributes < 1 || channels < 1) {
    throw ValidationError("model dimensions must be >= 1");
  }
  const double s = init_scale / std::sqrt(static_cast<double>(channels));
  std::uniform_real_distribution<double> dist(-s, s);
  std::vector<float> w(attributes * channels);
  for (float& v : w) v = static_cast<float>(dist(rng));
  ProjectionModel model{Tensor({attributes, channels}, std::move(w)), std::nullopt,
                        options.aggregation, options.space};
  if (options.use_bias) model.bias = std::vector<float>(attributes, 0.0f);
  return model;
}

struct TrainResult {
  ProjectionModel model;
  std::vector<double> loss_history;  // mean loss per epoch
};

namespace detail {

// Samples per gradient partial sum. Fixed so that results do not depend on
// the number of worker threads.
inline constexpr std::size_t kReductionChunk = 8;

}  // namespace detail

/// Trains W on seen-class samples with mini-batch SGD + momentum and a single
/// step decay of the learning rate.
inline TrainResult train(std::span<const LabeledSample> samples,
                         const AttributeMatrix& attrs_seen,
                         const TrainConfig& config,
                         const ModelOptions& options) {
  config.validate();
  if (samples.empty()) throw ValidationError("training set is empty");
  if (!attrs_seen.normalized()) {
    throw ValidationError("attribute matrix must be L2-normalized before training");
  }
  std::vector<std::size_t> labels(samples.size());
  const Shape& shape = samples.front().features.shape();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto idx = attrs_seen.index_of(samples[i].class_id);
    if (!idx) {
      throw ValidationError("sample '" + samples[i].sample_id +
                            "' has class '" + samples[i].class_id +
                            "' which is not a seen class");
    }
    if (samples[i].features.shape() != shape) {
      throw ShapeError("sample '" + samples[i].sample_id + "' has shape " +
                       shape_to_string(samples[i].features.shape()) +
                       ", expected " + shape_to_string(shape));
    }
    labels[i] = *idx;
  }
  if (shape.size() != 3) {
    throw ShapeError("features must be [H,W,D], got " + shape_to_string(shape));
  }

  std::mt19937_64 rng(config.seed);
  TrainResult result{init_model(attrs_seen.attributes(), shape[2], options,
                                config.weight_init_scale, rng),
                     {}};
  ProjectionModel& model = result.model;
  auto velocity = GradientSet<float>::zeros_like(model);

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = config.learning_rate_at(epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::size_t count = end - start;
      const double scale = 1.0 / static_cast<double>(count);
      const std::size_t chunks =
          (count + detail::kReductionChunk - 1) / detail::kReductionChunk;
      std::vector<GradientSet<double>> partial(
          chunks, GradientSet<double>::zeros_like(model));
      std::vector<double> partial_loss(chunks, 0.0);
      parallel_for(chunks, config.threads, [&](std::size_t c) {
        const std::size_t b = start + c * detail::kReductionChunk;
        const std::size_t e = std::min(end, b + detail::kReductionChunk);
        for (std::size_t i = b; i < e; ++i) {
          const auto& s = samples[order[i]];
          const auto trace = forward(s.features, model, attrs_seen);
          partial_loss[c] += cross_entropy(trace.logits, labels[order[i]]);
          accumulate_gradient(s.features, model, attrs_seen, trace,
                              labels[order[i]], scale, partial[c]);
        }
      });
      for (std::size_t c = 1; c < chunks; ++c) partial[0].add(partial[c]);
      for (double l : partial_loss) epoch_loss += l;
      sgd_step(model, partial[0].cast<float>(), velocity, lr, config.momentum);
    }
    result.loss_history.push_back(epoch_loss / static_cast<double>(samples.size()));
  }
  return result;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;  // entries compared
  std::size_t kinks = 0;    // entries skipped because a GMP argmax moved
};

/// Relative error with an absolute floor on the denominator so that
/// entries whose true gradient is ~0 are judged by absolute error.
inline double gradient_relative_error(double analytic, double numeric,
                                      double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() against central differences of a double-precision
/// forward pass. Entries whose +/-h perturbation changes any GMP argmax are
/// counted as kinks and left out of the maximum. Above `max_entries`
/// parameters, a seeded random subset is checked.
inline GradCheckResult grad_check(const ProjectionModel& model,
                                  const Tensor& featmap,
                                  std::size_t label,
                                  const AttributeMatrix& attrs, double h,
                                  std::size_t max_entries = 4096,
                                  std::uint64_t seed = 0) {
  if (!(h > 0)) throw ValidationError("finite-difference step must be > 0");
  const auto dmodel = model.cast<double>();
  const auto dfeat = featmap.cast<double>();
  const auto base = forward(dfeat, dmodel, attrs);
  const auto analytic = backward(dfeat, dmodel, attrs, base, label);

  const std::size_t n_weights = dmodel.weights.size();
  const std::size_t n_total = n_weights + (dmodel.bias ? dmodel.bias->size() : 0);
  std::vector<std::size_t> entries(n_total);
  std::iota(entries.begin(), entries.end(), 0);
  if (n_total > max_entries) {
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
    std::sort(entries.begin(), entries.end());
  }

  GradCheckResult result;
  auto probe = dmodel;
  auto param = [&](std::size_t e) -> double& {
    return e < n_weights ? probe.weights[e] : (*probe.bias)[e - n_weights];
  };
  for (std::size_t e : entries) {
    const double original = param(e);
    param(e) = original + h;
    const auto plus = forward(dfeat, probe, attrs);
    param(e) = original - h;
    const auto minus = forward(dfeat, probe, attrs);
    param(e) = original;
    if (plus.arg_locations != base.arg_locations ||
        minus.arg_locations != base.arg_locations) {
      ++result.kinks;
      continue;
    }
    const double numeric =
        (cross_entropy(plus.logits, label) - cross_entropy(minus.logits, label)) /
        (2.0 * h);
    const double a = e < n_weights ? analytic.d_weights[e]
                                   : (*analytic.d_bias)[e - n_weights];
    result.max_relative_error =
        std::max(result.max_relative_error, gradient_relative_error(a, numeric));
    ++result.checked;
  }
  return result;
}

struct GradCheckSuiteOptions {
  std::size_t instances = 50;  // per space x aggregation combination
  double h = 1e-3;
  std::uint64_t seed = 7;
  bool use_bias = false;
};

struct GradCheckSuiteRow {
  Space space;
  Aggregation aggregation;
  GradCheckResult result;
};

/// Runs grad_check over seeded random instances for all six space x
/// aggregation combinations.
inline std::vector<GradCheckSuiteRow> grad_check_suite(
    const GradCheckSuiteOptions& options) {
  std::vector<GradCheckSuiteRow> rows;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> spatial(1, 3), channels(1, 6),
      attributes(1, 5), classes(2, 5);
  for (Space space : {Space::Visual, Space::Attribute, Space::Class}) {
    for (Aggregation agg : {Aggregation::Gap, Aggregation::Gmp}) {
      GradCheckSuiteRow row{space, agg, {}};
      for (std::size_t i = 0; i < options.instances; ++i) {
        const std::size_t H = spatial(rng), W = spatial(rng), D = channels(rng),
                          L = attributes(rng), K = classes(rng);
        std::vector<float> x(H * W * D), w(L * D), a(K * L);
        for (float& v : x) v = static_cast<float>(normal(rng));
        for (float& v : w) v = static_cast<float>(normal(rng));
        for (float& v : a) v = static_cast<float>(std::abs(normal(rng)) + 0.1);
        std::vector<std::string> ids;
        for (std::size_t k = 0; k < K; ++k) ids.push_back("k" + std::to_string(k));
        const auto attrs = normalize_rows(AttributeMatrix(ids, Tensor({K, L}, a)));
        ProjectionModel model{Tensor({L, D}, w), std::nullopt, agg, space};
        if (options.use_bias) {
          std::vector<float> b(L);
          for (float& v : b) v = static_cast<float>(normal(rng));
          model.bias = b;
        }
        const std::size_t label = std::uniform_int_distribution<std::size_t>(0, K - 1)(rng);
        const auto r = grad_check(model, Tensor({H, W, D}, x), label, attrs, options.h);
        row.result.max_relative_error =
            std::max(row.result.max_relative_error, r.max_relative_error);
        row.result.checked += r.checked;
        row.result.kinks += r.kinks;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace selar
