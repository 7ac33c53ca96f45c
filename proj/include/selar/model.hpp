#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "selar/error.hpp"
#include "selar/tensor.hpp"

namespace selar {

enum class Aggregation { Gap, Gmp };

/// Where spatial pooling happens: on the backbone features, on the
/// per-location attribute maps, or on the per-location class scores.
enum class Space { Visual, Attribute, Class };

inline std::string_view to_string(Aggregation a) {
  return a == Aggregation::Gap ? "gap" : "gmp";
}

inline std::string_view to_string(Space s) {
  switch (s) {
    case Space::Visual: return "visual";
    case Space::Attribute: return "attribute";
    case Space::Class: return "class";
  }
  return "?";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "gap") return Aggregation::Gap;
  if (s == "gmp") return Aggregation::Gmp;
  throw ValidationError("invalid aggregation '" + std::string(s) +
                        "' (expected gap|gmp)");
}

inline Space parse_space(std::string_view s) {
  if (s == "visual") return Space::Visual;
  if (s == "attribute") return Space::Attribute;
  if (s == "class") return Space::Class;
  throw ValidationError("invalid space '" + std::string(s) +
                        "' (expected visual|attribute|class)");
}

/// Class prototypes stacked row-wise: values is [classes, L].
class AttributeMatrix {
 public:
  AttributeMatrix() = default;

  AttributeMatrix(std::vector<std::string> class_ids, Tensor values,
                  bool normalized = false)
      : class_ids_(std::move(class_ids)),
        values_(std::move(values)),
        normalized_(normalized) {
    if (values_.rank() != 2 || values_.dim(0) != class_ids_.size()) {
      throw ShapeError("attribute matrix " + shape_to_string(values_.shape()) +
                       " does not match " + std::to_string(class_ids_.size()) +
                       " class ids");
    }
    for (std::size_t i = 0; i < class_ids_.size(); ++i) {
      if (!index_.emplace(class_ids_[i], i).second) {
        throw ValidationError("duplicate class id '" + class_ids_[i] +
                              "' in attribute matrix");
      }
    }
    if (normalized_) {
      for (std::size_t i = 0; i < rows(); ++i) {
        if (std::abs(row_norm(i) - 1.0) > 1e-5) {
          throw NormalizationError("row for class '" + class_ids_[i] +
                                   "' is not unit norm");
        }
      }
    }
  }

  const std::vector<std::string>& class_ids() const noexcept {
    return class_ids_;
  }
  const Tensor& values() const noexcept { return values_; }
  bool normalized() const noexcept { return normalized_; }
  std::size_t rows() const noexcept { return class_ids_.size(); }
  std::size_t attributes() const { return values_.empty() ? 0 : values_.dim(1); }
  std::span<const float> row(std::size_t i) const { return values_.row(i); }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  double row_norm(std::size_t i) const {
    double s = 0.0;
    for (float v : row(i)) s += static_cast<double>(v) * v;
    return std::sqrt(s);
  }

  /// Rows for `ids`, in that order.
  AttributeMatrix select(std::span<const std::string> ids) const {
    if (ids.empty()) throw ValidationError("cannot select zero classes");
    std::vector<float> data;
    data.reserve(ids.size() * attributes());
    for (const auto& id : ids) {
      auto idx = index_of(id);
      if (!idx) {
        throw ValidationError("class '" + id + "' missing from attribute matrix");
      }
      auto r = row(*idx);
      data.insert(data.end(), r.begin(), r.end());
    }
    return AttributeMatrix({ids.begin(), ids.end()},
                           Tensor({ids.size(), attributes()}, std::move(data)),
                           normalized_);
  }

 private:
  std::vector<std::string> class_ids_;
  Tensor values_;
  bool normalized_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Divides every class prototype by its Euclidean norm.
inline AttributeMatrix normalize_rows(const AttributeMatrix& attrs) {
  const std::size_t cols = attrs.attributes();
  std::vector<float> data(attrs.values().data().begin(),
                          attrs.values().data().end());
  for (std::size_t i = 0; i < attrs.rows(); ++i) {
    const double norm = attrs.row_norm(i);
    if (norm == 0.0) {
      throw NormalizationError("zero attribute vector for class '" +
                               attrs.class_ids()[i] + "'");
    }
    for (std::size_t j = 0; j < cols; ++j) {
      data[i * cols + j] = static_cast<float>(data[i * cols + j] / norm);
    }
  }
  return AttributeMatrix(attrs.class_ids(),
                         Tensor(attrs.values().shape(), std::move(data)), true);
}

/// Seen rows followed by unseen rows; the class ids of both sets must be
/// disjoint.
inline AttributeMatrix concat_rows(const AttributeMatrix& first,
                                   const AttributeMatrix& second) {
  if (first.attributes() != second.attributes()) {
    throw ShapeError("cannot concatenate attribute matrices with " +
                     std::to_string(first.attributes()) + " and " +
                     std::to_string(second.attributes()) + " attributes");
  }
  if (first.normalized() != second.normalized()) {
    throw ValidationError("cannot concatenate normalized and raw attribute matrices");
  }
  auto ids = first.class_ids();
  ids.insert(ids.end(), second.class_ids().begin(), second.class_ids().end());
  std::vector<float> data(first.values().data().begin(),
                          first.values().data().end());
  data.insert(data.end(), second.values().data().begin(),
              second.values().data().end());
  const std::size_t n = ids.size();
  return AttributeMatrix(std::move(ids),
                         Tensor({n, first.attributes()}, std::move(data)),
                         first.normalized());
}

/// The trainable visual-to-attribute projection W [L, D] with optional bias,
/// together with the pooling operator and the space it is applied in.
template <class T>
struct BasicProjectionModel {
  BasicTensor<T> weights;
  std::optional<std::vector<T>> bias;
  Aggregation aggregation = Aggregation::Gmp;
  Space space = Space::Attribute;

  std::size_t attributes() const { return weights.dim(0); }
  std::size_t channels() const { return weights.dim(1); }

  std::optional<std::span<const T>> bias_span() const {
    if (!bias) return std::nullopt;
    return std::span<const T>(*bias);
  }

  void validate() const {
    if (weights.rank() != 2) {
      throw ShapeError("projection weights must be rank 2, got " +
                       shape_to_string(weights.shape()));
    }
    if (bias && bias->size() != weights.dim(0)) {
      throw ShapeError("bias length " + std::to_string(bias->size()) +
                       " does not match weights " +
                       shape_to_string(weights.shape()));
    }
  }

  template <class U>
  BasicProjectionModel<U> cast() const {
    BasicProjectionModel<U> out{weights.template cast<U>(), std::nullopt,
                                aggregation, space};
    if (bias) out.bias = std::vector<U>(bias->begin(), bias->end());
    return out;
  }
};

using ProjectionModel = BasicProjectionModel<float>;

template <class T>
struct BasicForwardTrace {
  std::vector<T> logits;
  // Pooled vector: length D (visual), L (attribute) or classes (class).
  std::vector<T> aggregated;
  // GMP only: argmax location per pooled channel.
  std::optional<std::vector<std::size_t>> arg_locations;
  // Attribute and class spaces only.
  std::optional<BasicTensor<T>> attribute_maps;
};

using ForwardTrace = BasicForwardTrace<float>;

namespace detail {

template <class T>
std::pair<std::vector<T>, std::optional<std::vector<std::size_t>>> pool(
    const BasicTensor<T>& map, Aggregation aggregation) {
  if (aggregation == Aggregation::Gap) return {gap(map), std::nullopt};
  auto pooled = gmp(map);
  return {std::move(pooled.values), std::move(pooled.arg_locations)};
}

inline void check_forward_inputs(const Shape& featmap_shape, std::size_t channels,
                                 std::size_t attributes,
                                 const AttributeMatrix& attrs) {
  if (featmap_shape.size() != 3 || featmap_shape[2] != channels) {
    throw ShapeError("feature map " + shape_to_string(featmap_shape) +
                     " does not match model with " + std::to_string(channels) +
                     " input channels");
  }
  if (attrs.attributes() != attributes) {
    throw ShapeError("attribute matrix has " +
                     std::to_string(attrs.attributes()) +
                     " attributes, model projects to " +
                     std::to_string(attributes));
  }
  if (!attrs.normalized()) {
    throw ValidationError("attribute matrix must be L2-normalized before use");
  }
  if (attrs.rows() == 0) throw ValidationError("attribute matrix has no classes");
}

}  // namespace detail

/// Localized attribute maps: the 1x1 projection of the feature map.
template <class T>
BasicTensor<T> attribute_maps(const BasicTensor<T>& featmap,
                              const BasicProjectionModel<T>& model) {
  model.validate();
  return project_1x1(featmap, model.weights, model.bias_span());
}

/// Class logits for one feature map, pooling in the model's space.
template <class T>
BasicForwardTrace<T> forward(const BasicTensor<T>& featmap,
                             const BasicProjectionModel<T>& model,
                             const AttributeMatrix& attrs) {
  model.validate();
  detail::check_forward_inputs(featmap.shape(), model.channels(),
                               model.attributes(), attrs);
  BasicForwardTrace<T> trace;
  switch (model.space) {
    case Space::Visual: {
      auto [v, args] = detail::pool(featmap, model.aggregation);
      auto a = matvec<T>(model.weights, std::span<const T>(v));
      if (model.bias) {
        for (std::size_t l = 0; l < a.size(); ++l) a[l] += (*model.bias)[l];
      }
      trace.logits = matvec<T>(attrs.values(), std::span<const T>(a));
      trace.aggregated = std::move(v);
      trace.arg_locations = std::move(args);
      break;
    }
    case Space::Attribute: {
      auto maps = attribute_maps(featmap, model);
      auto [a, args] = detail::pool(maps, model.aggregation);
      trace.logits = matvec<T>(attrs.values(), std::span<const T>(a));
      trace.aggregated = std::move(a);
      trace.arg_locations = std::move(args);
      trace.attribute_maps = std::move(maps);
      break;
    }
    case Space::Class: {
      auto maps = attribute_maps(featmap, model);
      auto scores = project_1x1(maps, attrs.values().template cast<T>());
      auto [z, args] = detail::pool(scores, model.aggregation);
      trace.logits = z;
      trace.aggregated = std::move(z);
      trace.arg_locations = std::move(args);
      trace.attribute_maps = std::move(maps);
      break;
    }
  }
  return trace;
}

/// Index of the highest logit; ties go to the lowest index.
template <class T>
std::size_t argmax_index(std::span<const T> logits) {
  if (logits.empty()) throw ValidationError("cannot predict from empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

template <class T>
const std::string& predict(std::span<const T> logits,
                           const AttributeMatrix& attrs) {
  if (logits.empty()) throw ValidationError("cannot predict from empty logits");
  if (logits.size() != attrs.rows()) {
    throw ShapeError("got " + std::to_string(logits.size()) + " logits for " +
                     std::to_string(attrs.rows()) + " classes");
  }
  return attrs.class_ids()[argmax_index(logits)];
}

template <class T>
const std::string& predict(const std::vector<T>& logits,
                           const AttributeMatrix& attrs) {
  return predict(std::span<const T>(logits), attrs);
}

}  // namespace selar
