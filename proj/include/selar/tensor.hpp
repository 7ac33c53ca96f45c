#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "selar/error.hpp"

namespace selar {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major n-dimensional array, last index fastest.
///
/// Feature maps are rank 3 with layout [H, W, C]; matrices are rank 2 [rows,
/// cols]. Every dimension must be at least 1 and the element count always
/// equals the product of the shape.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + shape_to_string(shape_) +
                       " needs " + std::to_string(shape_numel(shape_)) +
                       " values, got " + std::to_string(data_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> mutable_data() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  // Rank-2 access.
  T operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  T& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }

  // Rank-3 access.
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row `r` of a rank-2 tensor, or the channel vector at flat spatial index
  /// `r` of a rank-3 feature map.
  std::span<const T> row(std::size_t r) const {
    const std::size_t w = shape_.back();
    return std::span<const T>(data_).subspan(r * w, w);
  }
  std::span<T> mutable_row(std::size_t r) {
    const std::size_t w = shape_.back();
    return std::span<T>(data_).subspan(r * w, w);
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("tensor shape " + shape_to_string(shape) +
                         " has a zero dimension");
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Number of spatial locations (H * W) of a rank-3 feature map.
template <class T>
std::size_t spatial_size(const BasicTensor<T>& map) {
  if (map.rank() != 3) {
    throw ShapeError("expected a rank-3 [H,W,C] map, got " +
                     shape_to_string(map.shape()));
  }
  return map.dim(0) * map.dim(1);
}

/// Per-location linear map: out[h,w,l] = sum_d weights[l,d] * map[h,w,d]
/// (+ bias[l]). This is a 1x1 convolution with an [L,D] kernel.
template <class T>
BasicTensor<T> project_1x1(const BasicTensor<T>& featmap,
                           const BasicTensor<T>& weights,
                           std::optional<std::span<const std::type_identity_t<T>>> bias = {}) {
  const std::size_t locations = spatial_size(featmap);
  if (weights.rank() != 2 || weights.dim(1) != featmap.dim(2)) {
    throw ShapeError("project_1x1: featmap " + shape_to_string(featmap.shape()) +
                     " does not match weights " +
                     shape_to_string(weights.shape()));
  }
  const std::size_t out_ch = weights.dim(0);
  const std::size_t in_ch = weights.dim(1);
  if (bias && bias->size() != out_ch) {
    throw ShapeError("project_1x1: bias length " + std::to_string(bias->size()) +
                     " does not match weights " +
                     shape_to_string(weights.shape()));
  }
  BasicTensor<T> out({featmap.dim(0), featmap.dim(1), out_ch});
  const auto in = featmap.data();
  const auto w = weights.data();
  auto dst = out.mutable_data();
  for (std::size_t p = 0; p < locations; ++p) {
    const T* x = in.data() + p * in_ch;
    for (std::size_t l = 0; l < out_ch; ++l) {
      const T* wl = w.data() + l * in_ch;
      double acc = bias ? static_cast<double>((*bias)[l]) : 0.0;
      for (std::size_t d = 0; d < in_ch; ++d) {
        acc += static_cast<double>(wl[d]) * static_cast<double>(x[d]);
      }
      dst[p * out_ch + l] = static_cast<T>(acc);
    }
  }
  return out;
}

/// Global average pooling over the spatial grid of an [H,W,C] map.
template <class T>
std::vector<T> gap(const BasicTensor<T>& map) {
  const std::size_t locations = spatial_size(map);
  const std::size_t channels = map.dim(2);
  std::vector<double> acc(channels, 0.0);
  const auto src = map.data();
  for (std::size_t p = 0; p < locations; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      acc[c] += static_cast<double>(src[p * channels + c]);
    }
  }
  std::vector<T> out(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    out[c] = static_cast<T>(acc[c] / static_cast<double>(locations));
  }
  return out;
}

template <class T>
struct MaxPooled {
  std::vector<T> values;
  std::vector<std::size_t> arg_locations;  // row-major flat spatial index
};

/// Global max pooling. Ties resolve to the lowest flat spatial index.
template <class T>
MaxPooled<T> gmp(const BasicTensor<T>& map) {
  const std::size_t locations = spatial_size(map);
  const std::size_t channels = map.dim(2);
  const auto src = map.data();
  MaxPooled<T> out{std::vector<T>(src.begin(), src.begin() + channels),
                   std::vector<std::size_t>(channels, 0)};
  for (std::size_t p = 1; p < locations; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T v = src[p * channels + c];
      if (v > out.values[c]) {
        out.values[c] = v;
        out.arg_locations[c] = p;
      }
    }
  }
  return out;
}

/// y = M x with a double accumulator; M is [rows, cols].
template <class T, class U>
std::vector<T> matvec(const BasicTensor<U>& m, std::span<const T> x) {
  if (m.rank() != 2 || m.dim(1) != x.size()) {
    throw ShapeError("matvec: matrix " + shape_to_string(m.shape()) +
                     " does not match vector of length " +
                     std::to_string(x.size()));
  }
  const std::size_t rows = m.dim(0);
  const std::size_t cols = m.dim(1);
  std::vector<T> y(rows);
  const auto md = m.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      acc += static_cast<double>(md[r * cols + c]) * static_cast<double>(x[c]);
    }
    y[r] = static_cast<T>(acc);
  }
  return y;
}

}  // namespace selar
