#pragma once

// Shared deterministic inputs for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "selar/model.hpp"

namespace fixtures {

inline std::vector<float> normal_values(std::size_t n, std::mt19937_64& rng,
                                        float sigma = 1.f) {
  std::normal_distribution<float> dist(0.f, sigma);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline std::vector<std::string> class_ids(std::size_t k) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back("k" + std::to_string(i));
  return ids;
}

/// Random positive attribute matrix, row-normalized.
inline selar::AttributeMatrix random_attrs(std::size_t classes, std::size_t attributes,
                                           std::mt19937_64& rng) {
  std::uniform_real_distribution<float> dist(0.05f, 1.f);
  std::vector<float> v(classes * attributes);
  for (auto& x : v) x = dist(rng);
  return selar::normalize_rows(
      selar::AttributeMatrix(class_ids(classes), selar::Tensor({classes, attributes}, v)));
}

/// max |a - b| / max |a|
template <class A, class B>
double max_relative_gap(const A& a, const B& b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    scale = std::max(scale, std::abs(double(a[i])));
  }
  return scale > 0 ? diff / scale : diff;
}

/// Two locations with channel maxima at different locations, so pooling
/// before and after the projection disagree under GMP.
struct GmpWitness {
  selar::Tensor featmap;
  selar::Tensor weights;
  selar::AttributeMatrix attrs;
};

inline GmpWitness gmp_witness() {
  // locations: p0 = [1, 0], p1 = [0, 1]
  // W rows: attribute 0 = x0 + x1, attribute 1 = x0 - x1
  // classes: k0 = [1, 0], k1 = [0.6, 0.8]
  return {selar::Tensor({1, 2, 2}, {1.f, 0.f, 0.f, 1.f}),
          selar::Tensor({2, 2}, {1.f, 1.f, 1.f, -1.f}),
          selar::AttributeMatrix({"k0", "k1"}, selar::Tensor({2, 2}, {1.f, 0.f, 0.6f, 0.8f}),
                                 true)};
}

}  // namespace fixtures
