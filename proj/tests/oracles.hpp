#pragma once

// Reference implementations used only by the tests. They are written as
// plain scalar loops in double precision and share no code with the
// library's compute paths.

#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Feature map stored as x[h][w][d].
using Grid = std::vector<std::vector<std::vector<double>>>;
using Mat = std::vector<std::vector<double>>;

inline Grid make_grid(std::size_t H, std::size_t W, std::size_t D,
                      const std::vector<float>& flat) {
  Grid g(H, std::vector<std::vector<double>>(W, std::vector<double>(D)));
  std::size_t i = 0;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t d = 0; d < D; ++d) g[h][w][d] = flat[i++];
  return g;
}

inline Mat make_mat(std::size_t R, std::size_t C, const std::vector<float>& flat) {
  Mat m(R, std::vector<double>(C));
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) m[r][c] = flat[r * C + c];
  return m;
}

inline Grid project(const Grid& x, const Mat& w) {
  Grid out(x.size(), std::vector<std::vector<double>>(x[0].size()));
  for (std::size_t h = 0; h < x.size(); ++h) {
    for (std::size_t c = 0; c < x[0].size(); ++c) {
      out[h][c].assign(w.size(), 0.0);
      for (std::size_t l = 0; l < w.size(); ++l) {
        double s = 0;
        for (std::size_t d = 0; d < w[l].size(); ++d) s += w[l][d] * x[h][c][d];
        out[h][c][l] = s;
      }
    }
  }
  return out;
}

inline std::vector<double> mean_pool(const Grid& x) {
  const std::size_t C = x[0][0].size();
  std::vector<double> out(C, 0.0);
  double n = 0;
  for (const auto& row : x)
    for (const auto& cell : row) {
      for (std::size_t c = 0; c < C; ++c) out[c] += cell[c];
      n += 1;
    }
  for (double& v : out) v /= n;
  return out;
}

inline std::vector<double> max_pool(const Grid& x) {
  const std::size_t C = x[0][0].size();
  std::vector<double> out(C, -std::numeric_limits<double>::infinity());
  for (const auto& row : x)
    for (const auto& cell : row)
      for (std::size_t c = 0; c < C; ++c) out[c] = std::max(out[c], cell[c]);
  return out;
}

inline std::vector<double> mat_vec(const Mat& m, const std::vector<double>& v) {
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < v.size(); ++c) out[r] += m[r][c] * v[c];
  return out;
}

enum class Pool { Mean, Max };
enum class Where { Visual, Attribute, Class };

/// Full pipeline: features -> logits, pooling at `where`.
inline std::vector<double> logits(const Grid& x, const Mat& w, const Mat& a,
                                  Pool pool, Where where) {
  auto agg = [&](const Grid& g) { return pool == Pool::Mean ? mean_pool(g) : max_pool(g); };
  switch (where) {
    case Where::Visual: return mat_vec(a, mat_vec(w, agg(x)));
    case Where::Attribute: return mat_vec(a, agg(project(x, w)));
    case Where::Class: return agg(project(project(x, w), a));
  }
  return {};
}

/// -log(exp(z_y) / sum exp(z)) evaluated directly in double.
inline double cross_entropy(const std::vector<double>& z, std::size_t label) {
  double total = 0;
  for (double v : z) total += std::exp(v);
  return -std::log(std::exp(z[label]) / total);
}

/// Brute-force per-class accuracy tally.
inline double per_class_mean(const std::vector<std::pair<std::string, std::string>>& pred_true,
                             const std::vector<std::string>& classes) {
  double sum = 0;
  for (const auto& c : classes) {
    int n = 0, ok = 0;
    for (const auto& [p, t] : pred_true) {
      if (t != c) continue;
      ++n;
      if (p == t) ++ok;
    }
    sum += static_cast<double>(ok) / n;
  }
  return sum / static_cast<double>(classes.size());
}

}  // namespace oracle
