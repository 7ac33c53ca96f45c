#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "selar/tensor.hpp"

using selar::Tensor;

namespace {

std::vector<float> random_values(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

}  // namespace

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), selar::ShapeError);
  EXPECT_THROW(Tensor({2, 0}), selar::ShapeError);
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5f);
}

TEST(Project1x1Test, IdentityWeights) {
  Tensor x({1, 1, 2}, {3, -1});
  Tensor w({2, 2}, {1, 0, 0, 1});
  auto out = selar::project_1x1(x, w);
  EXPECT_EQ(out.shape(), (selar::Shape{1, 1, 2}));
  EXPECT_EQ(out[0], 3.f);
  EXPECT_EQ(out[1], -1.f);
}

TEST(Project1x1Test, WithBias) {
  Tensor x({1, 1, 2}, {2, 5});
  Tensor w({1, 2}, {1, 1});
  std::vector<float> b{1};
  auto out = selar::project_1x1(x, w, std::span<const float>(b));
  EXPECT_EQ(out.shape(), (selar::Shape{1, 1, 1}));
  EXPECT_EQ(out[0], 8.f);
}

TEST(Project1x1Test, DimensionMismatchNamesShapes) {
  Tensor x({2, 2, 3});
  Tensor w({4, 5});
  try {
    selar::project_1x1(x, w);
    FAIL() << "expected ShapeError";
  } catch (const selar::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Project1x1Test, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t M = 7, D = 16, L = 8;
    auto xv = random_values(M * M * D, rng);
    auto wv = random_values(L * D, rng);
    auto out = selar::project_1x1(Tensor({M, M, D}, xv), Tensor({L, D}, wv));
    const auto ref = oracle::project(oracle::make_grid(M, M, D, xv),
                                     oracle::make_mat(L, D, wv));
    for (std::size_t h = 0; h < M; ++h)
      for (std::size_t w = 0; w < M; ++w)
        for (std::size_t l = 0; l < L; ++l) {
          const double r = ref[h][w][l];
          EXPECT_LE(std::abs(out(h, w, l) - r), 1e-6 * std::max(1.0, std::abs(r)));
        }
  }
}

TEST(Project1x1Test, IsLinear) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 4, D = 9, L = 5;
    auto xv = random_values(M * M * D, rng), yv = random_values(M * M * D, rng);
    Tensor w({L, D}, random_values(L * D, rng));
    const float alpha = 0.7f, beta = -1.3f;
    std::vector<float> mix(xv.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * xv[i] + beta * yv[i];
    auto lhs = selar::project_1x1(Tensor({M, M, D}, mix), w);
    auto px = selar::project_1x1(Tensor({M, M, D}, xv), w);
    auto py = selar::project_1x1(Tensor({M, M, D}, yv), w);
    double scale = 0;
    for (float v : lhs.data()) scale = std::max(scale, std::abs(double(v)));
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      EXPECT_LE(std::abs(lhs[i] - (alpha * px[i] + beta * py[i])), 1e-5 * scale);
    }
  }
}

TEST(GapTest, ConstantMap) {
  Tensor t({3, 3, 1}, 4.0f);
  EXPECT_EQ(selar::gap(t), std::vector<float>{4.0f});
}

TEST(GapTest, ArithmeticMean) {
  Tensor t({2, 2, 1}, {1, 2, 3, 4});
  EXPECT_EQ(selar::gap(t), std::vector<float>{2.5f});
}

TEST(GapTest, MatchesDoubleOracle) {
  std::mt19937_64 rng(5);
  auto v = random_values(7 * 7 * 32, rng);
  for (auto& x : v) x += 3.0f;  // keep means away from zero
  const auto got = selar::gap(Tensor({7, 7, 32}, v));
  const auto ref = oracle::mean_pool(oracle::make_grid(7, 7, 32, v));
  for (std::size_t c = 0; c < 32; ++c) {
    EXPECT_LE(std::abs(got[c] - ref[c]), 1e-5 * std::abs(ref[c]));
  }
}

TEST(GmpTest, UniqueMax) {
  auto r = selar::gmp(Tensor({2, 2, 1}, {1, 2, 3, 4}));
  EXPECT_EQ(r.values, std::vector<float>{4});
  EXPECT_EQ(r.arg_locations, std::vector<std::size_t>{3});
}

TEST(GmpTest, TiesBreakToFirstLocation) {
  auto r = selar::gmp(Tensor({3, 3, 1}, 4.0f));
  EXPECT_EQ(r.values, std::vector<float>{4});
  EXPECT_EQ(r.arg_locations, std::vector<std::size_t>{0});
}

TEST(GmpTest, NonSquareGrid) {
  Tensor t({1, 3, 2}, {0, 5, 7, 1, 2, 9});
  auto r = selar::gmp(t);
  EXPECT_EQ(r.values, (std::vector<float>{7, 9}));
  EXPECT_EQ(r.arg_locations, (std::vector<std::size_t>{1, 2}));
}

TEST(PoolingProperty, MaxDominatesMeanWithEqualityIffConstant) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> side(1, 5), ch(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t H = side(rng), W = side(rng), C = ch(rng);
    auto v = random_values(H * W * C, rng);
    // make channel 0 constant
    for (std::size_t p = 0; p < H * W; ++p) v[p * C] = 0.25f;
    Tensor t({H, W, C}, v);
    const auto mean = selar::gap(t);
    const auto mx = selar::gmp(t);
    for (std::size_t c = 0; c < C; ++c) {
      EXPECT_GE(mx.values[c], mean[c]);
      bool constant = true;
      for (std::size_t p = 1; p < H * W; ++p) constant &= v[p * C + c] == v[c];
      EXPECT_EQ(mx.values[c] == mean[c], constant) << "channel " << c;
    }
  }
}

TEST(PoolingProperty, GapCommutesWithProjection) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t M = 5, D = 12, L = 7;
    Tensor x({M, M, D}, random_values(M * M * D, rng));
    Tensor w({L, D}, random_values(L * D, rng));
    const auto lhs = selar::gap(selar::project_1x1(x, w));
    const auto pooled = selar::gap(x);
    const auto rhs = selar::matvec<float>(w, std::span<const float>(pooled));
    double scale = 0;
    for (float v : rhs) scale = std::max(scale, std::abs(double(v)));
    for (std::size_t l = 0; l < L; ++l) EXPECT_LE(std::abs(lhs[l] - rhs[l]), 1e-4 * scale);
  }
}
