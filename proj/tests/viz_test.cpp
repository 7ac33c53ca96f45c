#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "selar/viz.hpp"

namespace fs = std::filesystem;
using selar::Interpolation;
using selar::Tensor;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

selar::ProjectionModel random_model(std::size_t L, std::size_t D, std::mt19937_64& rng) {
  return {Tensor({L, D}, fixtures::normal_values(L * D, rng)), std::nullopt,
          selar::Aggregation::Gmp, selar::Space::Attribute};
}

}  // namespace

TEST(IntensityTest, LinearRamp) {
  const std::vector<double> v{0, 1, 2, 3};
  EXPECT_EQ(selar::to_intensity(v), (std::vector<std::uint8_t>{0, 85, 170, 255}));
}

TEST(IntensityTest, ConstantMapIsMidGray) {
  const std::vector<double> v(9, -4.5);
  EXPECT_EQ(selar::to_intensity(v), std::vector<std::uint8_t>(9, 128));
}

TEST(IntensityTest, Monotone) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(49);
    for (auto& x : v) x = n(rng);
    const auto px = selar::to_intensity(v);
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j)
        if (v[i] < v[j]) {
          EXPECT_LE(px[i], px[j]);
        }
    EXPECT_EQ(*std::min_element(px.begin(), px.end()), 0);
    EXPECT_EQ(*std::max_element(px.begin(), px.end()), 255);
  }
}

TEST(UpsampleTest, NearestMakesBlocks) {
  const std::vector<double> v{1, 2, 3, 4};
  const auto up = selar::upsample(v, 2, 2, 2, Interpolation::Nearest);
  EXPECT_EQ(up, (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(UpsampleTest, NearestKeepsDistinctValues) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  std::vector<double> v(3 * 5);
  for (auto& x : v) x = n(rng);
  const auto up = selar::upsample(v, 3, 5, 3, Interpolation::Nearest);
  EXPECT_EQ(std::set<double>(up.begin(), up.end()), std::set<double>(v.begin(), v.end()));
}

TEST(UpsampleTest, BilinearHalfPixelCenters) {
  const std::vector<double> v{0, 1, 2, 3};
  const auto up = selar::upsample(v, 2, 2, 2, Interpolation::Bilinear);
  const std::vector<double> expected{0,    0.25, 0.75, 1,    0.5, 0.75, 1.25, 1.5,
                                     1.5,  1.75, 2.25, 2.5,  2,   2.25, 2.75, 3};
  ASSERT_EQ(up.size(), expected.size());
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_NEAR(up[i], expected[i], 1e-12) << i;
}

TEST(UpsampleTest, FactorOneIsIdentity) {
  const std::vector<double> v{5, -1, 2, 0, 7, 3};
  EXPECT_EQ(selar::upsample(v, 2, 3, 1, Interpolation::Bilinear), v);
  EXPECT_EQ(selar::upsample(v, 2, 3, 1, Interpolation::Nearest), v);
  EXPECT_THROW(selar::upsample(v, 2, 3, 0, Interpolation::Nearest), selar::ValidationError);
}

TEST(PgmTest, HeaderAndPayload) {
  selar::GrayImage img{3, 2, {0, 1, 2, 3, 4, 255}};
  const auto bytes = selar::encode_pgm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 6u);
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
}

TEST(RenderTest, NonSquareGridDimensions) {
  Tensor maps({2, 3, 1}, {0, 1, 2, 3, 4, 5});
  const auto img = selar::render_heatmap(maps, 0, 2, Interpolation::Nearest);
  EXPECT_EQ(img.width, 6u);
  EXPECT_EQ(img.height, 4u);
  EXPECT_EQ(img.pixels.front(), 0);
  EXPECT_EQ(img.pixels.back(), 255);
  EXPECT_THROW(selar::render_heatmap(maps, 1, 1, Interpolation::Nearest),
               selar::ValidationError);
}

TEST(SelectionTest, TopKByPrototype) {
  const std::vector<float> proto{0.1f, 0.9f, 0.5f, 0.9f, 0.0f};
  const auto idx = selar::select_attributes(selar::SelectTopK{3}, 5, std::span<const float>(proto));
  EXPECT_EQ(idx, (std::vector<std::size_t>{1, 3, 2}));
  EXPECT_THROW(selar::select_attributes(selar::SelectTopK{2}, 5, std::nullopt),
               selar::ValidationError);
  EXPECT_THROW(selar::select_attributes(selar::SelectIndices{{7}}, 5, std::nullopt),
               selar::ValidationError);
  EXPECT_EQ(selar::select_attributes(selar::SelectAll{}, 3, std::nullopt).size(), 3u);
}

TEST(ExportTest, WritesOneImagePerAttributeAndIndex) {
  const auto dir = fs::temp_directory_path() / "selar_viz_export";
  fs::remove_all(dir);
  std::mt19937_64 rng(3);
  const auto model = random_model(4, 6, rng);
  Tensor x({5, 5, 6}, fixtures::normal_values(150, rng));
  const std::vector<std::string> names{"red", "stripes", "wings", "beak"};
  selar::HeatmapExportConfig cfg;
  cfg.upsample_factor = 4;
  cfg.interpolation = Interpolation::Bilinear;
  const auto files = selar::export_heatmaps(x, model, cfg, dir, "img7", std::nullopt, names);
  ASSERT_EQ(files.size(), 4u);
  EXPECT_EQ(files[2].filename(), "img7_attr002.pgm");
  for (const auto& f : files) {
    const auto bytes = slurp(f);
    EXPECT_EQ(bytes.substr(0, 13), "P5\n20 20\n255\n");
    EXPECT_EQ(bytes.size(), 13u + 400u);
  }
  EXPECT_EQ(slurp(dir / "img7_index.tsv"),
            "0\tred\timg7_attr000.pgm\n1\tstripes\timg7_attr001.pgm\n"
            "2\twings\timg7_attr002.pgm\n3\tbeak\timg7_attr003.pgm\n");
  fs::remove_all(dir);
}

TEST(ExportTest, ReexportIsByteIdentical) {
  const auto a = fs::temp_directory_path() / "selar_viz_det_a";
  const auto b = fs::temp_directory_path() / "selar_viz_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  std::mt19937_64 rng(4);
  const auto model = random_model(3, 5, rng);
  Tensor x({7, 7, 5}, fixtures::normal_values(245, rng));
  const std::vector<float> proto{0.2f, 0.7f, 0.1f};
  selar::HeatmapExportConfig cfg;
  cfg.upsample_factor = 2;
  cfg.selection = selar::SelectTopK{2};
  const auto fa = selar::export_heatmaps(x, model, cfg, a, "s", std::span<const float>(proto));
  const auto fb = selar::export_heatmaps(x, model, cfg, b, "s", std::span<const float>(proto));
  ASSERT_EQ(fa.size(), 2u);
  EXPECT_EQ(fa[0].filename(), "s_attr001.pgm");
  EXPECT_EQ(fa[1].filename(), "s_attr000.pgm");
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(slurp(fa[i]), slurp(fb[i]));
  EXPECT_EQ(slurp(a / "s_index.tsv"), slurp(b / "s_index.tsv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(ExportTest, ImageMatchesAttributeMap) {
  const auto dir = fs::temp_directory_path() / "selar_viz_map";
  fs::remove_all(dir);
  std::mt19937_64 rng(5);
  const auto model = random_model(2, 3, rng);
  Tensor x({3, 4, 3}, fixtures::normal_values(36, rng));
  const auto files = selar::export_heatmaps(x, model, {}, dir, "m");
  const auto maps = selar::attribute_maps(x, model);
  std::vector<double> plane(12);
  for (std::size_t p = 0; p < 12; ++p) plane[p] = maps[p * 2 + 1];
  const auto px = selar::to_intensity(plane);
  const auto bytes = slurp(files[1]);
  const std::string payload = bytes.substr(bytes.size() - 12);
  EXPECT_EQ(std::vector<std::uint8_t>(payload.begin(), payload.end()), px);
  fs::remove_all(dir);
}

TEST(ExportTest, UnwritableDirectoryIsIoError) {
  const auto file = fs::temp_directory_path() / "selar_viz_blocker";
  std::ofstream(file) << "x";
  std::mt19937_64 rng(6);
  const auto model = random_model(2, 2, rng);
  Tensor x({2, 2, 2}, 1.f);
  EXPECT_THROW(selar::export_heatmaps(x, model, {}, file / "sub", "s"), selar::IoError);
  fs::remove(file);
}
