#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "selar/error.hpp"
#include "selar/model.hpp"
#include "selar/tensor.hpp"

namespace selar {

enum class Interpolation { Nearest, Bilinear };

struct SelectAll {};
struct SelectTopK {
  std::size_t k = 1;  // by the sample's class prototype value
};
struct SelectIndices {
  std::vector<std::size_t> indices;
};
using AttributeSelection = std::variant<SelectAll, SelectTopK, SelectIndices>;

struct HeatmapExportConfig {
  std::size_t upsample_factor = 1;
  Interpolation interpolation = Interpolation::Nearest;
  AttributeSelection selection = SelectAll{};
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Upsamples a height x width map by an integer factor. Bilinear sampling
/// uses half-pixel centers: src = (dst + 0.5) / factor - 0.5, clamped to the
/// grid.
inline std::vector<double> upsample(std::span<const double> map, std::size_t height,
                                    std::size_t width, std::size_t factor,
                                    Interpolation mode) {
  if (factor < 1) throw ValidationError("upsample factor must be >= 1");
  const std::size_t oh = height * factor, ow = width * factor;
  std::vector<double> out(oh * ow);
  auto coord = [&](std::size_t dst, std::size_t n) {
    const double s = (static_cast<double>(dst) + 0.5) / static_cast<double>(factor) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
  };
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      if (mode == Interpolation::Nearest) {
        out[y * ow + x] = map[(y / factor) * width + x / factor];
        continue;
      }
      const double sy = coord(y, height), sx = coord(x, width);
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, height - 1);
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
      const double top = map[y0 * width + x0] * (1 - tx) + map[y0 * width + x1] * tx;
      const double bot = map[y1 * width + x0] * (1 - tx) + map[y1 * width + x1] * tx;
      out[y * ow + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

/// Min-max normalizes to 0..255 (rounded). A constant map becomes 128.
inline std::vector<std::uint8_t> to_intensity(std::span<const double> values) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::vector<std::uint8_t> px(values.size(), 128);
  if (values.empty() || *hi == *lo) return px;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) / range * 255.0));
  }
  return px;
}

/// Renders channel `channel` of an [H,W,C] map.
template <class T>
GrayImage render_heatmap(const BasicTensor<T>& maps, std::size_t channel,
                         std::size_t factor, Interpolation mode) {
  const std::size_t locations = spatial_size(maps);
  const std::size_t channels = maps.dim(2);
  if (channel >= channels) {
    throw ValidationError("attribute index " + std::to_string(channel) +
                          " out of range for " + std::to_string(channels) +
                          " attribute maps");
  }
  std::vector<double> plane(locations);
  for (std::size_t p = 0; p < locations; ++p) {
    plane[p] = static_cast<double>(maps[p * channels + channel]);
  }
  const auto up = upsample(plane, maps.dim(0), maps.dim(1), factor, mode);
  return {maps.dim(1) * factor, maps.dim(0) * factor, to_intensity(up)};
}

/// Binary PGM: "P5\n<w> <h>\n255\n" followed by raw bytes.
inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const auto bytes = encode_pgm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// Resolves the selection to attribute indices. Top-k ranks by prototype
/// value, highest first, ties to the lower index.
inline std::vector<std::size_t> select_attributes(
    const AttributeSelection& selection, std::size_t attributes,
    std::optional<std::span<const float>> prototype) {
  std::vector<std::size_t> out;
  if (std::holds_alternative<SelectAll>(selection)) {
    out.resize(attributes);
    std::iota(out.begin(), out.end(), 0);
  } else if (const auto* top = std::get_if<SelectTopK>(&selection)) {
    if (top->k < 1) throw ValidationError("top-k selection needs k >= 1");
    if (!prototype || prototype->size() != attributes) {
      throw ValidationError("top-k selection needs the sample's class prototype");
    }
    out.resize(attributes);
    std::iota(out.begin(), out.end(), 0);
    std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
      return (*prototype)[a] > (*prototype)[b];
    });
    out.resize(std::min(top->k, attributes));
  } else {
    out = std::get<SelectIndices>(selection).indices;
    for (std::size_t i : out) {
      if (i >= attributes) {
        throw ValidationError("attribute index " + std::to_string(i) +
                              " out of range for " + std::to_string(attributes) +
                              " attributes");
      }
    }
  }
  return out;
}

/// Writes one PGM per selected attribute map, named
/// "<sample_id>_attr<index>.pgm", plus "<sample_id>_index.tsv" listing
/// attribute index, name and file. Returns the image paths in selection
/// order.
inline std::vector<std::filesystem::path> export_heatmaps(
    const Tensor& featmap, const ProjectionModel& model,
    const HeatmapExportConfig& config, const std::filesystem::path& out_dir,
    const std::string& sample_id,
    std::optional<std::span<const float>> prototype = std::nullopt,
    std::span<const std::string> attribute_names = {}) {
  if (config.upsample_factor < 1) throw ValidationError("upsample factor must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory '" + out_dir.string() + "'");
  }
  const auto maps = attribute_maps(featmap, model);
  const auto chosen = select_attributes(config.selection, model.attributes(), prototype);

  std::vector<std::filesystem::path> written;
  std::string index;
  for (std::size_t a : chosen) {
    char name[32];
    std::snprintf(name, sizeof name, "_attr%03zu.pgm", a);
    const auto path = out_dir / (sample_id + name);
    write_pgm(path, render_heatmap(maps, a, config.upsample_factor, config.interpolation));
    written.push_back(path);
    index += std::to_string(a) + "\t" +
             (a < attribute_names.size() ? attribute_names[a] : std::string()) + "\t" +
             path.filename().string() + "\n";
  }
  const auto index_path = out_dir / (sample_id + "_index.tsv");
  std::ofstream out(index_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + index_path.string() + "'");
  out << index;
  return written;
}

}  // namespace selar
