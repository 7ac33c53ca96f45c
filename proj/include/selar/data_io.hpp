#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "selar/dataset.hpp"
#include "selar/error.hpp"
#include "selar/model.hpp"
#include "selar/tensor.hpp"

namespace selar {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SLRT tensor files
//
//   bytes 0..3   magic "SLRT"
//   u32 LE       version (= 1)
//   u32 LE       ndim
//   ndim x u32   dimension sizes
//   f32 LE       payload, row-major
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kSlrtMagic = {'S', 'L', 'R', 'T'};
inline constexpr std::uint32_t kSlrtVersion = 1;
inline constexpr std::uint32_t kSlrtMaxRank = 16;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff),
                     static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) |
      (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
  return true;
}

inline std::string trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<float> parse_float(std::string_view s) {
  float v{};
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

inline std::ifstream open_in(const fs::path& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const fs::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > kSlrtMaxRank) {
    throw DimensionOverflowError("tensor rank " + std::to_string(t.rank()) +
                                 " exceeds SLRT limit");
  }
  for (std::size_t d : t.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw DimensionOverflowError("dimension " + std::to_string(d) +
                                   " does not fit in 32 bits");
    }
  }
  os.write(kSlrtMagic.data(), 4);
  detail::put_u32(os, kSlrtVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw IoError("failed writing tensor payload");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw TruncatedError("SLRT header truncated");
  if (magic != kSlrtMagic) {
    throw BadMagicError("bad SLRT magic '" + std::string(magic.data(), 4) + "'");
  }
  std::uint32_t version = 0, ndim = 0;
  if (!detail::get_u32(is, version)) throw TruncatedError("SLRT header truncated");
  if (version != kSlrtVersion) {
    throw VersionMismatchError("unsupported SLRT version " + std::to_string(version));
  }
  if (!detail::get_u32(is, ndim)) throw TruncatedError("SLRT header truncated");
  if (ndim == 0 || ndim > kSlrtMaxRank) {
    throw DimensionOverflowError("SLRT rank " + std::to_string(ndim) +
                                 " outside [1, " + std::to_string(kSlrtMaxRank) + "]");
  }
  Shape shape(ndim);
  std::uint64_t count = 1;
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;
  for (auto& d : shape) {
    std::uint32_t v = 0;
    if (!detail::get_u32(is, v)) throw TruncatedError("SLRT header truncated");
    if (v == 0) throw FormatError("SLRT dimension of size 0");
    count *= v;
    if (count > kMaxElements) {
      throw DimensionOverflowError("SLRT element count exceeds 2^40");
    }
    d = v;
  }
  std::vector<float> data(count);
  for (auto& x : data) {
    std::uint32_t bits = 0;
    if (!detail::get_u32(is, bits)) {
      throw TruncatedError("SLRT payload truncated: header declares " +
                           shape_to_string(shape));
    }
    x = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void write_tensor(const fs::path& path, const Tensor& t) {
  auto out = detail::open_out(path, true);
  write_tensor(out, t);
}

inline Tensor read_tensor(const fs::path& path) {
  auto in = detail::open_in(path, true);
  Tensor t = read_tensor(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after tensor in '" + path.string() + "'");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Attribute matrices: one line per class, "class_id,v1,...,vL".
// ---------------------------------------------------------------------------

inline AttributeMatrix parse_attribute_matrix(std::istream& in,
                                              const std::string& source = "<stream>") {
  std::vector<std::string> ids;
  std::vector<float> values;
  std::size_t width = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto fields = detail::split(text, ',');
    const auto where = source + ":" + std::to_string(lineno);
    if (fields.size() < 2) throw ParseError(where + ": expected class id and values");
    if (width == 0) width = fields.size() - 1;
    if (fields.size() - 1 != width) {
      throw ParseError(where + ": ragged row with " + std::to_string(fields.size() - 1) +
                       " values, expected " + std::to_string(width));
    }
    ids.push_back(detail::trim(fields[0]));
    if (ids.back().empty()) throw ParseError(where + ": empty class id");
    for (std::size_t j = 1; j < fields.size(); ++j) {
      auto v = detail::parse_float(detail::trim(fields[j]));
      if (!v) throw ParseError(where + ": non-numeric field '" + fields[j] + "'");
      values.push_back(*v);
    }
  }
  if (ids.empty()) throw ParseError(source + ": no attribute rows");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) {
      throw ParseError(source + ": duplicate class id '" + id + "'");
    }
  }
  const std::size_t n = ids.size();
  return AttributeMatrix(std::move(ids), Tensor({n, width}, std::move(values)));
}

inline AttributeMatrix load_attribute_matrix(const fs::path& path) {
  auto in = detail::open_in(path);
  return parse_attribute_matrix(in, path.string());
}

inline void write_attribute_matrix(const fs::path& path, const AttributeMatrix& attrs) {
  auto out = detail::open_out(path, true);
  for (std::size_t i = 0; i < attrs.rows(); ++i) {
    out << attrs.class_ids()[i];
    for (float v : attrs.row(i)) out << ',' << detail::format_float(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Split files:
//   [seen]
//   class ids, one per line
//   [unseen]
//   class ids, one per line
// Blank lines and lines starting with '#' are ignored.
// ---------------------------------------------------------------------------

inline SplitSpec parse_split(std::istream& in, const std::string& source = "<stream>") {
  std::vector<std::string> seen, unseen;
  std::vector<std::string>* section = nullptr;
  bool had_seen = false, had_unseen = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    if (text == "[seen]") {
      section = &seen;
      had_seen = true;
    } else if (text == "[unseen]") {
      section = &unseen;
      had_unseen = true;
    } else if (!section) {
      throw ParseError(source + ":" + std::to_string(lineno) +
                       ": class id outside a [seen]/[unseen] section");
    } else {
      section->push_back(text);
    }
  }
  if (!had_seen || !had_unseen) {
    throw ParseError(source + ": split file needs [seen] and [unseen] sections");
  }
  return make_split(std::move(seen), std::move(unseen));
}

inline SplitSpec load_split(const fs::path& path) {
  auto in = detail::open_in(path);
  return parse_split(in, path.string());
}

inline void write_split(const fs::path& path, const SplitSpec& split) {
  auto out = detail::open_out(path, true);
  out << "[seen]\n";
  for (const auto& c : split.seen_classes) out << c << '\n';
  out << "[unseen]\n";
  for (const auto& c : split.unseen_classes) out << c << '\n';
}

// ---------------------------------------------------------------------------
// Manifests: "sample_id<TAB>relative_path<TAB>class_id" per line, paths
// relative to the manifest's directory.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string sample_id;
  fs::path feature_path;  // resolved against the manifest directory
  std::string class_id;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Shape feature_shape;  // filled in by load_samples
};

inline DatasetManifest load_manifest(const fs::path& path) {
  auto in = detail::open_in(path);
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line.front() == '#') continue;
    const auto fields = detail::split(line, '\t');
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 3) {
      throw ParseError(where + ": expected 3 tab-separated fields, got " +
                       std::to_string(fields.size()));
    }
    if (!ids.insert(fields[0]).second) {
      throw ParseError(where + ": duplicate sample id '" + fields[0] + "'");
    }
    manifest.entries.push_back({fields[0], base / fields[1], fields[2]});
  }
  return manifest;
}

inline void write_manifest(const fs::path& path,
                           const std::vector<std::array<std::string, 3>>& rows) {
  auto out = detail::open_out(path, true);
  for (const auto& r : rows) out << r[0] << '\t' << r[1] << '\t' << r[2] << '\n';
}

/// Reads every feature file of the manifest; all must share one [H,W,D] shape.
inline std::vector<LabeledSample> load_samples(DatasetManifest& manifest) {
  std::vector<LabeledSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Tensor t = read_tensor(e.feature_path);
    if (t.rank() != 3) {
      throw ShapeError("feature file '" + e.feature_path.string() + "' has shape " +
                       shape_to_string(t.shape()) + ", expected [H,W,D]");
    }
    if (manifest.feature_shape.empty()) manifest.feature_shape = t.shape();
    if (t.shape() != manifest.feature_shape) {
      throw ShapeError("feature file '" + e.feature_path.string() + "' has shape " +
                       shape_to_string(t.shape()) + ", expected " +
                       shape_to_string(manifest.feature_shape));
    }
    out.push_back({e.sample_id, std::move(t), e.class_id});
  }
  return out;
}

inline std::vector<LabeledSample> load_samples(const fs::path& manifest_path) {
  auto manifest = load_manifest(manifest_path);
  return load_samples(manifest);
}

// ---------------------------------------------------------------------------
// "key = value" text files (configs and model sidecars).
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> read_key_values(const fs::path& path) {
  auto in = detail::open_in(path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) +
                       ": expected 'key = value'");
    }
    kv[detail::trim(std::string_view(text).substr(0, eq))] =
        detail::trim(std::string_view(text).substr(eq + 1));
  }
  return kv;
}

inline void write_key_values(const fs::path& path,
                             const std::vector<std::pair<std::string, std::string>>& kv) {
  auto out = detail::open_out(path, true);
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
}

// ---------------------------------------------------------------------------
// Model files: `path` holds W then (optionally) the bias as consecutive SLRT
// records; `path + ".meta"` is a key = value sidecar.
// ---------------------------------------------------------------------------

struct ModelMetadata {
  std::uint64_t seed = 0;
};

inline fs::path model_meta_path(const fs::path& model_path) {
  return fs::path(model_path.string() + ".meta");
}

inline void save_model(const fs::path& path, const ProjectionModel& model,
                       const ModelMetadata& meta = {}) {
  model.validate();
  {
    auto out = detail::open_out(path, true);
    write_tensor(out, model.weights);
    if (model.bias) {
      write_tensor(out, Tensor({model.bias->size()}, *model.bias));
    }
  }
  write_key_values(model_meta_path(path),
                   {{"format", "selar-model"},
                    {"version", "1"},
                    {"aggregation", std::string(to_string(model.aggregation))},
                    {"space", std::string(to_string(model.space))},
                    {"bias", model.bias ? "true" : "false"},
                    {"attributes", std::to_string(model.attributes())},
                    {"channels", std::to_string(model.channels())},
                    {"seed", std::to_string(meta.seed)}});
}

inline ProjectionModel load_model(const fs::path& path, ModelMetadata* meta = nullptr) {
  const auto kv = read_key_values(model_meta_path(path));
  auto get = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw ParseError("model sidecar for '" + path.string() + "' lacks '" + key + "'");
    }
    return it->second;
  };
  if (get("format") != "selar-model" || get("version") != "1") {
    throw FormatError("'" + path.string() + "' is not a version 1 selar model");
  }
  auto in = detail::open_in(path, true);
  ProjectionModel model{read_tensor(in), std::nullopt,
                        parse_aggregation(get("aggregation")),
                        parse_space(get("space"))};
  if (get("bias") == "true") {
    Tensor b = read_tensor(in);
    model.bias = b.values();
  }
  model.validate();
  if (std::to_string(model.attributes()) != get("attributes") ||
      std::to_string(model.channels()) != get("channels")) {
    throw FormatError("model sidecar dimensions disagree with '" + path.string() + "'");
  }
  if (meta) meta->seed = std::stoull(get("seed"));
  return model;
}

// ---------------------------------------------------------------------------
// Synthetic planted-attribute datasets.
// ---------------------------------------------------------------------------

struct SynthParams {
  std::size_t n_seen = 20;
  std::size_t n_unseen = 5;
  std::size_t samples_per_class = 50;
  std::size_t attributes = 32;  // L; feature channels D equal L
  std::size_t grid = 7;         // M
  double noise_sigma = 0.1;
  std::uint64_t seed = 1;
};

struct SynthResult {
  double oracle_accuracy = 0;
  fs::path attributes_path;
  fs::path split_path;
  fs::path train_manifest;  // seen-class training samples
  fs::path test_manifest;   // held-out seen samples and all unseen samples
  fs::path all_manifest;
  fs::path config_path;
};

namespace detail {

inline constexpr std::size_t kPrototypeRetries = 1000;

inline std::string synth_class_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%03zu", k);
  return buf;
}

// Nearest prototype by cosine similarity over all classes; ties to the
// lowest class index.
inline std::size_t nearest_prototype(std::span<const float> v,
                                     const std::vector<std::vector<float>>& protos) {
  double vnorm = 0;
  for (float x : v) vnorm += static_cast<double>(x) * x;
  vnorm = std::sqrt(vnorm);
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < protos.size(); ++k) {
    double dot = 0, pn = 0;
    for (std::size_t l = 0; l < v.size(); ++l) {
      dot += static_cast<double>(v[l]) * protos[k][l];
      pn += static_cast<double>(protos[k][l]) * protos[k][l];
    }
    const double denom = vnorm * std::sqrt(pn);
    const double score = denom > 0 ? dot / denom : 0.0;
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

/// Writes a planted-attribute dataset to `out_dir`. Each class gets a binary
/// prototype with ceil(L/4) active attributes; each sample is an MxMxL map of
/// N(0, sigma) noise where every active attribute fires (1 + noise) at one
/// random location. The returned oracle accuracy is nearest-prototype
/// (cosine) classification of the GMP-pooled raw maps over all samples.
inline SynthResult synth_generate(const SynthParams& p, const fs::path& out_dir) {
  if (p.n_seen < 1 || p.n_unseen < 1 || p.samples_per_class < 1 ||
      p.attributes < 1 || p.grid < 1) {
    throw ValidationError("synthetic dataset counts must all be >= 1");
  }
  if (!(p.noise_sigma >= 0)) throw ValidationError("noise_sigma must be >= 0");
  std::error_code ec;
  fs::create_directories(out_dir / "features", ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());

  const std::size_t classes = p.n_seen + p.n_unseen;
  const std::size_t L = p.attributes;
  const std::size_t active = (L + 3) / 4;
  const std::size_t locations = p.grid * p.grid;
  std::mt19937_64 rng(p.seed);

  std::vector<std::vector<float>> protos;
  std::set<std::vector<float>> used;
  std::vector<std::size_t> attr_index(L);
  for (std::size_t k = 0; k < classes; ++k) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < detail::kPrototypeRetries; ++attempt) {
      std::iota(attr_index.begin(), attr_index.end(), 0);
      std::shuffle(attr_index.begin(), attr_index.end(), rng);
      std::vector<float> proto(L, 0.0f);
      for (std::size_t j = 0; j < active; ++j) proto[attr_index[j]] = 1.0f;
      if (used.insert(proto).second) {
        protos.push_back(std::move(proto));
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw ValidationError("could not draw a distinct prototype for class " +
                            std::to_string(k) + " after " +
                            std::to_string(detail::kPrototypeRetries) + " attempts");
    }
  }

  std::vector<std::string> ids;
  std::vector<float> attr_values;
  for (std::size_t k = 0; k < classes; ++k) {
    ids.push_back(detail::synth_class_id(k));
    attr_values.insert(attr_values.end(), protos[k].begin(), protos[k].end());
  }
  SynthResult result;
  result.attributes_path = out_dir / "attributes.csv";
  write_attribute_matrix(result.attributes_path,
                         AttributeMatrix(ids, Tensor({classes, L}, attr_values)));
  result.split_path = out_dir / "split.txt";
  write_split(result.split_path,
              make_split({ids.begin(), ids.begin() + p.n_seen},
                         {ids.begin() + p.n_seen, ids.end()}));

  std::normal_distribution<double> normal(0.0, p.noise_sigma > 0 ? p.noise_sigma : 1.0);
  auto noise = [&] { return p.noise_sigma > 0 ? normal(rng) : 0.0; };
  std::uniform_int_distribution<std::size_t> location(0, locations - 1);

  const std::size_t n_test_seen =
      p.samples_per_class >= 2 ? std::max<std::size_t>(1, p.samples_per_class / 5) : 0;
  std::vector<std::array<std::string, 3>> train_rows, test_rows, all_rows;
  std::size_t correct = 0, total = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t s = 0; s < p.samples_per_class; ++s) {
      std::vector<float> data(locations * L);
      for (float& v : data) v = static_cast<float>(noise());
      for (std::size_t l = 0; l < L; ++l) {
        if (protos[k][l] == 0.0f) continue;
        const std::size_t loc = location(rng);
        data[loc * L + l] = static_cast<float>(1.0 + noise());
      }
      Tensor features({p.grid, p.grid, L}, std::move(data));

      const auto pooled = gmp(features);
      correct += detail::nearest_prototype(pooled.values, protos) == k;
      ++total;

      char sid[32];
      std::snprintf(sid, sizeof sid, "%s_%04zu", ids[k].c_str(), s);
      const std::string rel = std::string("features/") + sid + ".slrt";
      write_tensor(out_dir / rel, features);
      std::array<std::string, 3> row{sid, rel, ids[k]};
      all_rows.push_back(row);
      const bool seen = k < p.n_seen;
      if (seen && s < p.samples_per_class - n_test_seen) {
        train_rows.push_back(row);
      } else {
        test_rows.push_back(row);
      }
    }
  }
  result.train_manifest = out_dir / "train.tsv";
  result.test_manifest = out_dir / "test.tsv";
  result.all_manifest = out_dir / "all.tsv";
  write_manifest(result.train_manifest, train_rows);
  write_manifest(result.test_manifest, test_rows);
  write_manifest(result.all_manifest, all_rows);
  result.oracle_accuracy = static_cast<double>(correct) / static_cast<double>(total);

  char oracle[32];
  std::snprintf(oracle, sizeof oracle, "%.6f", result.oracle_accuracy);
  result.config_path = out_dir / "selar.conf";
  write_key_values(result.config_path, {{"manifest", "train.tsv"},
                                        {"test_manifest", "test.tsv"},
                                        {"attributes", "attributes.csv"},
                                        {"split", "split.txt"},
                                        {"oracle_accuracy", oracle},
                                        {"seed", std::to_string(p.seed)}});
  return result;
}

}  // namespace selar
