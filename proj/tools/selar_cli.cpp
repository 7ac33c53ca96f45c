// selar: train, evaluate and inspect attribute-localizing zero-shot models.
//
// Settings come from flags and an optional "key = value" config file. Flags
// win. Config keys use underscores where flags use dashes (batch_size vs
// --batch-size); relative paths in a config file resolve against its folder.

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "selar/selar.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kValidation = 4,
  kCheckFailed = 5,
};

constexpr double kGradTolerance = 1e-4;

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

int report_error(int code, std::string_view kind, const std::string& message) {
  std::cerr << "error\t" << code << '\t' << kind << '\t' << one_line(message) << '\n';
  return code;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw selar::IoError("cannot create output directory '" + dir.string() + "'");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw selar::IoError("cannot write '" + path.string() + "'");
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string shortest(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

// One command's settings: registered flags, merged with a config file after
// parsing.
class Settings {
 public:
  explicit Settings(CLI::App* cmd) : cmd_(cmd) {
    config_opt_ = cmd_->add_option("--config", config_flag_, "key = value settings file");
  }

  void value(const std::string& key, const std::string& help, std::string fallback = {}) {
    add(key, help, std::move(fallback), false);
  }
  void path(const std::string& key, const std::string& help, std::string fallback = {}) {
    add(key, help, std::move(fallback), true);
  }
  void flag(const std::string& key, const std::string& help) {
    auto& e = entries_[key];
    e.is_flag = true;
    e.fallback = "false";
    e.opt = cmd_->add_flag("--" + dashed(key), e.flag_set, help);
  }

  // Call once parsing succeeded.
  void resolve() {
    std::map<std::string, std::string> file;
    fs::path base;
    if (config_opt_->count()) {
      file = selar::read_key_values(config_flag_);
      base = fs::path(config_flag_).parent_path();
    }
    for (auto& [key, e] : entries_) {
      if (e.opt->count()) {
        e.effective = e.is_flag ? std::string(e.flag_set ? "true" : "false") : e.flag_value;
        e.present = true;
      } else if (auto it = file.find(key); it != file.end()) {
        e.effective = it->second;
        if (e.is_path && !e.effective.empty() && fs::path(e.effective).is_relative()) {
          e.effective = (base / e.effective).string();
        }
        e.present = true;
      } else {
        e.effective = e.fallback;
        e.present = !e.fallback.empty();
      }
    }
  }

  bool has(const std::string& key) const { return entry(key).present; }
  bool from_flag(const std::string& key) const { return entry(key).opt->count() > 0; }

  std::string text(const std::string& key) const {
    const auto& e = entry(key);
    if (!e.present) {
      throw selar::ValidationError("missing setting '" + key + "' (flag --" + dashed(key) +
                                   " or config key)");
    }
    return e.effective;
  }

  fs::path file(const std::string& key) const { return text(key); }

  double real(const std::string& key) const {
    const auto s = text(key);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) bad(key, s, "a number");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const auto s = text(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) bad(key, s, "a non-negative integer");
    return v;
  }

  bool boolean(const std::string& key) const {
    const auto s = text(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    bad(key, s, "true or false");
  }

  std::size_t threads() const {
    if (!has("threads")) return selar::default_threads();
    const auto n = count("threads");
    if (n < 1) throw selar::ValidationError("threads must be >= 1");
    return n;
  }

  // Effective settings, one "key = value" per line, sorted by key.
  std::string echo() const {
    std::string out;
    for (const auto& [key, e] : entries_) {
      if (e.present) out += key + " = " + e.effective + "\n";
    }
    return out;
  }

 private:
  struct Entry {
    CLI::Option* opt = nullptr;
    std::string flag_value;
    bool flag_set = false;
    bool is_flag = false;
    bool is_path = false;
    std::string fallback;
    std::string effective;
    bool present = false;
  };

  static std::string dashed(std::string key) {
    for (char& c : key) {
      if (c == '_') c = '-';
    }
    return key;
  }

  [[noreturn]] static void bad(const std::string& key, const std::string& v, const char* want) {
    throw selar::ValidationError("invalid value '" + v + "' for " + key + ": expected " + want);
  }

  void add(const std::string& key, const std::string& help, std::string fallback, bool is_path) {
    auto& e = entries_[key];
    e.is_path = is_path;
    e.fallback = std::move(fallback);
    e.opt = cmd_->add_option("--" + dashed(key), e.flag_value, help);
  }

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw std::logic_error("unregistered setting " + key);
    return it->second;
  }

  CLI::App* cmd_;
  CLI::Option* config_opt_ = nullptr;
  std::string config_flag_;
  std::map<std::string, Entry> entries_;
};

void add_model_choice(Settings& s) {
  s.value("aggregation", "gap or gmp", "gmp");
  s.value("space", "visual, attribute or class", "attribute");
}

void add_training(Settings& s) {
  const selar::TrainConfig d;
  s.value("lr", "learning rate", shortest(d.learning_rate));
  s.value("momentum", "SGD momentum", shortest(d.momentum));
  s.value("decay_factor", "learning-rate multiplier after the decay epoch",
          shortest(d.decay_factor));
  s.value("decay_epoch", "last epoch at the initial learning rate",
          std::to_string(d.decay_epoch));
  s.value("epochs", "training epochs", std::to_string(d.epochs));
  s.value("batch_size", "mini-batch size", std::to_string(d.batch_size));
  s.value("seed", "initialization and shuffling seed", std::to_string(d.seed));
  s.value("init_scale", "uniform init half-width times sqrt(channels)",
          shortest(d.weight_init_scale));
  s.flag("bias", "learn a per-attribute bias");
}

selar::AttributeMatrix load_normalized(const Settings& s) {
  return selar::normalize_rows(selar::load_attribute_matrix(s.file("attributes")));
}

std::string predictions_tsv(std::span<const selar::LabeledSample> samples,
                            const std::vector<selar::Prediction>& preds) {
  std::string out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out += samples[i].sample_id + '\t' + preds[i].predicted + '\t' + preds[i].truth + '\n';
  }
  return out;
}

std::vector<std::string> distinct_classes(std::span<const selar::LabeledSample> samples) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.class_id).second) out.push_back(s.class_id);
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_train(const Settings& s, bool porcelain) {
  selar::TrainConfig tc;
  tc.learning_rate = s.real("lr");
  tc.momentum = s.real("momentum");
  tc.decay_factor = s.real("decay_factor");
  tc.decay_epoch = s.count("decay_epoch");
  tc.epochs = s.count("epochs");
  tc.batch_size = s.count("batch_size");
  tc.seed = s.count("seed");
  tc.weight_init_scale = s.real("init_scale");
  tc.threads = s.threads();
  tc.validate();
  selar::ModelOptions mo{selar::parse_aggregation(s.text("aggregation")),
                         selar::parse_space(s.text("space")), s.boolean("bias")};
  const fs::path out = s.file("out");

  const auto attrs = load_normalized(s);
  const auto seen = s.has("split") ? attrs.select(selar::load_split(s.file("split")).seen_classes)
                                   : attrs;
  const auto samples = selar::load_samples(s.file("manifest"));
  const auto result = selar::train(samples, seen, tc, mo);

  ensure_directory(out);
  selar::save_model(out / "model.slrt", result.model, {tc.seed});
  std::string history = "epoch\tmean_loss\n";
  for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
    history += std::to_string(e + 1) + '\t' + fmt("%.9g", result.loss_history[e]) + '\n';
  }
  write_text(out / "loss_history.txt", history);
  const auto preds = selar::predict_all(result.model, samples, seen, tc.threads);
  write_text(out / "train_predictions.tsv", predictions_tsv(samples, preds));
  write_text(out / "train.effective.conf", s.echo());

  const double top1 = selar::per_class_top1(preds, distinct_classes(samples));
  if (porcelain) {
    for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
      std::cout << "loss\t" << e + 1 << '\t' << fmt("%.9f", result.loss_history[e]) << '\n';
    }
    std::cout << "train_top1\t" << fmt("%.9f", top1) << '\n'
              << "model\t" << (out / "model.slrt").string() << '\n';
  } else {
    std::cout << "epoch  mean_loss\n";
    for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
      std::cout << fmt("%5.0f", double(e + 1)) << "  " << fmt("%.6f", result.loss_history[e])
                << '\n';
    }
    std::cout << "training-set per-class top-1: " << fmt("%.2f", 100 * top1) << "%\n"
              << "model written to " << (out / "model.slrt").string() << '\n';
  }
  return kOk;
}

int cmd_eval(const Settings& s, bool porcelain) {
  const auto mode = s.text("mode");
  if (mode != "zsl" && mode != "gzsl" && mode != "both") {
    throw selar::ValidationError("invalid mode '" + mode + "' (expected zsl, gzsl or both)");
  }
  // --manifest on the command line beats test_manifest; in a config file
  // test_manifest is preferred since manifest names the training set there.
  fs::path manifest;
  if (s.from_flag("manifest") || !s.has("test_manifest")) {
    manifest = s.file("manifest");
  } else {
    manifest = s.file("test_manifest");
  }
  fs::path model_path;
  if (s.has("model")) {
    model_path = s.file("model");
  } else if (s.has("out")) {
    model_path = s.file("out") / "model.slrt";
  } else {
    model_path = s.file("model");  // raises the missing-setting error
  }
  const auto threads = s.threads();
  const auto model = selar::load_model(model_path);
  const auto attrs = load_normalized(s);
  const auto split = selar::load_split(s.file("split"));
  const auto samples = selar::load_samples(manifest);

  std::optional<double> zsl;
  std::optional<selar::GzslReport> gzsl;
  if (mode == "zsl") {
    zsl = selar::evaluate_zsl(model, samples, attrs.select(split.unseen_classes), threads);
  } else if (mode == "both") {
    std::vector<selar::LabeledSample> unseen;
    for (const auto& x : samples) {
      if (split.is_unseen(x.class_id)) unseen.push_back(x);
    }
    zsl = selar::evaluate_zsl(model, unseen, attrs.select(split.unseen_classes), threads);
  }
  if (mode != "zsl") {
    std::vector<std::string> joint = split.seen_classes;
    joint.insert(joint.end(), split.unseen_classes.begin(), split.unseen_classes.end());
    gzsl = selar::evaluate_gzsl(model, samples, attrs.select(joint), split, threads);
  }

  std::string kv, records;
  if (zsl) {
    kv += "zsl_top1=" + fmt("%.1f", 100 * *zsl) + "\n";
    records += "zsl_top1\t" + fmt("%.9f", 100 * *zsl) + "\n";
  }
  if (gzsl) {
    kv += selar::to_key_value(*gzsl);
    records += selar::to_records(*gzsl);
  }
  if (s.has("out")) {
    const fs::path out = s.file("out");
    ensure_directory(out);
    write_text(out / "report.txt", kv);
    write_text(out / "eval.effective.conf", s.echo());
  }

  if (porcelain) {
    std::cout << records;
    return kOk;
  }
  std::cout << "metric          value\n";
  if (zsl) std::cout << "zsl top-1     " << fmt("%8.2f", 100 * *zsl) << '\n';
  if (gzsl) {
    std::cout << "gzsl unseen   " << fmt("%8.2f", gzsl->acc_unseen) << '\n'
              << "gzsl seen     " << fmt("%8.2f", gzsl->acc_seen) << '\n'
              << "harmonic mean " << fmt("%8.2f", gzsl->harmonic_mean) << '\n'
              << "S/U           " << fmt("%8.2f", gzsl->bias_ratio) << '\n';
  }
  return kOk;
}

int cmd_predict(const Settings& s, bool) {
  const auto classes = s.text("classes");
  const auto model = selar::load_model(s.file("model"));
  const auto attrs = load_normalized(s);
  std::optional<selar::AttributeMatrix> chosen;
  if (classes == "all") {
    chosen = attrs;
  } else if (classes == "seen" || classes == "unseen") {
    const auto split = selar::load_split(s.file("split"));
    chosen = attrs.select(classes == "seen" ? split.seen_classes : split.unseen_classes);
  } else {
    throw selar::ValidationError("invalid classes '" + classes +
                                 "' (expected all, seen or unseen)");
  }
  const auto samples = selar::load_samples(s.file("manifest"));
  std::cout << predictions_tsv(samples,
                               selar::predict_all(model, samples, *chosen, s.threads()));
  return kOk;
}

selar::AttributeSelection parse_selection(const std::string& text) {
  if (text == "all") return selar::SelectAll{};
  auto number = [&](std::string_view v) {
    std::size_t n = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
      throw selar::ValidationError("invalid attribute selection '" + text + "'");
    }
    return n;
  };
  if (text.rfind("top:", 0) == 0) return selar::SelectTopK{number(text.substr(4))};
  selar::SelectIndices idx;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) idx.indices.push_back(number(part));
  return idx;
}

int cmd_export_maps(const Settings& s, bool porcelain) {
  selar::HeatmapExportConfig cfg;
  cfg.upsample_factor = s.count("upsample");
  const auto interp = s.text("interp");
  if (interp == "nearest") {
    cfg.interpolation = selar::Interpolation::Nearest;
  } else if (interp == "bilinear") {
    cfg.interpolation = selar::Interpolation::Bilinear;
  } else {
    throw selar::ValidationError("invalid interpolation '" + interp +
                                 "' (expected nearest or bilinear)");
  }
  cfg.selection = parse_selection(s.text("select"));
  const fs::path out = s.file("out");

  const auto model = selar::load_model(s.file("model"));
  const auto samples = selar::load_samples(s.file("manifest"));
  std::optional<selar::AttributeMatrix> attrs;
  if (s.has("attributes")) attrs = selar::load_attribute_matrix(s.file("attributes"));
  std::vector<std::string> names;
  if (s.has("attr_names")) {
    std::ifstream in(s.file("attr_names"));
    if (!in) throw selar::IoError("cannot open '" + s.text("attr_names") + "' for reading");
    for (std::string line; std::getline(in, line);) names.push_back(line);
  }

  std::vector<std::string> wanted;
  if (s.has("samples")) {
    std::stringstream ss(s.text("samples"));
    for (std::string id; std::getline(ss, id, ',');) wanted.push_back(id);
  } else {
    for (const auto& x : samples) wanted.push_back(x.sample_id);
  }

  ensure_directory(out);
  std::size_t images = 0;
  for (const auto& id : wanted) {
    auto it = std::find_if(samples.begin(), samples.end(),
                           [&](const auto& x) { return x.sample_id == id; });
    if (it == samples.end()) throw selar::ValidationError("unknown sample id '" + id + "'");
    std::optional<std::span<const float>> proto;
    if (attrs) {
      const auto row = attrs->index_of(it->class_id);
      if (!row) {
        throw selar::ValidationError("class '" + it->class_id + "' has no attribute row");
      }
      proto = attrs->row(*row);
    }
    const auto files = selar::export_heatmaps(it->features, model, cfg, out, id, proto, names);
    images += files.size();
    if (porcelain) {
      for (const auto& f : files) std::cout << "image\t" << id << '\t' << f.string() << '\n';
    }
  }
  write_text(out / "export.effective.conf", s.echo());
  if (!porcelain) {
    std::cout << "wrote " << images << " heatmaps for " << wanted.size() << " samples to "
              << out.string() << '\n';
  }
  return kOk;
}

int cmd_gen_synth(const Settings& s, bool porcelain) {
  selar::SynthParams p;
  p.n_seen = s.count("n_seen");
  p.n_unseen = s.count("n_unseen");
  p.samples_per_class = s.count("samples_per_class");
  p.attributes = s.count("n_attributes");
  p.grid = s.count("grid");
  p.noise_sigma = s.real("noise");
  p.seed = s.count("seed");
  const auto r = selar::synth_generate(p, s.file("out"));
  if (porcelain) {
    std::cout << "oracle_accuracy\t" << fmt("%.9f", r.oracle_accuracy) << '\n'
              << "config\t" << r.config_path.string() << '\n';
  } else {
    std::cout << "nearest-prototype oracle accuracy: " << fmt("%.2f", 100 * r.oracle_accuracy)
              << "%\nconfig written to " << r.config_path.string() << '\n';
  }
  return kOk;
}

int cmd_grad_check(const Settings& s, bool porcelain) {
  selar::GradCheckSuiteOptions opt;
  opt.instances = s.count("instances");
  opt.h = s.real("step");
  opt.seed = s.count("seed");
  opt.use_bias = s.boolean("bias");
  if (opt.instances < 1) throw selar::ValidationError("instances must be >= 1");
  if (!(opt.h > 0)) throw selar::ValidationError("step must be > 0");
  const auto rows = selar::grad_check_suite(opt);

  bool ok = true;
  if (!porcelain) std::cout << "space      aggregation  checked  kinks  max_rel_error  status\n";
  for (const auto& r : rows) {
    const bool pass = r.result.max_relative_error <= kGradTolerance;
    ok &= pass;
    const std::string space(selar::to_string(r.space)), agg(selar::to_string(r.aggregation));
    if (porcelain) {
      std::cout << "grad_check\t" << space << '\t' << agg << '\t' << r.result.checked << '\t'
                << r.result.kinks << '\t' << fmt("%.3e", r.result.max_relative_error) << '\t'
                << (pass ? "pass" : "fail") << '\n';
    } else {
      char line[128];
      std::snprintf(line, sizeof line, "%-10s %-12s %7zu %6zu %14.3e  %s\n", space.c_str(),
                    agg.c_str(), r.result.checked, r.result.kinks,
                    r.result.max_relative_error, pass ? "pass" : "FAIL");
      std::cout << line;
    }
  }
  if (s.has("out")) {
    ensure_directory(s.file("out"));
    write_text(s.file("out") / "grad_check.effective.conf", s.echo());
  }
  if (!ok) {
    return report_error(kCheckFailed, "check",
                        "gradient check exceeded relative error " + fmt("%g", kGradTolerance));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-localizing zero-shot classification"};
  app.require_subcommand(1);
  app.fallthrough();
  bool porcelain = false;
  app.add_flag("--porcelain", porcelain, "line-oriented tab-separated output");

  using Handler = int (*)(const Settings&, bool);
  struct Command {
    CLI::App* app;
    std::unique_ptr<Settings> settings;
    Handler handler;
  };
  std::vector<Command> commands;
  auto command = [&](const char* name, const char* help, Handler h) -> Settings& {
    auto* sub = app.add_subcommand(name, help);
    commands.push_back({sub, std::make_unique<Settings>(sub), h});
    return *commands.back().settings;
  };

  auto& train = command("train", "fit a projection model on seen classes", cmd_train);
  train.path("manifest", "training manifest (sample_id, feature file, class)");
  train.path("attributes", "class attribute CSV");
  train.path("split", "seen/unseen split file; restricts training classes to seen");
  train.path("out", "output directory");
  add_model_choice(train);
  add_training(train);
  train.value("threads", "worker threads");

  auto& eval = command("eval", "report ZSL and GZSL accuracy", cmd_eval);
  eval.path("model", "model file (default: <out>/model.slrt)");
  eval.path("manifest", "test manifest");
  eval.path("test_manifest", "test manifest, used when --manifest is absent");
  eval.path("attributes", "class attribute CSV");
  eval.path("split", "seen/unseen split file");
  eval.path("out", "directory for report.txt");
  eval.value("mode", "zsl, gzsl or both", "both");
  eval.value("threads", "worker threads");

  auto& predict = command("predict", "print per-sample predictions", cmd_predict);
  predict.path("model", "model file");
  predict.path("manifest", "samples to classify");
  predict.path("attributes", "class attribute CSV");
  predict.path("split", "split file, needed for --classes seen|unseen");
  predict.value("classes", "candidate classes: all, seen or unseen", "all");
  predict.value("threads", "worker threads");

  auto& maps = command("export-maps", "write per-attribute heatmaps as PGM", cmd_export_maps);
  maps.path("model", "model file");
  maps.path("manifest", "manifest holding the samples");
  maps.path("attributes", "class attribute CSV, needed for top:K selection");
  maps.path("attr_names", "text file with one attribute name per line");
  maps.path("out", "output directory");
  maps.value("samples", "comma-separated sample ids (default: all)");
  maps.value("upsample", "integer upsampling factor", "1");
  maps.value("interp", "nearest or bilinear", "nearest");
  maps.value("select", "all, top:K or comma-separated indices", "all");

  const selar::SynthParams sp;
  auto& synth = command("gen-synth", "generate a planted-attribute dataset", cmd_gen_synth);
  synth.path("out", "output directory");
  synth.value("n_seen", "seen classes", std::to_string(sp.n_seen));
  synth.value("n_unseen", "unseen classes", std::to_string(sp.n_unseen));
  synth.value("samples_per_class", "samples per class", std::to_string(sp.samples_per_class));
  synth.value("n_attributes", "attributes (and feature channels)", std::to_string(sp.attributes));
  synth.value("grid", "spatial grid side", std::to_string(sp.grid));
  synth.value("noise", "feature noise sigma", shortest(sp.noise_sigma));
  synth.value("seed", "generator seed", std::to_string(sp.seed));

  const selar::GradCheckSuiteOptions go;
  auto& grad = command("grad-check", "compare analytic and numeric gradients", cmd_grad_check);
  grad.value("instances", "random instances per space/aggregation pair",
             std::to_string(go.instances));
  grad.value("step", "central-difference step", shortest(go.h));
  grad.value("seed", "instance seed", std::to_string(go.seed));
  grad.flag("bias", "include a bias term");
  grad.path("out", "directory for the effective config echo");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(kUsage, "usage", e.what());
  }

  const auto* chosen = app.get_subcommands().front();
  const auto& cmd = *std::find_if(commands.begin(), commands.end(),
                                  [&](const Command& c) { return c.app == chosen; });
  try {
    cmd.settings->resolve();
    return cmd.handler(*cmd.settings, porcelain);
  } catch (const selar::IoError& e) {
    return report_error(kIo, e.kind(), e.what());
  } catch (const selar::Error& e) {
    return report_error(kValidation, e.kind(), e.what());
  } catch (const std::exception& e) {
    return report_error(kInternal, "internal", e.what());
  }
}
