#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "selar/dataset.hpp"
#include "selar/error.hpp"
#include "selar/model.hpp"
#include "selar/parallel.hpp"

namespace selar {

struct Prediction {
  std::string predicted;
  std::string truth;
};

/// Mean over `class_set` of per-class top-1 accuracy, in [0, 1]. Samples
/// whose true class is outside `class_set` are ignored.
inline double per_class_top1(std::span<const Prediction> predictions,
                             std::span<const std::string> class_set,
                             std::map<std::string, double>* per_class = nullptr) {
  if (class_set.empty()) throw EvaluationError("empty class set");
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> tally;
  for (const auto& c : class_set) tally[c] = {0, 0};
  for (const auto& p : predictions) {
    auto it = tally.find(p.truth);
    if (it == tally.end()) continue;
    ++it->second.second;
    if (p.predicted == p.truth) ++it->second.first;
  }
  double sum = 0.0;
  for (const auto& c : class_set) {
    const auto [correct, total] = tally[c];
    if (total == 0) {
      throw EvaluationError("class '" + c + "' has no test samples");
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(total);
    if (per_class) (*per_class)[c] = acc;
    sum += acc;
  }
  return sum / static_cast<double>(class_set.size());
}

/// Fraction of all samples predicted correctly. Diagnostic only; reported
/// numbers use per_class_top1.
inline double per_image_top1(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw EvaluationError("no predictions");
  std::size_t correct = 0;
  for (const auto& p : predictions) correct += p.predicted == p.truth;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

/// 2*U*S/(U+S). Defined as 0 when either accuracy is 0 (including both).
inline double harmonic_mean(double acc_u, double acc_s) {
  if (acc_u < 0 || acc_s < 0) {
    throw EvaluationError("accuracies must be non-negative");
  }
  if (acc_u == 0 || acc_s == 0) return 0.0;
  return 2.0 * acc_u * acc_s / (acc_u + acc_s);
}

/// Seen-over-unseen accuracy; +inf when the unseen accuracy is 0.
inline double bias_ratio(double acc_u, double acc_s) {
  if (acc_u == 0) return std::numeric_limits<double>::infinity();
  return acc_s / acc_u;
}

struct GzslReport {
  double acc_unseen = 0;  // percent
  double acc_seen = 0;    // percent
  double harmonic_mean = 0;
  double bias_ratio = 0;
  std::map<std::string, double> per_class_accuracy;  // fraction in [0, 1]
};

inline GzslReport make_report(double acc_unseen_pct, double acc_seen_pct) {
  return GzslReport{acc_unseen_pct, acc_seen_pct,
                    harmonic_mean(acc_unseen_pct, acc_seen_pct),
                    bias_ratio(acc_unseen_pct, acc_seen_pct),
                    {}};
}

namespace detail {

inline std::string fixed(double v, int decimals) {
  if (std::isinf(v)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace detail

/// "key=value" lines; percentages with one decimal.
inline std::string to_key_value(const GzslReport& r) {
  std::string out;
  out += "acc_unseen=" + detail::fixed(r.acc_unseen, 1) + "\n";
  out += "acc_seen=" + detail::fixed(r.acc_seen, 1) + "\n";
  out += "harmonic_mean=" + detail::fixed(r.harmonic_mean, 1) + "\n";
  out += "bias_ratio=" + detail::fixed(r.bias_ratio, 2) + "\n";
  return out;
}

/// One "name<TAB>value" record per metric, full precision, followed by the
/// per-class accuracies.
inline std::string to_records(const GzslReport& r) {
  std::string out;
  auto line = [&](const std::string& name, double v) {
    out += name + "\t" + (std::isinf(v) ? std::string("inf") : detail::fixed(v, 9)) + "\n";
  };
  line("acc_unseen", r.acc_unseen);
  line("acc_seen", r.acc_seen);
  line("harmonic_mean", r.harmonic_mean);
  line("bias_ratio", r.bias_ratio);
  for (const auto& [id, acc] : r.per_class_accuracy) line("class_acc." + id, acc);
  return out;
}

/// Predicts every sample against `attrs`, in parallel with index-ordered
/// output.
inline std::vector<Prediction> predict_all(const ProjectionModel& model,
                                           std::span<const LabeledSample> samples,
                                           const AttributeMatrix& attrs,
                                           std::size_t threads = 1) {
  std::vector<Prediction> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto trace = forward(samples[i].features, model, attrs);
    out[i] = {predict(trace.logits, attrs), samples[i].class_id};
  });
  return out;
}

/// Conventional ZSL: unseen-only test set, candidate classes = A^U rows.
/// Returns per-class top-1 in [0, 1].
inline double evaluate_zsl(const ProjectionModel& model,
                           std::span<const LabeledSample> test_samples,
                           const AttributeMatrix& attrs_unseen,
                           std::size_t threads = 1,
                           std::map<std::string, double>* per_class = nullptr) {
  for (const auto& s : test_samples) {
    if (!attrs_unseen.index_of(s.class_id)) {
      throw EvaluationError("ZSL test sample '" + s.sample_id + "' has class '" +
                            s.class_id + "' which is not an unseen class");
    }
  }
  const auto preds = predict_all(model, test_samples, attrs_unseen, threads);
  return per_class_top1(preds, attrs_unseen.class_ids(), per_class);
}

/// Generalized ZSL: predictions range over all of A^SU; seen and unseen
/// accuracies are per-class top-1 restricted to each partition.
inline GzslReport evaluate_gzsl(const ProjectionModel& model,
                                std::span<const LabeledSample> test_samples,
                                const AttributeMatrix& attrs_joint,
                                const SplitSpec& split, std::size_t threads = 1) {
  bool any_seen = false, any_unseen = false;
  for (const auto& s : test_samples) {
    if (!attrs_joint.index_of(s.class_id)) {
      throw EvaluationError("test sample '" + s.sample_id + "' has class '" +
                            s.class_id + "' missing from the attribute matrix");
    }
    any_seen |= split.is_seen(s.class_id);
    any_unseen |= split.is_unseen(s.class_id);
  }
  if (!any_seen || !any_unseen) {
    throw EvaluationError(
        "GZSL evaluation requires both seen and unseen test samples");
  }
  const auto preds = predict_all(model, test_samples, attrs_joint, threads);
  std::map<std::string, double> per_class;
  const double u = per_class_top1(preds, split.unseen_classes, &per_class);
  const double s = per_class_top1(preds, split.seen_classes, &per_class);
  auto report = make_report(100.0 * u, 100.0 * s);
  report.per_class_accuracy = std::move(per_class);
  return report;
}

}  // namespace selar
