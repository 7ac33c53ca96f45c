#pragma once

#include <string>
#include <unordered_set>
#include <vector>

#include "selar/error.hpp"
#include "selar/tensor.hpp"

namespace selar {

/// One precomputed feature map and its class label.
struct LabeledSample {
  std::string sample_id;
  Tensor features;  // [H, W, D]
  std::string class_id;
};

/// Disjoint partition of the class set into seen (training) and unseen
/// classes. Use `make_split` to build a validated instance.
struct SplitSpec {
  std::vector<std::string> seen_classes;
  std::vector<std::string> unseen_classes;

  bool is_seen(const std::string& id) const {
    for (const auto& c : seen_classes) if (c == id) return true;
    return false;
  }
  bool is_unseen(const std::string& id) const {
    for (const auto& c : unseen_classes) if (c == id) return true;
    return false;
  }
};

inline SplitSpec make_split(std::vector<std::string> seen,
                            std::vector<std::string> unseen) {
  if (seen.empty()) throw ValidationError("split has no seen classes");
  if (unseen.empty()) throw ValidationError("split has no unseen classes");
  std::unordered_set<std::string> ids;
  for (const auto& c : seen) {
    if (!ids.insert(c).second) {
      throw ValidationError("class '" + c + "' listed twice in seen classes");
    }
  }
  for (const auto& c : unseen) {
    if (ids.count(c)) {
      throw ValidationError("class '" + c +
                            "' is both seen and unseen; splits must be disjoint");
    }
    ids.insert(c);
  }
  return SplitSpec{std::move(seen), std::move(unseen)};
}

}  // namespace selar
