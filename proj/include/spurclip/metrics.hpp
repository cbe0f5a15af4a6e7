#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "spurclip/bank.hpp"
#include "spurclip/boxes.hpp"
#include "spurclip/detection.hpp"
#include "spurclip/error.hpp"
#include "spurclip/manifest.hpp"

namespace spurclip {

// ---------------------------------------------------------------------------
// Group accuracy
// ---------------------------------------------------------------------------

struct GroupTally {
  std::size_t n = 0;
  std::size_t correct = 0;
};

struct GroupResult {
  GroupKey key;
  std::size_t n_test = 0;
  std::size_t n_correct = 0;
  double acc = 0.0;
  std::size_t n_train = 0;
};

struct GroupAccuracies {
  std::vector<GroupResult> groups;  ///< ascending by key
  double average_acc = 0.0;
  double adjusted_average_acc = 0.0;
  double worst_group_acc = 0.0;
  GroupKey worst_group_key;
};

/// Adjusted average weights each group's accuracy by its share of the
/// training set. The worst group is the first minimum in key order.
inline GroupAccuracies group_accuracies_from_tallies(const std::map<GroupKey, GroupTally>& tallies,
                                                     const GroupCounts& train_counts) {
  GroupAccuracies out;
  std::size_t n_total = 0, correct_total = 0, train_total = 0;
  for (const auto& [key, n_train] : train_counts) train_total += n_train;
  if (train_total == 0) throw Error(ErrorCode::EmptyTrainSplit, "no training examples to weight groups by");
  out.worst_group_acc = std::numeric_limits<double>::infinity();
  for (const auto& [key, n_train] : train_counts) {
    const auto it = tallies.find(key);
    if (it == tallies.end() || it->second.n == 0)
      throw Error(ErrorCode::EmptyEvalGroup, "group " + to_string(key) + " has no evaluation examples");
    const auto& t = it->second;
    GroupResult g{key, t.n, t.correct, static_cast<double>(t.correct) / static_cast<double>(t.n), n_train};
    n_total += t.n;
    correct_total += t.correct;
    out.adjusted_average_acc += static_cast<double>(n_train) / static_cast<double>(train_total) * g.acc;
    if (g.acc < out.worst_group_acc) {
      out.worst_group_acc = g.acc;
      out.worst_group_key = key;
    }
    out.groups.push_back(g);
  }
  out.average_acc = static_cast<double>(correct_total) / static_cast<double>(n_total);
  return out;
}

inline GroupAccuracies group_accuracies(const std::vector<Prediction>& preds, const DatasetManifest& m,
                                        const std::string& attribute_id) {
  const std::size_t a = m.attribute_index(attribute_id);
  std::map<GroupKey, GroupTally> tallies;
  for (const auto& p : preds) {
    const auto& e = m.examples()[p.example];
    auto& t = tallies[{e.label, static_cast<bool>(e.flags[a])}];
    ++t.n;
    t.correct += p.predicted == e.label;
  }
  return group_accuracies_from_tallies(tallies, m.group_stats().at(attribute_id));
}

// ---------------------------------------------------------------------------
// Explanation alignment
// ---------------------------------------------------------------------------

/// sum min(M, B) / sum max(M, B) over all pixels.
inline double soft_iou(std::span<const float> map, const BoxMask& box) {
  if (map.size() != box.pixels.size())
    throw Error(ErrorCode::ShapeMismatch, "map has " + std::to_string(map.size()) + " pixels, box mask has " +
                                              std::to_string(box.pixels.size()));
  double inter = 0.0, uni = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double m = map[i];
    const double b = box.pixels[i];
    any = any || b > 0.0;
    inter += std::min(m, b);
    uni += std::max(m, b);
  }
  if (!any) throw Error(ErrorCode::EmptyBox, "bounding box mask has no positive pixel");
  return inter / uni;
}

struct AiouValue {
  double value = 0.0;
  /// Both the true-class and the best competitor IoU were zero; value is 0.
  bool zero_denominator = false;
};

/// IoU of the true class normalized by itself plus the strongest competing
/// class's IoU on the same box.
inline AiouValue aiou(std::span<const std::span<const float>> maps, const BoxMask& box, std::size_t true_class) {
  if (maps.size() < 2) throw Error(ErrorCode::NeedTwoClasses, "AIoU needs maps for at least two classes");
  if (true_class >= maps.size()) throw Error(ErrorCode::ShapeMismatch, "true class has no map");
  const double own = soft_iou(maps[true_class], box);
  double rival = 0.0;
  for (std::size_t c = 0; c < maps.size(); ++c)
    if (c != true_class) rival = std::max(rival, soft_iou(maps[c], box));
  const double denom = own + rival;
  if (denom == 0.0) return {0.0, true};
  return {own / denom, false};
}

inline AiouValue aiou(const MapBank& bank, std::size_t example, const BoxMask& box, std::size_t true_class) {
  std::vector<std::span<const float>> maps;
  for (std::size_t c = 0; c < bank.n_classes; ++c) maps.push_back(bank.map(example, c));
  return aiou(maps, box, true_class);
}

struct AiouSummary {
  double average = 0.0;
  double worst_group = 0.0;
  GroupKey worst_group_key;
  std::map<GroupKey, double> per_group;
  /// AIoU of a caller-chosen group, typically the accuracy-worst group.
  std::optional<double> at_requested_group;
  std::size_t n_examples = 0;
  std::size_t zero_denominator = 0;
};

inline AiouSummary aiou_summary(const MapBank& bank, const BoxList& boxes, const DatasetManifest& m,
                                const std::string& attribute_id, Split split,
                                std::optional<GroupKey> requested = std::nullopt) {
  const std::size_t a = m.attribute_index(attribute_id);
  if (bank.n_examples != m.examples().size() || boxes.size() != m.examples().size())
    throw Error(ErrorCode::ShapeMismatch, "map bank / boxes must cover every manifest example");
  if (bank.n_classes != m.n_classes()) throw Error(ErrorCode::ShapeMismatch, "map bank class count differs from manifest");

  AiouSummary out;
  std::map<GroupKey, std::pair<double, std::size_t>> acc;
  double total = 0.0;
  for (std::size_t i = 0; i < m.examples().size(); ++i) {
    const auto& e = m.examples()[i];
    if (e.split != split) continue;
    const BoxMask mask = rasterize(boxes[i], bank.h, bank.w);
    const auto v = aiou(bank, i, mask, e.label);
    out.zero_denominator += v.zero_denominator;
    total += v.value;
    ++out.n_examples;
    auto& slot = acc[{e.label, static_cast<bool>(e.flags[a])}];
    slot.first += v.value;
    ++slot.second;
  }
  if (out.n_examples == 0) throw Error(ErrorCode::EmptyEvalGroup, "no examples in split " + to_string(split));
  out.average = total / static_cast<double>(out.n_examples);
  out.worst_group = std::numeric_limits<double>::infinity();
  for (const auto& [key, sum_n] : acc) {
    const double v = sum_n.first / static_cast<double>(sum_n.second);
    out.per_group[key] = v;
    if (v < out.worst_group) {
      out.worst_group = v;
      out.worst_group_key = key;
    }
  }
  if (requested) {
    const auto it = out.per_group.find(*requested);
    if (it == out.per_group.end())
      throw Error(ErrorCode::EmptyEvalGroup, "group " + to_string(*requested) + " has no examples");
    out.at_requested_group = it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json group_key_json(const GroupKey& k, const DatasetManifest& m) {
  return {{"label", k.label}, {"class", m.text_index.classes[k.label]}, {"attr_value", k.attr_value}};
}

inline nlohmann::json to_json(const GroupAccuracies& g, const DatasetManifest& m) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& r : g.groups) {
    auto j = group_key_json(r.key, m);
    j["n"] = r.n_test;
    j["correct"] = r.n_correct;
    j["acc"] = r.acc;
    j["n_train"] = r.n_train;
    groups.push_back(j);
  }
  return {{"average", g.average_acc},
          {"adjusted_average", g.adjusted_average_acc},
          {"worst_group", g.worst_group_acc},
          {"worst_group_key", group_key_json(g.worst_group_key, m)},
          {"groups", groups}};
}

inline nlohmann::json to_json(const AiouSummary& s, const DatasetManifest& m) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [key, v] : s.per_group) {
    auto j = group_key_json(key, m);
    j["aiou"] = v;
    groups.push_back(j);
  }
  nlohmann::json j{{"average", s.average},
                   {"worst_group", s.worst_group},
                   {"worst_group_key", group_key_json(s.worst_group_key, m)},
                   {"groups", groups},
                   {"n_examples", s.n_examples},
                   {"zero_denominator", s.zero_denominator}};
  if (s.at_requested_group) j["at_accuracy_worst_group"] = *s.at_requested_group;
  return j;
}

}  // namespace spurclip
