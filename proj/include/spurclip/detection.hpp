#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurclip/error.hpp"
#include "spurclip/manifest.hpp"
#include "spurclip/matrix.hpp"
#include "spurclip/projection.hpp"

namespace spurclip {

struct Prediction {
  std::size_t example = 0;
  std::size_t predicted = 0;
  std::vector<double> scores;  ///< cosine similarity to each class prototype
};

/// Class prototypes: normalized mean over templates of the normalized
/// projected plain-variant text rows. One row per class.
inline Matrix class_prototypes(const ProjectionParams& p, const Dataset& ds) {
  const auto& ti = ds.manifest.text_index;
  Matrix protos(ti.n_classes(), p.joint_dim());
  Matrix raw(ti.n_templates(), ds.texts.cols());
  for (std::size_t c = 0; c < ti.n_classes(); ++c) {
    for (std::size_t t = 0; t < ti.n_templates(); ++t)
      std::ranges::copy(ds.texts.row(ti.row_of(c, t, Variant::plain)), raw.row(t).begin());
    const Matrix unit = project_texts(p, raw);
    auto proto = protos.row(c);
    for (std::size_t t = 0; t < unit.rows(); ++t)
      for (std::size_t k = 0; k < proto.size(); ++k) proto[k] += unit(t, k);
    normalize_in_place(proto);
  }
  return protos;
}

inline std::size_t argmax_lowest(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c)
    if (scores[c] > scores[best]) best = c;
  return best;
}

/// Nearest-prototype classification of a set of unit image embeddings.
inline std::vector<Prediction> classify_embeddings(const Matrix& image_embs, const Matrix& prototypes,
                                                   std::span<const std::size_t> example_ids) {
  std::vector<Prediction> out;
  out.reserve(image_embs.rows());
  for (std::size_t i = 0; i < image_embs.rows(); ++i) {
    Prediction pr{example_ids[i], 0, std::vector<double>(prototypes.rows())};
    for (std::size_t c = 0; c < prototypes.rows(); ++c) pr.scores[c] = dot(image_embs.row(i), prototypes.row(c));
    pr.predicted = argmax_lowest(pr.scores);
    out.push_back(std::move(pr));
  }
  return out;
}

inline std::vector<Prediction> classify(const ProjectionParams& p, const Dataset& ds, Split split) {
  const auto ids = split_indices(ds.manifest, split);
  const Matrix protos = class_prototypes(p, ds);
  Matrix raw(ids.size(), ds.images.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::ranges::copy(ds.images.row(ds.manifest.examples()[ids[i]].image_row), raw.row(i).begin());
  return classify_embeddings(project_images(p, raw), protos, ids);
}

inline bool is_correct(const Prediction& p, const DatasetManifest& m) {
  return p.predicted == m.examples()[p.example].label;
}

struct DiscrepancyScore {
  std::string attribute;
  std::optional<std::size_t> cls;
  double acc_present = 0.0;
  double acc_absent = 0.0;
  double delta = 0.0;
  std::size_t n_present = 0;
  std::size_t n_absent = 0;
  /// Most confident errors on the attribute-absent slice, for manual review.
  std::vector<std::size_t> exemplars;
};

inline constexpr std::size_t kNumExemplars = 5;

/// delta = acc(attribute present) - acc(attribute absent), optionally within
/// one class. Throws EmptySlice when either side has fewer than
/// max(1, min_slice) examples.
inline DiscrepancyScore accuracy_discrepancy(const std::vector<Prediction>& preds, const DatasetManifest& m,
                                             const std::string& attribute_id,
                                             std::optional<std::size_t> class_filter = std::nullopt,
                                             std::size_t min_slice = 1) {
  const std::size_t a = m.attribute_index(attribute_id);
  std::size_t correct_present = 0, correct_absent = 0;
  DiscrepancyScore s;
  s.attribute = attribute_id;
  s.cls = class_filter;
  struct Miss {
    double margin;
    std::size_t example;
  };
  std::vector<Miss> misses;
  for (const auto& p : preds) {
    const auto& e = m.examples()[p.example];
    if (class_filter && e.label != *class_filter) continue;
    const bool ok = p.predicted == e.label;
    if (e.flags[a]) {
      ++s.n_present;
      correct_present += ok;
    } else {
      ++s.n_absent;
      correct_absent += ok;
      if (!ok) misses.push_back({p.scores[p.predicted] - p.scores[e.label], p.example});
    }
  }
  const std::size_t need = std::max<std::size_t>(1, min_slice);
  if (s.n_present < need || s.n_absent < need)
    throw Error(ErrorCode::EmptySlice, "attribute '" + attribute_id + "' has " + std::to_string(s.n_present) +
                                           " present / " + std::to_string(s.n_absent) + " absent examples");
  s.acc_present = static_cast<double>(correct_present) / static_cast<double>(s.n_present);
  s.acc_absent = static_cast<double>(correct_absent) / static_cast<double>(s.n_absent);
  s.delta = s.acc_present - s.acc_absent;
  std::sort(misses.begin(), misses.end(), [](const Miss& x, const Miss& y) {
    return x.margin != y.margin ? x.margin > y.margin : x.example < y.example;
  });
  for (std::size_t i = 0; i < misses.size() && i < kNumExemplars; ++i) s.exemplars.push_back(misses[i].example);
  return s;
}

struct RankOptions {
  bool per_class = false;
  std::size_t top_k = 10;
  std::size_t min_slice = 5;
};

/// Larger delta first, then larger absent slice, then attribute id, then class.
inline bool ranks_before(const DiscrepancyScore& x, const DiscrepancyScore& y) {
  if (x.delta != y.delta) return x.delta > y.delta;
  if (x.n_absent != y.n_absent) return x.n_absent > y.n_absent;
  if (x.attribute != y.attribute) return x.attribute < y.attribute;
  return x.cls < y.cls;
}

/// Ranked spurious-attribute candidates. In per-class mode each class keeps
/// its top_k and the survivors are merged into one ranking.
inline std::vector<DiscrepancyScore> rank_attributes(const std::vector<Prediction>& preds, const DatasetManifest& m,
                                                     const RankOptions& opt) {
  std::vector<DiscrepancyScore> ranked;
  auto collect = [&](std::optional<std::size_t> cls) {
    std::vector<DiscrepancyScore> scores;
    for (const auto& attr : m.attributes) {
      try {
        scores.push_back(accuracy_discrepancy(preds, m, attr.id, cls, opt.min_slice));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptySlice) throw;
      }
    }
    std::sort(scores.begin(), scores.end(), ranks_before);
    if (scores.size() > opt.top_k) scores.resize(opt.top_k);
    ranked.insert(ranked.end(), scores.begin(), scores.end());
  };
  if (opt.per_class) {
    for (std::size_t c = 0; c < m.n_classes(); ++c) collect(c);
    std::sort(ranked.begin(), ranked.end(), ranks_before);
  } else {
    collect(std::nullopt);
  }
  if (ranked.empty()) throw Error(ErrorCode::NoComputableScores, "no attribute has large enough slices on both sides");
  return ranked;
}

inline nlohmann::json report_to_json(const std::vector<DiscrepancyScore>& ranked, const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : ranked)
    entries.push_back({{"attribute", s.attribute},
                       {"class", s.cls ? nlohmann::json(m.text_index.classes[*s.cls]) : nlohmann::json(nullptr)},
                       {"delta", s.delta},
                       {"acc_present", s.acc_present},
                       {"acc_absent", s.acc_absent},
                       {"n_present", s.n_present},
                       {"n_absent", s.n_absent},
                       {"exemplars", s.exemplars}});
  return entries;
}

inline void print_report_table(std::ostream& os, const std::vector<DiscrepancyScore>& ranked, const DatasetManifest& m) {
  std::size_t attr_w = 9, cls_w = 5;
  for (const auto& s : ranked) {
    attr_w = std::max(attr_w, s.attribute.size());
    if (s.cls) cls_w = std::max(cls_w, m.text_index.classes[*s.cls].size());
  }
  os << std::left << std::setw(5) << "rank" << std::setw(static_cast<int>(attr_w) + 2) << "attribute"
     << std::setw(static_cast<int>(cls_w) + 2) << "class" << std::right << std::setw(9) << "delta" << std::setw(10)
     << "acc(s=1)" << std::setw(10) << "acc(s=0)" << std::setw(8) << "n(s=1)" << std::setw(8) << "n(s=0)" << '\n';
  std::size_t rank = 1;
  for (const auto& s : ranked) {
    os << std::left << std::setw(5) << rank++ << std::setw(static_cast<int>(attr_w) + 2) << s.attribute
       << std::setw(static_cast<int>(cls_w) + 2) << (s.cls ? m.text_index.classes[*s.cls] : std::string("*"))
       << std::right << std::fixed << std::setprecision(4) << std::setw(9) << s.delta << std::setw(10)
       << s.acc_present << std::setw(10) << s.acc_absent << std::setw(8) << s.n_present << std::setw(8) << s.n_absent
       << '\n';
  }
  os.unsetf(std::ios::fixed);
}

}  // namespace spurclip
