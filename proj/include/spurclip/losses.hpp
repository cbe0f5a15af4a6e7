#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "spurclip/error.hpp"
#include "spurclip/matrix.hpp"

namespace spurclip {

// ---------------------------------------------------------------------------
// Loss term selection
// ---------------------------------------------------------------------------

enum class LossTerm : std::size_t { clip = 0, vc = 1, lc = 2, vs = 3, ls = 4 };
inline constexpr std::size_t kNumTerms = 5;
inline constexpr std::array<LossTerm, kNumTerms> kAllTerms{LossTerm::clip, LossTerm::vc, LossTerm::lc, LossTerm::vs,
                                                           LossTerm::ls};

inline std::string_view term_name(LossTerm t) {
  constexpr std::array<std::string_view, kNumTerms> names{"clip", "vc", "lc", "vs", "ls"};
  return names[static_cast<std::size_t>(t)];
}

inline std::optional<LossTerm> term_from_name(std::string_view name) {
  for (auto t : kAllTerms)
    if (term_name(t) == name) return t;
  return std::nullopt;
}

/// Which terms are active and their weights.
struct LossSpec {
  std::array<bool, kNumTerms> active{};
  std::array<double, kNumTerms> weights{1.0, 1.0, 1.0, 1.0, 1.0};

  bool has(LossTerm t) const { return active[static_cast<std::size_t>(t)]; }
  double weight(LossTerm t) const { return weights[static_cast<std::size_t>(t)]; }

  LossSpec& add(LossTerm t, double w = 1.0) {
    active[static_cast<std::size_t>(t)] = true;
    weights[static_cast<std::size_t>(t)] = w;
    return *this;
  }

  bool uses_images() const { return has(LossTerm::clip) || has(LossTerm::vc) || has(LossTerm::vs); }
  bool uses_texts() const { return has(LossTerm::clip) || has(LossTerm::lc) || has(LossTerm::ls); }
  bool needs_attribute() const { return has(LossTerm::vs) || has(LossTerm::ls); }

  void validate() const {
    if (std::none_of(active.begin(), active.end(), [](bool b) { return b; }))
      throw Error(ErrorCode::InvalidLossSpec, "loss spec has no active terms");
    for (auto t : kAllTerms)
      if (has(t) && !(std::isfinite(weight(t)) && weight(t) >= 0.0))
        throw Error(ErrorCode::InvalidLossSpec, "weight of " + std::string(term_name(t)) + " must be finite and >= 0");
  }

  /// Comma-separated term list, each optionally "name=weight", e.g. "clip,vc,lc=0.5".
  static LossSpec parse(std::string_view text) {
    LossSpec spec;
    std::stringstream ss{std::string(text)};
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      double w = 1.0;
      std::string name = item;
      if (auto eq = item.find('='); eq != std::string::npos) {
        name = item.substr(0, eq);
        try {
          std::size_t used = 0;
          w = std::stod(item.substr(eq + 1), &used);
          if (used != item.size() - eq - 1) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          throw Error(ErrorCode::InvalidLossSpec, "bad weight in '" + item + "'");
        }
      }
      const auto t = term_from_name(name);
      if (!t) throw Error(ErrorCode::InvalidLossSpec, "unknown loss term '" + name + "'");
      spec.add(*t, w);
    }
    spec.validate();
    return spec;
  }

  /// Ablation rows: the CLIP loss plus
  ///   row1 lc+vc+vs+ls, row2 lc+vc+vs, row3 lc+vc+ls, row4 lc+vs, row5 lc+ls, row6 vc+vs.
  static LossSpec preset(std::string_view name) {
    static constexpr std::array<std::pair<std::string_view, std::string_view>, 6> rows{{
        {"row1", "clip,lc,vc,vs,ls"},
        {"row2", "clip,lc,vc,vs"},
        {"row3", "clip,lc,vc,ls"},
        {"row4", "clip,lc,vs"},
        {"row5", "clip,lc,ls"},
        {"row6", "clip,vc,vs"},
    }};
    for (const auto& [row, terms] : rows)
      if (row == name) return parse(terms);
    throw Error(ErrorCode::InvalidLossSpec, "unknown preset '" + std::string(name) + "'");
  }

  static std::vector<std::string> preset_names() { return {"row1", "row2", "row3", "row4", "row5", "row6"}; }

  std::string to_string() const {
    std::string out;
    for (auto t : kAllTerms) {
      if (!has(t)) continue;
      if (!out.empty()) out += ',';
      out += term_name(t);
      if (weight(t) != 1.0) {
        std::ostringstream w;
        w.precision(17);
        w << weight(t);
        out += "=" + w.str();
      }
    }
    return out;
  }

  friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

// ---------------------------------------------------------------------------
// Minibatch
// ---------------------------------------------------------------------------

struct Anchor {
  std::size_t example = 0;  ///< index into the manifest's example list
  std::size_t image_row = 0;
  std::size_t label = 0;
  bool attr_value = false;
  std::size_t template_id = 0;
};

/// Projected, unit-norm embeddings for one batch. Row i of every matrix
/// belongs to anchors[i]. `variant_text_embs` holds the attribute-variant
/// text matching each anchor's attribute value and may be empty when no
/// spurious language term is evaluated.
struct Minibatch {
  std::vector<Anchor> anchors;
  Matrix image_embs;
  Matrix text_embs;
  Matrix variant_text_embs;

  std::size_t size() const { return anchors.size(); }
};

/// Permutation that lists anchors by (example, template, label, attribute).
/// All reductions run in this order, so reordering a batch does not change
/// any value.
inline std::vector<std::size_t> canonical_order(std::span<const Anchor> anchors) {
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = anchors[a];
    const auto& y = anchors[b];
    return std::tie(x.example, x.template_id, x.label, x.attr_value) <
           std::tie(y.example, y.template_id, y.label, y.attr_value);
  });
  return order;
}

/// Gradients of a loss w.r.t. the unit embeddings of a batch and the logit
/// scale 1/tau. Matrices are zero-initialized to the batch's shapes.
struct EmbeddingGrads {
  Matrix image;
  Matrix text;
  Matrix variant;
  double logit_scale = 0.0;

  static EmbeddingGrads zeros_like(const Minibatch& mb) {
    return {Matrix(mb.image_embs.rows(), mb.image_embs.cols()), Matrix(mb.text_embs.rows(), mb.text_embs.cols()),
            Matrix(mb.variant_text_embs.rows(), mb.variant_text_embs.cols()), 0.0};
  }
};

namespace detail {

struct KernelGrad {
  std::span<double> d_anchor;
  Matrix* d_bank = nullptr;  ///< rows addressed by the same indices as pos/neg
  double* d_scale = nullptr;
  double upstream = 1.0;
};

/// Cross-group similarity of one anchor against positives and negatives that
/// are rows of `bank`:
///   loss = logsumexp(l) - mean_p l_p,   l_k = scale * <a, b_k>, k in P u Q.
/// This equals -(1/P) sum_p log softmax_p(l).
inline double cross_group_kernel(std::span<const double> anchor, const Matrix& bank,
                                 std::span<const std::size_t> pos, std::span<const std::size_t> neg, double scale,
                                 KernelGrad* grad) {
  const std::size_t np = pos.size();
  const std::size_t n = np + neg.size();
  std::vector<double> sims(n);
  std::vector<double> logits(n);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t row = k < np ? pos[k] : neg[k - np];
    sims[k] = dot(anchor, bank.row(row));
    logits[k] = scale * sims[k];
    max_logit = std::max(max_logit, logits[k]);
  }
  double sum_exp = 0.0;
  for (double l : logits) sum_exp += std::exp(l - max_logit);
  const double lse = max_logit + std::log(sum_exp);
  double pos_mean = 0.0;
  for (std::size_t k = 0; k < np; ++k) pos_mean += logits[k];
  pos_mean /= static_cast<double>(np);
  const double loss = lse - pos_mean;

  if (grad != nullptr) {
    const double inv_np = 1.0 / static_cast<double>(np);
    double d_scale = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t row = k < np ? pos[k] : neg[k - np];
      double d_logit = std::exp(logits[k] - lse);
      if (k < np) d_logit -= inv_np;
      d_logit *= grad->upstream;
      d_scale += d_logit * sims[k];
      const double c = d_logit * scale;
      const auto b = bank.row(row);
      auto db = grad->d_bank->row(row);
      for (std::size_t d = 0; d < anchor.size(); ++d) {
        grad->d_anchor[d] += c * b[d];
        db[d] += c * anchor[d];
      }
    }
    *grad->d_scale += d_scale;
  }
  return loss;
}

/// Mean of the kernel over anchors with at least one positive and one
/// negative. `relation(i, j)` returns +1 for positive, -1 for negative and 0
/// for neither. Throws DegenerateBatch when every anchor is skipped.
template <typename Relation>
double grouped_term(const Matrix& embs, std::span<const Anchor> anchors, double scale, Relation relation,
                    Matrix* d_embs, double* d_scale, double upstream, std::string_view name) {
  const auto order = canonical_order(anchors);
  struct Item {
    std::size_t anchor;
    std::vector<std::size_t> pos, neg;
  };
  std::vector<Item> items;
  for (std::size_t i : order) {
    Item it{i, {}, {}};
    for (std::size_t j : order) {
      if (j == i) continue;
      const int r = relation(anchors[i], anchors[j]);
      if (r > 0) it.pos.push_back(j);
      else if (r < 0) it.neg.push_back(j);
    }
    if (!it.pos.empty() && !it.neg.empty()) items.push_back(std::move(it));
  }
  if (items.empty())
    throw Error(ErrorCode::DegenerateBatch, std::string(name) + ": no anchor has both positives and negatives");

  const double inv_m = 1.0 / static_cast<double>(items.size());
  double total = 0.0;
  for (const auto& it : items) {
    if (d_embs != nullptr) {
      KernelGrad g{d_embs->row(it.anchor), d_embs, d_scale, upstream * inv_m};
      total += cross_group_kernel(embs.row(it.anchor), embs, it.pos, it.neg, scale, &g);
    } else {
      total += cross_group_kernel(embs.row(it.anchor), embs, it.pos, it.neg, scale, nullptr);
    }
  }
  return total * inv_m;
}

inline void check_batch(const Minibatch& mb, const Matrix& embs, const char* what) {
  if (mb.size() < 1) throw Error(ErrorCode::DegenerateBatch, "empty minibatch");
  if (embs.rows() != mb.size())
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + " rows do not match the anchor count");
}

inline int by_label(const Anchor& a, const Anchor& b) { return a.label == b.label ? 1 : -1; }

inline int by_label_other_template(const Anchor& a, const Anchor& b) {
  if (a.label != b.label) return -1;
  return a.template_id != b.template_id ? 1 : 0;
}

inline int by_group(const Anchor& a, const Anchor& b) {
  return (a.label == b.label && a.attr_value == b.attr_value) ? 1 : -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Loss terms. Public entry points take tau; internal ones take scale = 1/tau.
// ---------------------------------------------------------------------------

/// Cross-group similarity for a single anchor; positives and negatives are
/// matrix rows.
inline double cross_group_similarity(std::span<const double> anchor, const Matrix& positives, const Matrix& negatives,
                                     double tau) {
  if (positives.rows() < 1) throw Error(ErrorCode::EmptyPositives, "cross-group similarity needs a positive");
  if (negatives.rows() < 1) throw Error(ErrorCode::EmptyNegatives, "cross-group similarity needs a negative");
  Matrix bank(positives.rows() + negatives.rows(), anchor.size());
  for (std::size_t r = 0; r < positives.rows(); ++r) std::ranges::copy(positives.row(r), bank.row(r).begin());
  for (std::size_t r = 0; r < negatives.rows(); ++r)
    std::ranges::copy(negatives.row(r), bank.row(positives.rows() + r).begin());
  std::vector<std::size_t> pos(positives.rows()), neg(negatives.rows());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  std::iota(neg.begin(), neg.end(), positives.rows());
  return detail::cross_group_kernel(anchor, bank, pos, neg, 1.0 / tau, nullptr);
}

/// Symmetric InfoNCE between images and their plain-variant texts.
inline double clip_loss_scaled(const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                               double upstream = 1.0) {
  detail::check_batch(mb, mb.image_embs, "image");
  detail::check_batch(mb, mb.text_embs, "text");
  const std::size_t n = mb.size();
  const auto order = canonical_order(mb.anchors);

  // sims(a, b) = <I_order[a], T_order[b]>
  Matrix sims(n, n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) sims(a, b) = dot(mb.image_embs.row(order[a]), mb.text_embs.row(order[b]));

  auto lse = [&](auto&& logit_at) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) m = std::max(m, logit_at(k));
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += std::exp(logit_at(k) - m);
    return m + std::log(s);
  };

  std::vector<double> row_lse(n), col_lse(n);
  double img_to_txt = 0.0, txt_to_img = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    row_lse[a] = lse([&](std::size_t k) { return scale * sims(a, k); });
    img_to_txt += row_lse[a] - scale * sims(a, a);
  }
  for (std::size_t b = 0; b < n; ++b) {
    col_lse[b] = lse([&](std::size_t k) { return scale * sims(k, b); });
    txt_to_img += col_lse[b] - scale * sims(b, b);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double loss = 0.5 * (img_to_txt + txt_to_img) * inv_n;

  if (grads != nullptr) {
    const double w = 0.5 * inv_n * upstream;
    for (std::size_t a = 0; a < n; ++a) {
      const std::size_t ia = order[a];
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t ib = order[b];
        const double l = scale * sims(a, b);
        double d = std::exp(l - row_lse[a]) + std::exp(l - col_lse[b]);
        if (a == b) d -= 2.0;
        d *= w;
        grads->logit_scale += d * sims(a, b);
        const double c = d * scale;
        const auto img = mb.image_embs.row(ia);
        const auto txt = mb.text_embs.row(ib);
        auto d_img = grads->image.row(ia);
        auto d_txt = grads->text.row(ib);
        for (std::size_t k = 0; k < img.size(); ++k) {
          d_img[k] += c * txt[k];
          d_txt[k] += c * img[k];
        }
      }
    }
  }
  return loss;
}

inline double contrastive_image_loss_scaled(const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                                            double upstream = 1.0) {
  detail::check_batch(mb, mb.image_embs, "image");
  return detail::grouped_term(mb.image_embs, mb.anchors, scale, detail::by_label, grads ? &grads->image : nullptr,
                              grads ? &grads->logit_scale : nullptr, upstream, "vc");
}

inline double contrastive_language_loss_scaled(const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                                               double upstream = 1.0) {
  detail::check_batch(mb, mb.text_embs, "text");
  return detail::grouped_term(mb.text_embs, mb.anchors, scale, detail::by_label_other_template,
                              grads ? &grads->text : nullptr, grads ? &grads->logit_scale : nullptr, upstream, "lc");
}

inline double spurious_image_loss_scaled(const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                                         double upstream = 1.0) {
  detail::check_batch(mb, mb.image_embs, "image");
  return detail::grouped_term(mb.image_embs, mb.anchors, scale, detail::by_group, grads ? &grads->image : nullptr,
                              grads ? &grads->logit_scale : nullptr, upstream, "vs");
}

inline double spurious_language_loss_scaled(const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                                            double upstream = 1.0) {
  if (mb.variant_text_embs.empty())
    throw Error(ErrorCode::MissingVariant, "spurious language loss needs attribute-variant text embeddings");
  detail::check_batch(mb, mb.variant_text_embs, "variant text");
  return detail::grouped_term(mb.variant_text_embs, mb.anchors, scale, detail::by_group,
                              grads ? &grads->variant : nullptr, grads ? &grads->logit_scale : nullptr, upstream, "ls");
}

inline double clip_loss(const Minibatch& mb, double tau) { return clip_loss_scaled(mb, 1.0 / tau); }
inline double contrastive_image_loss(const Minibatch& mb, double tau) {
  return contrastive_image_loss_scaled(mb, 1.0 / tau);
}
inline double contrastive_language_loss(const Minibatch& mb, double tau) {
  return contrastive_language_loss_scaled(mb, 1.0 / tau);
}
/// Groups are (label, attribute value); the attribute is the one the batch's
/// anchors were built for.
inline double spurious_image_loss(const Minibatch& mb, double tau) { return spurious_image_loss_scaled(mb, 1.0 / tau); }
inline double spurious_language_loss(const Minibatch& mb, double tau) {
  return spurious_language_loss_scaled(mb, 1.0 / tau);
}

inline double term_loss_scaled(LossTerm t, const Minibatch& mb, double scale, EmbeddingGrads* grads = nullptr,
                               double upstream = 1.0) {
  switch (t) {
    case LossTerm::clip: return clip_loss_scaled(mb, scale, grads, upstream);
    case LossTerm::vc: return contrastive_image_loss_scaled(mb, scale, grads, upstream);
    case LossTerm::lc: return contrastive_language_loss_scaled(mb, scale, grads, upstream);
    case LossTerm::vs: return spurious_image_loss_scaled(mb, scale, grads, upstream);
    case LossTerm::ls: return spurious_language_loss_scaled(mb, scale, grads, upstream);
  }
  return 0.0;
}

struct LossBreakdown {
  double total = 0.0;
  /// Unweighted value per term; nullopt for inactive or degenerate terms.
  std::array<std::optional<double>, kNumTerms> terms{};
  std::vector<LossTerm> degenerate;
};

/// Weighted sum of the active terms. A term whose batch is degenerate adds 0
/// and is listed in `degenerate`. With `grads`, accumulates gradients of the
/// total.
inline LossBreakdown combined_loss_scaled(const Minibatch& mb, double scale, const LossSpec& spec,
                                          EmbeddingGrads* grads = nullptr) {
  spec.validate();
  LossBreakdown out;
  for (auto t : kAllTerms) {
    if (!spec.has(t)) continue;
    const double w = spec.weight(t);
    // A degenerate term throws before touching the gradient buffers.
    try {
      const double v = term_loss_scaled(t, mb, scale, grads, w);
      out.terms[static_cast<std::size_t>(t)] = v;
      out.total += w * v;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateBatch) throw;
      out.degenerate.push_back(t);
    }
  }
  return out;
}

inline LossBreakdown combined_loss(const Minibatch& mb, double tau, const LossSpec& spec) {
  return combined_loss_scaled(mb, 1.0 / tau, spec);
}

}  // namespace spurclip
