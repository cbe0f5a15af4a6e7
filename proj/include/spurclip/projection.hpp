#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spurclip/binary_io.hpp"
#include "spurclip/error.hpp"
#include "spurclip/losses.hpp"
#include "spurclip/manifest.hpp"
#include "spurclip/matrix.hpp"
#include "spurclip/rng.hpp"

namespace spurclip {

inline constexpr double kMaxLogitScale = 100.0;
/// log(1 / 0.07)
inline const double kDefaultLogInvTau = std::log(1.0 / 0.07);

/// Trainable state: two bias-free linear projections into the joint space
/// and the log of the logit scale 1/tau shared by every loss term.
struct ProjectionParams {
  Matrix w_img;  ///< d_joint x d_img
  Matrix w_txt;  ///< d_joint x d_txt
  double log_inv_tau = kDefaultLogInvTau;

  std::size_t joint_dim() const { return w_img.rows(); }
  double logit_scale() const { return std::exp(log_inv_tau); }
  double tau() const { return 1.0 / logit_scale(); }

  void clamp_temperature() { log_inv_tau = std::min(log_inv_tau, std::log(kMaxLogitScale)); }

  bool all_finite() const {
    return spurclip::all_finite(w_img.data()) && spurclip::all_finite(w_txt.data()) && std::isfinite(log_inv_tau);
  }

  /// Gaussian entries with standard deviation 1/sqrt(d_in).
  static ProjectionParams random(std::size_t d_joint, std::size_t d_img, std::size_t d_txt, std::uint64_t seed) {
    SplitMix64 rng(seed);
    ProjectionParams p{Matrix(d_joint, d_img), Matrix(d_joint, d_txt), kDefaultLogInvTau};
    const double si = 1.0 / std::sqrt(static_cast<double>(d_img));
    const double st = 1.0 / std::sqrt(static_cast<double>(d_txt));
    for (double& v : p.w_img.data()) v = si * rng.normal();
    for (double& v : p.w_txt.data()) v = st * rng.normal();
    return p;
  }

  /// Pretrained projections from the dataset when it carries them, otherwise
  /// random ones of the requested joint width.
  static ProjectionParams initial(const Dataset& ds, std::size_t d_joint, std::uint64_t seed) {
    if (ds.init_image_projection)
      return {*ds.init_image_projection, *ds.init_text_projection, kDefaultLogInvTau};
    return random(d_joint, ds.images.cols(), ds.texts.cols(), seed);
  }

  friend bool operator==(const ProjectionParams&, const ProjectionParams&) = default;
};

/// Same shapes as ProjectionParams.
struct Gradients {
  Matrix w_img;
  Matrix w_txt;
  double log_inv_tau = 0.0;

  static Gradients zeros_like(const ProjectionParams& p) {
    return {Matrix(p.w_img.rows(), p.w_img.cols()), Matrix(p.w_txt.rows(), p.w_txt.cols()), 0.0};
  }
  bool all_finite() const {
    return spurclip::all_finite(w_img.data()) && spurclip::all_finite(w_txt.data()) && std::isfinite(log_inv_tau);
  }
};

namespace detail {

struct Projected {
  Matrix unit;                ///< normalize(W x) per row
  std::vector<double> norms;  ///< ||W x|| per row
};

inline Projected project_rows(const Matrix& w, const Matrix& raw) {
  if (raw.cols() != w.cols())
    throw Error(ErrorCode::DimensionMismatch, "raw rows have dim " + std::to_string(raw.cols()) +
                                                  ", projection expects " + std::to_string(w.cols()));
  Projected out{Matrix(raw.rows(), w.rows()), std::vector<double>(raw.rows())};
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    auto z = out.unit.row(r);
    matvec(w, raw.row(r), z);
    try {
      out.norms[r] = normalize_in_place(z);
    } catch (const Error&) {
      throw Error(ErrorCode::ZeroVector, "projected row " + std::to_string(r) + " has zero norm", r);
    }
  }
  return out;
}

/// Pulls gradients w.r.t. unit embeddings back through normalization into dW.
inline void backprop_rows(const Projected& proj, const Matrix& raw, const Matrix& d_unit, Matrix& d_w) {
  std::vector<double> dz(proj.unit.cols());
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const auto e = proj.unit.row(r);
    const auto g = d_unit.row(r);
    const double eg = dot(e, g);
    bool any = false;
    for (std::size_t k = 0; k < dz.size(); ++k) {
      dz[k] = (g[k] - e[k] * eg) / proj.norms[r];
      any = any || dz[k] != 0.0;
    }
    if (any) add_outer(d_w, 1.0, dz, raw.row(r));
  }
}

}  // namespace detail

inline Matrix project_images(const ProjectionParams& p, const Matrix& raw) {
  return detail::project_rows(p.w_img, raw).unit;
}

inline Matrix project_texts(const ProjectionParams& p, const Matrix& raw) {
  return detail::project_rows(p.w_txt, raw).unit;
}

/// Raw (pre-projection) rows for one minibatch.
struct RawBatch {
  std::vector<Anchor> anchors;
  Matrix images;         ///< N x d_img
  Matrix texts;          ///< N x d_txt, plain variant
  Matrix variant_texts;  ///< N x d_txt, attribute variant; empty when not needed
};

/// Gathers the rows for `anchors`. Variant rows are resolved when the text
/// bank carries them.
inline RawBatch make_raw_batch(const Dataset& ds, std::vector<Anchor> anchors) {
  const auto& ti = ds.manifest.text_index;
  const std::size_t n = anchors.size();
  RawBatch b{std::move(anchors), Matrix(n, ds.images.cols()), Matrix(n, ds.texts.cols()), Matrix()};
  if (ti.has_variants()) b.variant_texts = Matrix(n, ds.texts.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = b.anchors[i];
    std::ranges::copy(ds.images.row(a.image_row), b.images.row(i).begin());
    std::ranges::copy(ds.texts.row(ti.row_of(a.label, a.template_id, Variant::plain)), b.texts.row(i).begin());
    if (ti.has_variants())
      std::ranges::copy(ds.texts.row(ti.row_of(a.label, a.template_id, variant_for(a.attr_value))),
                        b.variant_texts.row(i).begin());
  }
  return b;
}

/// Projects only the blocks the active loss terms need.
inline Minibatch project_batch(const ProjectionParams& p, const RawBatch& raw, const LossSpec& spec) {
  Minibatch mb{raw.anchors, {}, {}, {}};
  if (spec.uses_images()) mb.image_embs = project_images(p, raw.images);
  if (spec.has(LossTerm::clip) || spec.has(LossTerm::lc)) mb.text_embs = project_texts(p, raw.texts);
  if (spec.has(LossTerm::ls)) {
    if (raw.variant_texts.empty()) throw Error(ErrorCode::MissingVariant, "batch has no attribute-variant text rows");
    mb.variant_text_embs = project_texts(p, raw.variant_texts);
  }
  return mb;
}

inline LossBreakdown combined_loss(const Minibatch& mb, const ProjectionParams& p, const LossSpec& spec) {
  return combined_loss_scaled(mb, p.logit_scale(), spec);
}

struct GradientResult {
  double loss = 0.0;
  LossBreakdown breakdown;
  Gradients grads;
};

/// Loss and exact gradients through projection, normalization and the
/// temperature. Throws DegenerateBatch when every active term is degenerate.
inline GradientResult compute_gradients(const ProjectionParams& p, const RawBatch& raw, const LossSpec& spec) {
  spec.validate();
  if (raw.anchors.empty()) throw Error(ErrorCode::DegenerateBatch, "empty minibatch");

  const bool img = spec.uses_images();
  const bool txt = spec.has(LossTerm::clip) || spec.has(LossTerm::lc);
  const bool var = spec.has(LossTerm::ls);
  if (var && raw.variant_texts.empty())
    throw Error(ErrorCode::MissingVariant, "batch has no attribute-variant text rows");

  detail::Projected pi, pt, pv;
  Minibatch mb{raw.anchors, {}, {}, {}};
  if (img) {
    pi = detail::project_rows(p.w_img, raw.images);
    mb.image_embs = pi.unit;
  }
  if (txt) {
    pt = detail::project_rows(p.w_txt, raw.texts);
    mb.text_embs = pt.unit;
  }
  if (var) {
    pv = detail::project_rows(p.w_txt, raw.variant_texts);
    mb.variant_text_embs = pv.unit;
  }

  const double scale = p.logit_scale();
  auto eg = EmbeddingGrads::zeros_like(mb);
  GradientResult out;
  out.breakdown = combined_loss_scaled(mb, scale, spec, &eg);
  std::size_t active = 0;
  for (auto t : kAllTerms) active += spec.has(t);
  if (out.breakdown.degenerate.size() == active)
    throw Error(ErrorCode::DegenerateBatch, "every active loss term is degenerate on this batch");
  out.loss = out.breakdown.total;

  out.grads = Gradients::zeros_like(p);
  if (img) detail::backprop_rows(pi, raw.images, eg.image, out.grads.w_img);
  if (txt) detail::backprop_rows(pt, raw.texts, eg.text, out.grads.w_txt);
  if (var) detail::backprop_rows(pv, raw.variant_texts, eg.variant, out.grads.w_txt);
  out.grads.log_inv_tau = eg.logit_scale * scale;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SPCK", u32 version, u64 d_joint, u64 d_img, u64 d_txt,
// f64 W_img (row-major), f64 W_txt, f64 log_inv_tau, u64 epoch,
// u64 rng_state. Little-endian.
// ---------------------------------------------------------------------------

struct Checkpoint {
  ProjectionParams params;
  std::uint64_t epoch = 0;
  std::uint64_t rng_state = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  if (p.w_img.rows() != p.w_txt.rows()) throw Error(ErrorCode::DimensionMismatch, "projection widths differ");
  io::Writer w;
  w.magic("SPCK");
  w.u32(1);
  w.u64(p.w_img.rows());
  w.u64(p.w_img.cols());
  w.u64(p.w_txt.cols());
  for (double v : p.w_img.data()) w.f64(v);
  for (double v : p.w_txt.data()) w.f64(v);
  w.f64(p.log_inv_tau);
  w.u64(ck.epoch);
  w.u64(ck.rng_state);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  if (!r.magic("SPCK")) throw Error(ErrorCode::BadMagic, "expected SPCK header");
  if (r.u32() != 1) throw Error(ErrorCode::BadMagic, "unsupported checkpoint version");
  const auto dj = r.u64(), di = r.u64(), dt = r.u64();
  if (r.remaining() != 8 * (dj * di + dj * dt + 3))
    throw Error(ErrorCode::DimensionMismatch, "checkpoint payload does not match header");
  Checkpoint ck;
  ck.params.w_img = Matrix(dj, di);
  ck.params.w_txt = Matrix(dj, dt);
  for (double& v : ck.params.w_img.data()) v = r.f64();
  for (double& v : ck.params.w_txt.data()) v = r.f64();
  ck.params.log_inv_tau = r.f64();
  ck.epoch = r.u64();
  ck.rng_state = r.u64();
  if (!ck.params.all_finite()) throw Error(ErrorCode::NonFiniteValue, "checkpoint contains non-finite values");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  io::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace spurclip
