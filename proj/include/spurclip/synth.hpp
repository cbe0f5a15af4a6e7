#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spurclip/bank.hpp"
#include "spurclip/boxes.hpp"
#include "spurclip/error.hpp"
#include "spurclip/manifest.hpp"
#include "spurclip/matrix.hpp"
#include "spurclip/rng.hpp"

namespace spurclip {

/// Synthetic two-tower dataset with one planted spurious attribute.
///
/// Latent space: orthonormal class directions u_c and an attribute direction
/// v orthogonal to all of them. An image of class y with attribute value s has
/// latent  alpha * u_y + beta * (s ? v : -v) + sigma * noise  and raw embedding
/// R_img * latent. Text rows are R_txt * (u_c + jitter_{c,t}) for the plain
/// variant and add +-gamma * v for the attribute variants. R_img and R_txt are
/// d x latent matrices with orthonormal columns scaled by per-column gains.
///
/// The emitted "pretrained" projections invert the mixing into a shared joint
/// space, except that the image side also maps v onto the axis separating the
/// classes the attribute co-occurs with (strength `pretrained_shortcut`).
/// This emulates a backbone that already absorbed the shortcut.
struct SynthConfig {
  std::size_t latent_dim = 16;
  std::size_t img_dim = 32;
  std::size_t txt_dim = 32;
  std::size_t joint_dim = 16;
  double class_strength = 1.0;           // alpha
  double attribute_strength = 2.0;       // beta
  double text_attribute_strength = 1.0;  // gamma
  double noise_sigma = 0.6;
  double template_jitter = 0.1;
  double pretrained_shortcut = 0.5;
  bool emit_pretrained = true;
  std::vector<std::string> classes{"landbird", "waterbird"};
  /// Train counts per class as (attribute absent, attribute present) before
  /// scaling. Default: landbirds 3498 on land / 184 on water, waterbirds 56 /
  /// 1057.
  std::vector<std::pair<std::size_t, std::size_t>> train_counts{{3498, 184}, {56, 1057}};
  double scale = 0.1;
  std::size_t val_per_group = 100;
  std::size_t test_per_group = 500;
  std::size_t n_templates = 8;
  std::size_t n_decoys = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(class_strength > 0.0)) throw Error(ErrorCode::BadConfig, "class_strength must be > 0");
    if (!(attribute_strength >= 0.0) || !(text_attribute_strength >= 0.0))
      throw Error(ErrorCode::BadConfig, "attribute strengths must be >= 0");
    if (!(noise_sigma >= 0.0) || !(template_jitter >= 0.0) || !(pretrained_shortcut >= 0.0))
      throw Error(ErrorCode::BadConfig, "noise, jitter and shortcut must be >= 0");
    if (classes.size() < 2) throw Error(ErrorCode::BadConfig, "need at least two classes");
    if (train_counts.size() != classes.size()) throw Error(ErrorCode::BadConfig, "train_counts needs one row per class");
    if (latent_dim < classes.size() + 1) throw Error(ErrorCode::BadConfig, "latent_dim must exceed the class count");
    if (img_dim < latent_dim || txt_dim < latent_dim)
      throw Error(ErrorCode::BadConfig, "embedding dims must be >= latent_dim");
    if (emit_pretrained && joint_dim < latent_dim)
      throw Error(ErrorCode::BadConfig, "joint_dim must be >= latent_dim for pretrained projections");
    if (!(scale > 0.0)) throw Error(ErrorCode::BadConfig, "scale must be > 0");
    if (val_per_group < 1 || test_per_group < 1) throw Error(ErrorCode::BadConfig, "val/test need >= 1 per group");
    if (n_templates < 1 || n_templates > 64) throw Error(ErrorCode::BadConfig, "n_templates must be in [1, 64]");
    for (const auto& [absent, present] : train_counts)
      if (scaled(absent) < 1 || scaled(present) < 1)
        throw Error(ErrorCode::BadConfig, "every train group needs >= 1 example after scaling");
  }

  std::size_t scaled(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale));
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [a, p] : c.train_counts) counts.push_back({a, p});
  return {{"latent_dim", c.latent_dim},
          {"img_dim", c.img_dim},
          {"txt_dim", c.txt_dim},
          {"joint_dim", c.joint_dim},
          {"alpha", c.class_strength},
          {"beta", c.attribute_strength},
          {"gamma", c.text_attribute_strength},
          {"sigma", c.noise_sigma},
          {"template_jitter", c.template_jitter},
          {"pretrained_shortcut", c.pretrained_shortcut},
          {"emit_pretrained", c.emit_pretrained},
          {"classes", c.classes},
          {"train_counts", counts},
          {"scale", c.scale},
          {"val_per_group", c.val_per_group},
          {"test_per_group", c.test_per_group},
          {"templates", c.n_templates},
          {"decoys", c.n_decoys},
          {"seed", c.seed}};
}

inline const std::vector<std::string>& prompt_templates() {
  static const std::vector<std::string> t{
      "a photo of a {label}.",          "a bad photo of a {label}.",       "a photo of many {label}.",
      "a sculpture of a {label}.",      "a photo of the hard to see {label}.", "a low resolution photo of the {label}.",
      "a rendering of a {label}.",      "graffiti of a {label}.",          "a bad photo of the {label}.",
      "a cropped photo of the {label}.", "a tattoo of a {label}.",          "the embroidered {label}.",
      "a photo of a hard to see {label}.", "a bright photo of a {label}.",  "a photo of a clean {label}.",
      "a photo of a dirty {label}.",
  };
  return t;
}

inline std::string template_name(std::size_t i) {
  const auto& t = prompt_templates();
  if (i < t.size()) return t[i];
  return "a photo of a {label}, variant " + std::to_string(i) + ".";
}

struct SynthData {
  EmbeddingBank images;
  EmbeddingBank texts;
  DatasetManifest manifest;
  std::optional<EmbeddingBank> init_image;
  std::optional<EmbeddingBank> init_text;
};

namespace detail {

/// rows x cols Gaussian matrix orthonormalized column by column (rows >= cols).
inline Matrix random_orthonormal_columns(std::size_t rows, std::size_t cols, SplitMix64& rng) {
  Matrix q(rows, cols);
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<double> v(rows);
    double n = 0.0;
    do {
      for (double& x : v) x = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        double d = 0.0;
        for (std::size_t r = 0; r < rows; ++r) d += v[r] * q(r, p);
        for (std::size_t r = 0; r < rows; ++r) v[r] -= d * q(r, p);
      }
      n = norm(v);
    } while (n < 1e-6);
    for (std::size_t r = 0; r < rows; ++r) q(r, c) = v[r] / n;
  }
  return q;
}

inline Matrix column(const Matrix& m, std::size_t c) {
  Matrix v(m.rows(), 1);
  for (std::size_t r = 0; r < m.rows(); ++r) v(r, 0) = m(r, c);
  return v;
}

struct Mixing {
  Matrix basis;  ///< d x latent, orthonormal columns
  std::vector<double> gains;

  std::vector<double> apply(std::span<const double> latent) const {
    std::vector<double> out(basis.rows(), 0.0);
    for (std::size_t c = 0; c < basis.cols(); ++c)
      for (std::size_t r = 0; r < basis.rows(); ++r) out[r] += basis(r, c) * gains[c] * latent[c];
    return out;
  }
  /// Left inverse: latent x d.
  Matrix left_inverse() const {
    Matrix inv(basis.cols(), basis.rows());
    for (std::size_t c = 0; c < basis.cols(); ++c)
      for (std::size_t r = 0; r < basis.rows(); ++r) inv(c, r) = basis(r, c) / gains[c];
    return inv;
  }
};

inline Mixing random_mixing(std::size_t d, std::size_t latent, SplitMix64& rng) {
  Mixing m{random_orthonormal_columns(d, latent, rng), std::vector<double>(latent)};
  for (double& g : m.gains) g = 0.5 + 1.5 * rng.uniform();
  return m;
}

}  // namespace detail

inline SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed);
  const std::size_t L = cfg.latent_dim;
  const std::size_t C = cfg.classes.size();

  const Matrix latent_basis = detail::random_orthonormal_columns(L, L, rng);
  auto direction = [&](std::size_t k) {
    std::vector<double> v(L);
    for (std::size_t r = 0; r < L; ++r) v[r] = latent_basis(r, k);
    return v;
  };
  std::vector<std::vector<double>> u;
  for (std::size_t c = 0; c < C; ++c) u.push_back(direction(c));
  const std::vector<double> v = direction(C);

  const auto mix_img = detail::random_mixing(cfg.img_dim, L, rng);
  const auto mix_txt = detail::random_mixing(cfg.txt_dim, L, rng);

  SynthData out;
  auto& m = out.manifest;
  m.image_bank_path = "images.speb";
  m.text_bank_path = "texts.speb";
  m.text_index.classes = cfg.classes;
  for (std::size_t t = 0; t < cfg.n_templates; ++t) m.text_index.templates.push_back(template_name(t));
  m.attributes.push_back({"water", "water background", "on water", "on land"});
  for (std::size_t k = 0; k < cfg.n_decoys; ++k)
    m.attributes.push_back({"decoy_" + std::to_string(k), "decoy attribute " + std::to_string(k), "", ""});
  m.mitigated_attribute = "water";
  m.text_index.variant_attribute = "water";

  // Text rows: for each (class, template) a plain, a present and an absent row.
  std::vector<double> text_rows;
  m.text_index.plain.assign(C, std::vector<std::size_t>(cfg.n_templates));
  m.text_index.present = m.text_index.plain;
  m.text_index.absent = m.text_index.plain;
  std::size_t next_row = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < cfg.n_templates; ++t) {
      std::vector<double> base = u[c];
      for (double& x : base) x += cfg.template_jitter * rng.normal();
      for (int variant = 0; variant < 3; ++variant) {
        std::vector<double> lat = base;
        const double sign = variant == 0 ? 0.0 : (variant == 1 ? 1.0 : -1.0);
        for (std::size_t r = 0; r < L; ++r) lat[r] += sign * cfg.text_attribute_strength * v[r];
        const auto raw = mix_txt.apply(lat);
        text_rows.insert(text_rows.end(), raw.begin(), raw.end());
        (variant == 0 ? m.text_index.plain : variant == 1 ? m.text_index.present : m.text_index.absent)[c][t] =
            next_row++;
      }
    }
  out.texts.n_rows = next_row;
  out.texts.dim = cfg.txt_dim;
  out.texts.data.assign(text_rows.begin(), text_rows.end());

  // Decoy prevalences spread over [0.3, 0.7].
  std::vector<double> prevalence(cfg.n_decoys);
  for (std::size_t k = 0; k < cfg.n_decoys; ++k)
    prevalence[k] = cfg.n_decoys == 1 ? 0.5 : 0.3 + 0.4 * static_cast<double>(k) / static_cast<double>(cfg.n_decoys - 1);

  std::vector<double> image_rows;
  std::vector<ExampleRecord> records;
  auto emit = [&](std::size_t label, bool present, Split split) {
    std::vector<double> lat(L);
    const double s = present ? 1.0 : -1.0;
    for (std::size_t r = 0; r < L; ++r)
      lat[r] = cfg.class_strength * u[label][r] + cfg.attribute_strength * s * v[r];
    for (std::size_t r = 0; r < L; ++r) lat[r] += cfg.noise_sigma * rng.normal();
    const auto raw = mix_img.apply(lat);
    image_rows.insert(image_rows.end(), raw.begin(), raw.end());
    ExampleRecord rec;
    rec.image_row = records.size();
    rec.label = label;
    rec.split = split;
    rec.flags.assign(m.attributes.size(), false);
    rec.flags[0] = present;
    for (std::size_t k = 0; k < cfg.n_decoys; ++k) rec.flags[1 + k] = rng.uniform() < prevalence[k];
    records.push_back(std::move(rec));
  };
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < cfg.scaled(cfg.train_counts[c].first); ++i) emit(c, false, Split::train);
    for (std::size_t i = 0; i < cfg.scaled(cfg.train_counts[c].second); ++i) emit(c, true, Split::train);
  }
  for (Split split : {Split::val, Split::test})
    for (std::size_t c = 0; c < C; ++c)
      for (bool present : {false, true})
        for (std::size_t i = 0; i < (split == Split::val ? cfg.val_per_group : cfg.test_per_group); ++i)
          emit(c, present, split);
  out.images.n_rows = records.size();
  out.images.dim = cfg.img_dim;
  out.images.data.assign(image_rows.begin(), image_rows.end());
  m.set_examples(std::move(records));

  if (cfg.emit_pretrained) {
    // Shortcut axis: classes weighted by how much more often than average the
    // attribute appears with them in training.
    std::vector<double> frac(C);
    double mean_frac = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double a = static_cast<double>(cfg.scaled(cfg.train_counts[c].first));
      const double p = static_cast<double>(cfg.scaled(cfg.train_counts[c].second));
      frac[c] = p / (a + p);
      mean_frac += frac[c] / static_cast<double>(C);
    }
    std::vector<double> axis(L, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < L; ++r) axis[r] += (frac[c] - mean_frac) * u[c][r];
    const double axis_norm = norm(axis);
    if (axis_norm > 0.0)
      for (double& x : axis) x /= axis_norm;

    const Matrix q = detail::random_orthonormal_columns(cfg.joint_dim, L, rng);
    Matrix img_map = Matrix::identity(L);  // I + k * axis v^T
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < L; ++c) img_map(r, c) += cfg.pretrained_shortcut * axis[r] * v[c];
    out.init_image = EmbeddingBank::from_matrix(matmul(q, matmul(img_map, mix_img.left_inverse())));
    out.init_text = EmbeddingBank::from_matrix(matmul(q, mix_txt.left_inverse()));
    m.init_image_projection = "init_image.speb";
    m.init_text_projection = "init_text.speb";
  }
  return out;
}

/// Writes banks and manifest into `dir`; returns the manifest path.
inline std::filesystem::path write_synth(const std::filesystem::path& dir, const SynthData& data) {
  std::filesystem::create_directories(dir);
  DatasetManifest m = data.manifest;
  m.image_bank_path = dir / "images.speb";
  m.text_bank_path = dir / "texts.speb";
  save_bank(m.image_bank_path, data.images);
  save_bank(m.text_bank_path, data.texts);
  if (data.init_image && data.init_text) {
    m.init_image_projection = dir / "init_image.speb";
    m.init_text_projection = dir / "init_text.speb";
    save_bank(*m.init_image_projection, *data.init_image);
    save_bank(*m.init_text_projection, *data.init_text);
  }
  const auto path = dir / "manifest.json";
  save_manifest(path, m);
  return path;
}

/// In-memory dataset equivalent to writing and re-loading the generator
/// output (banks rounded to f32 exactly as on disk).
inline Dataset to_dataset(const SynthData& data) {
  validate_manifest(data.manifest, data.images.n_rows, data.texts.n_rows);
  Dataset ds{data.manifest, data.images.to_matrix(), data.texts.to_matrix(), std::nullopt, std::nullopt};
  if (data.init_image) ds.init_image_projection = data.init_image->to_matrix();
  if (data.init_text) ds.init_text_projection = data.init_text->to_matrix();
  return ds;
}

// ---------------------------------------------------------------------------
// Explanation-map fixtures
// ---------------------------------------------------------------------------

/// Per example with alignment a (chosen by group): a random box B; the true
/// class map is a on B and 1 - a elsewhere; every other class map is 1 - a on
/// B and 0 elsewhere. Hence IoU_true = a|B| / (|B| + (1 - a)(hw - |B|)),
/// IoU_rival = 1 - a, and AIoU = IoU_true / (IoU_true + 1 - a):
/// 1 for a = 1 and 0 for a = 0.
struct MapConfig {
  std::size_t h = 8;
  std::size_t w = 8;
  double default_alignment = 1.0;
  std::map<GroupKey, double> group_alignment;
  std::uint64_t seed = 0;

  double alignment_for(const GroupKey& g) const {
    const auto it = group_alignment.find(g);
    return it == group_alignment.end() ? default_alignment : it->second;
  }

  void validate() const {
    if (h < 3 || w < 3) throw Error(ErrorCode::BadConfig, "maps must be at least 3x3");
    auto bad = [](double a) { return !(a >= 0.0 && a <= 1.0); };
    if (bad(default_alignment)) throw Error(ErrorCode::BadConfig, "alignment must be in [0, 1]");
    for (const auto& [k, a] : group_alignment)
      if (bad(a)) throw Error(ErrorCode::BadConfig, "alignment must be in [0, 1]");
  }
};

/// Closed-form AIoU of the fixture for a box of `box_pixels` pixels.
inline double planted_aiou(double alignment, std::size_t box_pixels, std::size_t h, std::size_t w) {
  const double b = static_cast<double>(box_pixels);
  const double own = alignment * b / (b + (1.0 - alignment) * (static_cast<double>(h * w) - b));
  const double denom = own + (1.0 - alignment);
  return denom == 0.0 ? 0.0 : own / denom;
}

inline std::pair<MapBank, BoxList> plant_maps(const MapConfig& cfg, const DatasetManifest& m,
                                              const std::optional<std::string>& attribute_id = std::nullopt) {
  cfg.validate();
  if (m.n_classes() < 2) throw Error(ErrorCode::BadConfig, "maps need at least two classes");
  std::optional<std::size_t> attr;
  if (attribute_id) attr = m.attribute_index(*attribute_id);
  else if (m.mitigated_attribute) attr = m.mitigated_index();

  SplitMix64 rng(cfg.seed);
  MapBank bank{m.examples().size(), m.n_classes(), cfg.h, cfg.w, {}, 0};
  bank.data.assign(bank.n_examples * bank.n_classes * cfg.h * cfg.w, 0.0f);
  BoxList boxes;
  for (std::size_t i = 0; i < m.examples().size(); ++i) {
    const auto& e = m.examples()[i];
    const GroupKey key{e.label, attr ? static_cast<bool>(e.flags[*attr]) : false};
    const double a = cfg.alignment_for(key);
    // Box strictly smaller than the raster so the outside is never empty.
    const long bw = 2 + static_cast<long>(rng.index(cfg.w - 2));
    const long bh = 2 + static_cast<long>(rng.index(cfg.h - 2));
    const long x0 = static_cast<long>(rng.index(cfg.w - static_cast<std::size_t>(bw) + 1));
    const long y0 = static_cast<long>(rng.index(cfg.h - static_cast<std::size_t>(bh) + 1));
    boxes.push_back({{x0, y0, x0 + bw, y0 + bh}});
    const BoxMask mask = rasterize(boxes.back(), cfg.h, cfg.w);
    for (std::size_t c = 0; c < m.n_classes(); ++c) {
      auto map = bank.map(i, c);
      for (std::size_t p = 0; p < map.size(); ++p) {
        const bool in = mask.pixels[p] > 0.0f;
        double val = 0.0;
        if (c == e.label) val = in ? a : 1.0 - a;
        else val = in ? 1.0 - a : 0.0;
        map[p] = static_cast<float>(val);
      }
    }
  }
  return {std::move(bank), std::move(boxes)};
}

}  // namespace spurclip
