#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurclip/bank.hpp"
#include "spurclip/binary_io.hpp"
#include "spurclip/error.hpp"
#include "spurclip/matrix.hpp"

namespace spurclip {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error(ErrorCode::InvalidManifest, "unknown split '" + s + "'");
}

enum class Variant { plain, attr_present, attr_absent };

inline Variant variant_for(bool attr_value) { return attr_value ? Variant::attr_present : Variant::attr_absent; }

/// (class label, attribute value): the unit of group metrics.
struct GroupKey {
  std::size_t label = 0;
  bool attr_value = false;
  auto operator<=>(const GroupKey&) const = default;
};

inline std::string to_string(const GroupKey& g) {
  return "(" + std::to_string(g.label) + "," + (g.attr_value ? "1" : "0") + ")";
}

struct Attribute {
  std::string id;
  std::string name;
  std::string present_phrase;
  std::string absent_phrase;

  bool has_phrases() const { return !present_phrase.empty() && !absent_phrase.empty(); }
};

/// Maps (class, template, variant) to a row of the text bank.
///
/// Attribute variants are only present when the index was built for a
/// particular attribute (`variant_attribute`).
class TextBankIndex {
 public:
  using Table = std::vector<std::vector<std::size_t>>;  // [class][template]

  std::vector<std::string> classes;
  std::vector<std::string> templates;
  Table plain;
  std::optional<std::string> variant_attribute;
  Table present;
  Table absent;

  std::size_t n_classes() const { return classes.size(); }
  std::size_t n_templates() const { return templates.size(); }
  bool has_variants() const { return variant_attribute.has_value(); }

  std::size_t row_of(std::size_t cls, std::size_t tmpl, Variant v) const {
    if (cls >= n_classes() || tmpl >= n_templates())
      throw Error(ErrorCode::InvalidManifest, "text index out of range");
    switch (v) {
      case Variant::plain: return plain[cls][tmpl];
      case Variant::attr_present:
      case Variant::attr_absent:
        if (!has_variants()) throw Error(ErrorCode::MissingVariant, "text bank has no attribute variants");
        return (v == Variant::attr_present ? present : absent)[cls][tmpl];
    }
    return 0;
  }
};

struct ExampleRecord {
  std::size_t image_row = 0;
  std::size_t label = 0;
  /// Indexed like DatasetManifest::attributes.
  std::vector<bool> flags;
  Split split = Split::train;
};

using GroupCounts = std::map<GroupKey, std::size_t>;

class DatasetManifest {
 public:
  std::filesystem::path image_bank_path;
  std::filesystem::path text_bank_path;
  TextBankIndex text_index;
  std::vector<Attribute> attributes;
  std::optional<std::string> mitigated_attribute;
  std::optional<std::filesystem::path> init_image_projection;
  std::optional<std::filesystem::path> init_text_projection;

  const std::vector<ExampleRecord>& examples() const { return examples_; }
  /// Train-split counts per attribute id; always consistent with examples().
  const std::map<std::string, GroupCounts>& group_stats() const { return group_stats_; }

  std::size_t n_classes() const { return text_index.n_classes(); }

  std::size_t attribute_index(const std::string& id) const {
    for (std::size_t i = 0; i < attributes.size(); ++i)
      if (attributes[i].id == id) return i;
    throw Error(ErrorCode::UnknownAttribute, "unknown attribute '" + id + "'");
  }

  /// The attribute selected for mitigation, or throws.
  std::size_t mitigated_index() const {
    if (!mitigated_attribute) throw Error(ErrorCode::UnknownAttribute, "manifest has no mitigated_attribute");
    return attribute_index(*mitigated_attribute);
  }

  void add_example(ExampleRecord rec) {
    rec.flags.resize(attributes.size(), false);
    examples_.push_back(std::move(rec));
    recount();
  }

  void set_examples(std::vector<ExampleRecord> recs) {
    for (auto& r : recs) r.flags.resize(attributes.size(), false);
    examples_ = std::move(recs);
    recount();
  }

  void set_split(std::size_t example, Split split) {
    examples_.at(example).split = split;
    recount();
  }

  void set_flag(std::size_t example, std::size_t attribute, bool value) {
    examples_.at(example).flags.at(attribute) = value;
    recount();
  }

  void add_attribute(Attribute a) {
    attributes.push_back(std::move(a));
    for (auto& r : examples_) r.flags.resize(attributes.size(), false);
    recount();
  }

  GroupCounts recount_group_stats(std::size_t attribute) const {
    GroupCounts counts;
    for (std::size_t c = 0; c < n_classes(); ++c)
      for (bool v : {false, true}) counts[{c, v}] = 0;
    for (const auto& r : examples_)
      if (r.split == Split::train) ++counts[{r.label, static_cast<bool>(r.flags[attribute])}];
    return counts;
  }

  /// Used by the loader: replaces stored stats with the values read from disk.
  void set_stored_group_stats(std::map<std::string, GroupCounts> stats) { group_stats_ = std::move(stats); }

  void recount() {
    group_stats_.clear();
    for (std::size_t a = 0; a < attributes.size(); ++a) group_stats_[attributes[a].id] = recount_group_stats(a);
  }

 private:
  std::vector<ExampleRecord> examples_;
  std::map<std::string, GroupCounts> group_stats_;
};

/// Checks every cross-reference. Bank sizes are passed in so validation does
/// not depend on how the banks were obtained.
inline void validate_manifest(const DatasetManifest& m, std::size_t n_image_rows, std::size_t n_text_rows) {
  const auto& ti = m.text_index;
  if (ti.n_classes() < 1) throw Error(ErrorCode::InvalidManifest, "no classes");
  if (ti.n_templates() < 1) throw Error(ErrorCode::InvalidManifest, "no templates");

  std::set<std::string> ids;
  for (const auto& a : m.attributes)
    if (a.id.empty() || !ids.insert(a.id).second)
      throw Error(ErrorCode::InvalidManifest, "attribute ids must be unique and nonempty");

  std::set<std::size_t> used_rows;
  auto check_table = [&](const TextBankIndex::Table& t, const char* what) {
    if (t.size() != ti.n_classes()) throw Error(ErrorCode::MissingVariant, std::string(what) + " rows missing a class");
    for (const auto& per_class : t) {
      if (per_class.size() != ti.n_templates())
        throw Error(ErrorCode::MissingVariant, std::string(what) + " rows missing a template");
      for (std::size_t row : per_class) {
        if (row >= n_text_rows) throw Error(ErrorCode::InvalidManifest, "text row out of range", row);
        if (!used_rows.insert(row).second)
          throw Error(ErrorCode::InvalidManifest, "text row mapped twice", row);
      }
    }
  };
  check_table(ti.plain, "plain");
  if (ti.variant_attribute) {
    const auto& attr = m.attributes[m.attribute_index(*ti.variant_attribute)];
    if (!attr.has_phrases())
      throw Error(ErrorCode::MissingVariant, "variant attribute '" + attr.id + "' has no phrase pair");
    check_table(ti.present, "attr_present");
    check_table(ti.absent, "attr_absent");
  } else if (!ti.present.empty() || !ti.absent.empty()) {
    throw Error(ErrorCode::InvalidManifest, "attribute variant rows without variant_attribute");
  }

  if (m.mitigated_attribute) {
    m.attribute_index(*m.mitigated_attribute);
    if (ti.variant_attribute != m.mitigated_attribute)
      throw Error(ErrorCode::MissingVariant,
                  "mitigated attribute '" + *m.mitigated_attribute + "' has no attribute variants in the text bank");
  }

  for (std::size_t i = 0; i < m.examples().size(); ++i) {
    const auto& e = m.examples()[i];
    if (e.label >= ti.n_classes()) throw Error(ErrorCode::InvalidManifest, "label out of range", i);
    if (e.image_row >= n_image_rows) throw Error(ErrorCode::InvalidManifest, "image row out of range", i);
    if (e.flags.size() != m.attributes.size()) throw Error(ErrorCode::UnknownAttribute, "flag table size", i);
  }

  for (std::size_t a = 0; a < m.attributes.size(); ++a) {
    const auto it = m.group_stats().find(m.attributes[a].id);
    if (it == m.group_stats().end() || it->second != m.recount_group_stats(a))
      throw Error(ErrorCode::GroupStatsMismatch, "group_stats for '" + m.attributes[a].id + "' disagree with recount");
  }
  for (const auto& [id, counts] : m.group_stats()) m.attribute_index(id);
}

/// Cells of the (label, attribute value) partition of one split. Only
/// nonempty cells appear; example indices are ascending within a cell.
inline std::map<GroupKey, std::vector<std::size_t>> partition_groups(const DatasetManifest& m,
                                                                     const std::string& attribute_id, Split split) {
  const std::size_t a = m.attribute_index(attribute_id);
  std::map<GroupKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < m.examples().size(); ++i) {
    const auto& e = m.examples()[i];
    if (e.split == split) cells[{e.label, static_cast<bool>(e.flags[a])}].push_back(i);
  }
  return cells;
}

inline std::vector<std::size_t> split_indices(const DatasetManifest& m, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.examples().size(); ++i)
    if (m.examples()[i].split == split) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// JSON schema (version 1). Paths are relative to the manifest's directory.
//
// {
//   "format": "spurclip-manifest", "version": 1,
//   "image_bank": "images.speb", "text_bank": "texts.speb",
//   "init_projection": {"image": "init_image.speb", "text": "init_text.speb"},   (optional)
//   "classes": [...], "templates": [...],
//   "text_rows": {"plain": [[row per template] per class],
//                 "variant_attribute": "water", "present": [[...]], "absent": [[...]]},
//   "attributes": [{"id", "name", "present_phrase", "absent_phrase"}],
//   "mitigated_attribute": "water" | null,
//   "examples": [{"image_row", "label", "attributes": [ids present], "split"}],
//   "group_stats": [{"attribute", "label", "attr_value", "count"}]
// }
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T get_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::InvalidManifest, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidManifest, std::string("field '") + key + "': " + e.what());
  }
}

inline std::string relative_to(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (base.empty()) return p.generic_string();
  return p.lexically_relative(base).generic_string();
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m, const std::filesystem::path& base_dir = {}) {
  using nlohmann::json;
  json j;
  j["format"] = "spurclip-manifest";
  j["version"] = 1;
  j["image_bank"] = detail::relative_to(m.image_bank_path, base_dir);
  j["text_bank"] = detail::relative_to(m.text_bank_path, base_dir);
  if (m.init_image_projection && m.init_text_projection)
    j["init_projection"] = {{"image", detail::relative_to(*m.init_image_projection, base_dir)},
                            {"text", detail::relative_to(*m.init_text_projection, base_dir)}};
  j["classes"] = m.text_index.classes;
  j["templates"] = m.text_index.templates;
  json rows;
  rows["plain"] = m.text_index.plain;
  if (m.text_index.variant_attribute) {
    rows["variant_attribute"] = *m.text_index.variant_attribute;
    rows["present"] = m.text_index.present;
    rows["absent"] = m.text_index.absent;
  }
  j["text_rows"] = rows;
  j["attributes"] = json::array();
  for (const auto& a : m.attributes)
    j["attributes"].push_back(
        {{"id", a.id}, {"name", a.name}, {"present_phrase", a.present_phrase}, {"absent_phrase", a.absent_phrase}});
  j["mitigated_attribute"] = m.mitigated_attribute ? json(*m.mitigated_attribute) : json(nullptr);
  j["examples"] = json::array();
  for (const auto& e : m.examples()) {
    json ids = json::array();
    for (std::size_t a = 0; a < m.attributes.size(); ++a)
      if (e.flags[a]) ids.push_back(m.attributes[a].id);
    j["examples"].push_back(
        {{"image_row", e.image_row}, {"label", e.label}, {"attributes", ids}, {"split", to_string(e.split)}});
  }
  j["group_stats"] = json::array();
  for (const auto& a : m.attributes)
    for (const auto& [key, count] : m.group_stats().at(a.id))
      j["group_stats"].push_back(
          {{"attribute", a.id}, {"label", key.label}, {"attr_value", key.attr_value}, {"count", count}});
  return j;
}

/// Parses without loading banks or validating cross references.
inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::get_field;
  DatasetManifest m;
  if (!j.is_object()) throw Error(ErrorCode::InvalidManifest, "manifest must be a JSON object");
  if (j.value("version", 0) != 1) throw Error(ErrorCode::InvalidManifest, "unsupported manifest version");
  m.image_bank_path = base_dir / get_field<std::string>(j, "image_bank");
  m.text_bank_path = base_dir / get_field<std::string>(j, "text_bank");
  if (j.contains("init_projection")) {
    const auto& ip = j.at("init_projection");
    m.init_image_projection = base_dir / get_field<std::string>(ip, "image");
    m.init_text_projection = base_dir / get_field<std::string>(ip, "text");
  }
  m.text_index.classes = get_field<std::vector<std::string>>(j, "classes");
  m.text_index.templates = get_field<std::vector<std::string>>(j, "templates");
  const auto rows = get_field<nlohmann::json>(j, "text_rows");
  m.text_index.plain = get_field<TextBankIndex::Table>(rows, "plain");
  if (rows.contains("variant_attribute") && !rows.at("variant_attribute").is_null()) {
    m.text_index.variant_attribute = get_field<std::string>(rows, "variant_attribute");
    if (!rows.contains("present") || !rows.contains("absent"))
      throw Error(ErrorCode::MissingVariant, "variant_attribute declared without present/absent rows");
    m.text_index.present = get_field<TextBankIndex::Table>(rows, "present");
    m.text_index.absent = get_field<TextBankIndex::Table>(rows, "absent");
  }
  for (const auto& a : get_field<nlohmann::json>(j, "attributes"))
    m.attributes.push_back({get_field<std::string>(a, "id"), a.value("name", std::string{}),
                            a.value("present_phrase", std::string{}), a.value("absent_phrase", std::string{})});
  if (j.contains("mitigated_attribute") && !j.at("mitigated_attribute").is_null())
    m.mitigated_attribute = get_field<std::string>(j, "mitigated_attribute");

  std::vector<ExampleRecord> recs;
  for (const auto& e : get_field<nlohmann::json>(j, "examples")) {
    ExampleRecord r;
    r.image_row = get_field<std::size_t>(e, "image_row");
    r.label = get_field<std::size_t>(e, "label");
    r.split = parse_split(get_field<std::string>(e, "split"));
    r.flags.assign(m.attributes.size(), false);
    for (const auto& id : get_field<std::vector<std::string>>(e, "attributes")) r.flags[m.attribute_index(id)] = true;
    recs.push_back(std::move(r));
  }
  m.set_examples(std::move(recs));

  std::map<std::string, GroupCounts> stats;
  for (const auto& g : get_field<nlohmann::json>(j, "group_stats")) {
    const auto id = get_field<std::string>(g, "attribute");
    m.attribute_index(id);
    stats[id][{get_field<std::size_t>(g, "label"), get_field<bool>(g, "attr_value")}] =
        get_field<std::size_t>(g, "count");
  }
  m.set_stored_group_stats(std::move(stats));
  return m;
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(1) + "\n"; }

/// A manifest plus its banks widened to f64.
struct Dataset {
  DatasetManifest manifest;
  Matrix images;
  Matrix texts;
  std::optional<Matrix> init_image_projection;
  std::optional<Matrix> init_text_projection;
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ParseError, manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j, manifest_path.parent_path());
  const auto img = load_bank(ds.manifest.image_bank_path);
  const auto txt = load_bank(ds.manifest.text_bank_path);
  validate_manifest(ds.manifest, img.n_rows, txt.n_rows);
  ds.images = img.to_matrix();
  ds.texts = txt.to_matrix();
  if (ds.manifest.init_image_projection) {
    ds.init_image_projection = load_bank(*ds.manifest.init_image_projection).to_matrix();
    ds.init_text_projection = load_bank(*ds.manifest.init_text_projection).to_matrix();
    if (ds.init_image_projection->cols() != img.dim || ds.init_text_projection->cols() != txt.dim ||
        ds.init_image_projection->rows() != ds.init_text_projection->rows())
      throw Error(ErrorCode::DimensionMismatch, "initial projections do not match bank dimensions");
  }
  return ds;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) { return load_dataset(path).manifest; }

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  io::write_file_atomic(path, dump_json(manifest_to_json(m, path.parent_path())));
}

}  // namespace spurclip
