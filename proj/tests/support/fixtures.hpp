#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "spurclip/spurclip.hpp"

namespace fixture {

namespace fs = std::filesystem;

/// Fresh empty directory under the system temp dir.
inline fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("spurclip_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// Two classes, two templates, one attribute "a" with phrases and variant
/// rows, a decoy attribute "d" without. Text rows: plain 0..3, present 4..7,
/// absent 8..11.
inline spurclip::DatasetManifest tiny_manifest(std::size_t n_examples = 4) {
  using namespace spurclip;
  DatasetManifest m;
  auto& ti = m.text_index;
  ti.classes = {"cat", "dog"};
  ti.templates = {"a photo of a {label}.", "a drawing of a {label}."};
  ti.plain = {{0, 1}, {2, 3}};
  ti.variant_attribute = "a";
  ti.present = {{4, 5}, {6, 7}};
  ti.absent = {{8, 9}, {10, 11}};
  m.add_attribute({"a", "grass", "on grass", "indoors"});
  m.add_attribute({"d", "decoy", "", ""});
  m.mitigated_attribute = "a";
  for (std::size_t i = 0; i < n_examples; ++i) {
    ExampleRecord r{i, i % 2, {i % 3 == 0, i % 2 == 1}, Split::train};
    m.add_example(r);
  }
  return m;
}

inline spurclip::EmbeddingBank random_bank(std::size_t rows, std::size_t dim, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<float> nd;
  spurclip::EmbeddingBank b{rows, dim, std::vector<float>(rows * dim)};
  for (float& v : b.data) v = nd(gen);
  return b;
}

/// Writes banks and the manifest; returns the manifest path.
inline fs::path write_tiny(const fs::path& dir, spurclip::DatasetManifest m, std::size_t dim = 4) {
  using namespace spurclip;
  m.image_bank_path = dir / "images.speb";
  m.text_bank_path = dir / "texts.speb";
  save_bank(m.image_bank_path, random_bank(std::max<std::size_t>(m.examples().size(), 1), dim, 1));
  save_bank(m.text_bank_path, random_bank(12, dim, 2));
  save_manifest(dir / "manifest.json", m);
  return dir / "manifest.json";
}

}  // namespace fixture
