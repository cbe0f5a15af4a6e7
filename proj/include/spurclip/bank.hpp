#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spurclip/binary_io.hpp"
#include "spurclip/error.hpp"
#include "spurclip/matrix.hpp"

namespace spurclip {

inline constexpr std::uint32_t kBankVersion = 1;

/// Frozen encoder outputs, one f32 row per embedding.
///
/// File layout: "SPEB", u32 version, u64 n_rows, u64 dim, then
/// n_rows*dim little-endian f32 values in row-major order.
struct EmbeddingBank {
  std::size_t n_rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;

  std::span<const float> row(std::size_t r) const { return {data.data() + r * dim, dim}; }

  /// Widens to f64 for the training path.
  Matrix to_matrix() const {
    Matrix m(n_rows, dim);
    std::copy(data.begin(), data.end(), m.data().begin());
    return m;
  }

  static EmbeddingBank from_matrix(const Matrix& m) {
    EmbeddingBank b{m.rows(), m.cols(), std::vector<float>(m.size())};
    std::transform(m.data().begin(), m.data().end(), b.data.begin(),
                   [](double v) { return static_cast<float>(v); });
    return b;
  }

  friend bool operator==(const EmbeddingBank&, const EmbeddingBank&) = default;
};

inline void validate_bank(const EmbeddingBank& bank) {
  if (bank.n_rows < 1 || bank.dim < 1)
    throw Error(ErrorCode::DimensionMismatch, "bank must have at least one row and one column");
  if (bank.data.size() != bank.n_rows * bank.dim)
    throw Error(ErrorCode::DimensionMismatch, "payload size does not match header");
  for (std::size_t r = 0; r < bank.n_rows; ++r)
    for (float v : bank.row(r))
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "row " + std::to_string(r), r);
}

inline std::vector<char> encode_bank(const EmbeddingBank& bank) {
  validate_bank(bank);
  io::Writer w;
  w.magic("SPEB");
  w.u32(kBankVersion);
  w.u64(bank.n_rows);
  w.u64(bank.dim);
  for (float v : bank.data) w.f32(v);
  return w.bytes();
}

inline EmbeddingBank decode_bank(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  if (!r.magic("SPEB")) throw Error(ErrorCode::BadMagic, "expected SPEB header");
  if (const auto v = r.u32(); v != kBankVersion)
    throw Error(ErrorCode::BadMagic, "unsupported bank version " + std::to_string(v));
  EmbeddingBank bank;
  bank.n_rows = r.u64();
  bank.dim = r.u64();
  if (bank.n_rows < 1 || bank.dim < 1)
    throw Error(ErrorCode::DimensionMismatch, "bank must have at least one row and one column");
  if (r.remaining() != bank.n_rows * bank.dim * 4)
    throw Error(ErrorCode::DimensionMismatch,
                "header declares " + std::to_string(bank.n_rows) + "x" + std::to_string(bank.dim) +
                    " but payload holds " + std::to_string(r.remaining() / 4) + " values");
  bank.data.resize(bank.n_rows * bank.dim);
  for (float& v : bank.data) v = r.f32();
  validate_bank(bank);
  return bank;
}

inline EmbeddingBank load_bank(const std::filesystem::path& path) { return decode_bank(io::read_file(path)); }

inline void save_bank(const std::filesystem::path& path, const EmbeddingBank& bank) {
  io::write_file_atomic(path, encode_bank(bank));
}

/// Per-example, per-class explanation maps.
///
/// File layout: "SPMB", u32 version, u64 n_examples, u64 n_classes, u64 h,
/// u64 w, then f32 values in (example, class, row, col) order.
struct MapBank {
  std::size_t n_examples = 0;
  std::size_t n_classes = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> data;
  /// Number of values the loader had to clamp into [0, 1].
  std::size_t clamped = 0;

  std::span<const float> map(std::size_t example, std::size_t cls) const {
    const std::size_t plane = h * w;
    return {data.data() + (example * n_classes + cls) * plane, plane};
  }
  std::span<float> map(std::size_t example, std::size_t cls) {
    const std::size_t plane = h * w;
    return {data.data() + (example * n_classes + cls) * plane, plane};
  }
};

inline std::vector<char> encode_map_bank(const MapBank& maps) {
  if (maps.data.size() != maps.n_examples * maps.n_classes * maps.h * maps.w)
    throw Error(ErrorCode::DimensionMismatch, "map payload size does not match header");
  io::Writer w;
  w.magic("SPMB");
  w.u32(kBankVersion);
  w.u64(maps.n_examples);
  w.u64(maps.n_classes);
  w.u64(maps.h);
  w.u64(maps.w);
  for (float v : maps.data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "map value not finite");
    w.f32(std::clamp(v, 0.0f, 1.0f));
  }
  return w.bytes();
}

/// Out-of-range values are clamped into [0, 1] and counted in `clamped`.
inline MapBank decode_map_bank(std::vector<char> bytes) {
  io::Reader r(std::move(bytes));
  if (!r.magic("SPMB")) throw Error(ErrorCode::BadMagic, "expected SPMB header");
  if (const auto v = r.u32(); v != kBankVersion)
    throw Error(ErrorCode::BadMagic, "unsupported map bank version " + std::to_string(v));
  MapBank maps;
  maps.n_examples = r.u64();
  maps.n_classes = r.u64();
  maps.h = r.u64();
  maps.w = r.u64();
  const std::size_t n = maps.n_examples * maps.n_classes * maps.h * maps.w;
  if (maps.h < 1 || maps.w < 1 || r.remaining() != n * 4)
    throw Error(ErrorCode::DimensionMismatch, "map bank payload does not match header");
  maps.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float v = r.f32();
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "map value not finite", i);
    if (v < 0.0f || v > 1.0f) {
      v = std::clamp(v, 0.0f, 1.0f);
      ++maps.clamped;
    }
    maps.data[i] = v;
  }
  return maps;
}

inline MapBank load_map_bank(const std::filesystem::path& path) { return decode_map_bank(io::read_file(path)); }

inline void save_map_bank(const std::filesystem::path& path, const MapBank& maps) {
  io::write_file_atomic(path, encode_map_bank(maps));
}

}  // namespace spurclip
