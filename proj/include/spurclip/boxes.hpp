#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurclip/binary_io.hpp"
#include "spurclip/error.hpp"

namespace spurclip {

/// Half-open pixel rectangle [x0, x1) x [y0, y1); x indexes columns.
struct Box {
  long x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

using BoxList = std::vector<std::vector<Box>>;  // per example

/// Binary h x w mask, stored as 0.0 / 1.0 so it can meet maps in min/max.
struct BoxMask {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> pixels;

  std::size_t positives() const {
    std::size_t n = 0;
    for (float v : pixels) n += v > 0.0f;
    return n;
  }
};

/// Union of the rectangles. Rectangles must lie inside the h x w raster.
inline BoxMask rasterize(const std::vector<Box>& boxes, std::size_t h, std::size_t w) {
  BoxMask mask{h, w, std::vector<float>(h * w, 0.0f)};
  for (const auto& b : boxes) {
    if (b.x0 < 0 || b.y0 < 0 || b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > static_cast<long>(w) ||
        b.y1 > static_cast<long>(h))
      throw Error(ErrorCode::ShapeMismatch, "box outside the " + std::to_string(h) + "x" + std::to_string(w) + " raster");
    for (long y = b.y0; y < b.y1; ++y)
      for (long x = b.x0; x < b.x1; ++x) mask.pixels[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = 1.0f;
  }
  return mask;
}

inline nlohmann::json boxes_to_json(const BoxList& boxes) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& per_example : boxes) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : per_example) arr.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
    j.push_back(arr);
  }
  return j;
}

inline BoxList boxes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::ParseError, "boxes file must be a JSON array");
  BoxList out;
  for (const auto& per_example : j) {
    if (!per_example.is_array()) throw Error(ErrorCode::ParseError, "each example's boxes must be an array");
    auto& list = out.emplace_back();
    for (const auto& b : per_example) {
      try {
        list.push_back({b.at("x0").get<long>(), b.at("y0").get<long>(), b.at("x1").get<long>(), b.at("y1").get<long>()});
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("bad box: ") + e.what(), out.size() - 1);
      }
    }
  }
  return out;
}

inline BoxList load_boxes(const std::filesystem::path& path) {
  try {
    return boxes_from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

inline void save_boxes(const std::filesystem::path& path, const BoxList& boxes) {
  io::write_file_atomic(path, boxes_to_json(boxes).dump() + "\n");
}

}  // namespace spurclip
