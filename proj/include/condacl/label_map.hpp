#pragma once

#include <cstdint>
#include <vector>

namespace condacl {

/// Per-pixel hard class ids, row-major H×W. 255 marks ignored pixels.
struct LabelMap {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> ids;

  static constexpr uint8_t kIgnore = 255;

  LabelMap() = default;
  LabelMap(int64_t h_, int64_t w_) : h(h_), w(w_), ids(static_cast<size_t>(h_ * w_), 0) {}

  uint8_t& at(int64_t y, int64_t x) { return ids[static_cast<size_t>(y * w + x)]; }
  uint8_t at(int64_t y, int64_t x) const { return ids[static_cast<size_t>(y * w + x)]; }
};

}  // namespace condacl
