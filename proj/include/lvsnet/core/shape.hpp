#pragma once

#include <cstdint>
#include <string>

#include "lvsnet/core/errors.hpp"

namespace lvsnet {

// (height, width, channels) contract threaded through every block.
struct FeatureMapSpec {
  int height = 0;
  int width = 0;
  int channels = 0;

  bool operator==(const FeatureMapSpec&) const = default;

  void validate(const char* who) const {
    if (height < 1 || width < 1 || channels < 1) {
      throw shape_error(std::string(who) + ": feature map dims must be >= 1, got " + str());
    }
  }

  std::string str() const {
    return "(" + std::to_string(height) + "," + std::to_string(width) + "," +
           std::to_string(channels) + ")";
  }
};

// NHWC tensor extents. n is the batch dimension; blocks describe their
// contracts in FeatureMapSpec terms and ignore n.
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  bool operator==(const Shape&) const = default;

  std::int64_t size() const {
    return static_cast<std::int64_t>(n) * h * w * c;
  }

  FeatureMapSpec map() const { return {h, w, c}; }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
           std::to_string(c) + ")";
  }
};

inline Shape with_batch(int n, const FeatureMapSpec& m) { return {n, m.height, m.width, m.channels}; }

}  // namespace lvsnet
