#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eyeseg/error.hpp"

namespace eyeseg {

enum Label : std::uint8_t { background = 0, sclera = 1, iris = 2, pupil = 3 };

inline constexpr std::size_t kNumClasses = 4;

// Row-major label image with values in {0,1,2,3}.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = background)
      : height(h), width(w), labels(h * w, fill) {
    if (h == 0 || w == 0) throw ShapeError("mask dimensions must be positive");
  }

  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (labels.size() != height * width) throw ShapeError("mask label count does not match dimensions");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= kNumClasses) {
        throw FormatError("mask label " + std::to_string(labels[i]) + " out of range at pixel " +
                          std::to_string(i));
      }
    }
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace eyeseg
