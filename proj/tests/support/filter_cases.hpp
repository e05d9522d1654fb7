#pragma once

#include <cmath>
#include <string>

#include "eyeseg/filter.hpp"
#include "support/oracles.hpp"

namespace cases {

struct FilterCase {
  std::string name;
  eyeseg::Mask input;
  eyeseg::Mask expected;
};

// 16x16: a 40-pixel sclera blob holding iris and pupil, a detached 7-pixel
// sclera blob and a detached 2-pixel pupil speck.
inline FilterCase two_blobs() {
  eyeseg::Mask eye(16, 16);
  for (std::size_t r = 1; r <= 5; ++r)
    for (std::size_t c = 1; c <= 8; ++c) eye.at(r, c) = eyeseg::sclera;
  for (std::size_t r = 2; r <= 4; ++r)
    for (std::size_t c = 3; c <= 6; ++c) eye.at(r, c) = eyeseg::iris;
  eye.at(3, 4) = eyeseg::pupil;
  eye.at(3, 5) = eyeseg::pupil;
  eyeseg::Mask in = eye;
  for (std::size_t c = 10; c <= 13; ++c) in.at(10, c) = eyeseg::sclera;
  for (std::size_t c = 10; c <= 12; ++c) in.at(11, c) = eyeseg::sclera;
  in.at(14, 2) = eyeseg::pupil;
  in.at(14, 3) = eyeseg::pupil;
  return {"two-blob", in, eye};
}

inline double radius(std::size_t r, std::size_t c, double cr, double cc) {
  return std::hypot(static_cast<double>(r) - cr, static_cast<double>(c) - cc);
}

inline eyeseg::Mask centered_eye(std::size_t side) {
  eyeseg::Mask m(side, side);
  const double ctr = (static_cast<double>(side) - 1.0) / 2.0;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double d = radius(r, c, ctr, ctr);
      m.at(r, c) = d <= 1.5 ? eyeseg::pupil : d <= 3.5 ? eyeseg::iris : d <= 7.0 ? eyeseg::sclera : eyeseg::background;
    }
  return m;
}

// Spurious iris-colored arc (half ring) beside the eye: removed entirely.
inline FilterCase open_ring() {
  const std::size_t side = 32;
  const double ctr = (side - 1.0) / 2.0;
  eyeseg::Mask eye = centered_eye(side);
  eyeseg::Mask in = eye;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double d = radius(r, c, ctr, ctr);
      if (d >= 11.0 && d <= 12.5 && static_cast<double>(r) < ctr) in.at(r, c) = eyeseg::iris;
    }
  return {"open-ring", in, eye};
}

// Closed sclera-colored ring enclosing the eye: its interior is a hole at
// level 1, so the filled disk becomes sclera while iris and pupil survive.
inline FilterCase closed_ring() {
  const std::size_t side = 32;
  const double ctr = (side - 1.0) / 2.0;
  const eyeseg::Mask eye = centered_eye(side);
  eyeseg::Mask in = eye, out = eye;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const double d = radius(r, c, ctr, ctr);
      if (d >= 13.0 && d <= 14.0) in.at(r, c) = eyeseg::sclera;
      if (d <= 14.0 && out.at(r, c) == eyeseg::background) out.at(r, c) = eyeseg::sclera;
    }
  return {"closed-ring", in, out};
}

// Empty when out = filter_mask(in) satisfies every filter invariant.
inline std::string invariant_violation(const eyeseg::Mask& in, const eyeseg::Mask& out) {
  using namespace eyeseg;
  if (out.height != in.height || out.width != in.width) return "size changed";
  std::size_t prev = out.size() + 1;
  Mask working = in;
  for (std::uint8_t level = 1; level <= 3; ++level) {
    const BinaryImage keep = threshold_binary(out, level);
    const std::size_t n = keep.count();
    if (n > prev) return "nesting broken at level " + std::to_string(level);
    prev = n;
    if (level > 1) {
      const BinaryImage outer = threshold_binary(out, level - 1);
      for (std::size_t p = 0; p < keep.pixels.size(); ++p)
        if (keep.pixels[p] && !outer.pixels[p]) return "level " + std::to_string(level) + " escapes its parent";
    }
    if (n && connected_components(keep, Connectivity::eight).count != 1) {
      return "level " + std::to_string(level) + " has more than one component";
    }
    if (fill_holes(keep) != keep) return "level " + std::to_string(level) + " has a hole";
    const BinaryImage bw = oracle::fill_holes(threshold_binary(working, level));
    const auto lab = connected_components(bw, Connectivity::eight);
    const BinaryImage lc = largest_component(lab);
    for (std::size_t s : lab.sizes)
      if (s > lc.count()) return "level " + std::to_string(level) + " kept a smaller component";
    if (lc.count() != n) return "level " + std::to_string(level) + " is not the retained component";
    for (std::size_t p = 0; p < bw.pixels.size(); ++p)
      if (bw.pixels[p] && !lc.pixels[p]) working.labels[p] = background;
  }
  if (filter_mask(out) != out) return "not idempotent";
  return {};
}

}  // namespace cases
