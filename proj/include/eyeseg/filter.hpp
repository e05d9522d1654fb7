#pragma once

#include <cstdint>
#include <vector>

#include "eyeseg/mask.hpp"

namespace eyeseg {

struct BinaryImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1

  BinaryImage() = default;
  BinaryImage(std::size_t h, std::size_t w, bool fill = false)
      : height(h), width(w), pixels(h * w, fill ? 1 : 0) {}

  bool at(std::size_t r, std::size_t c) const { return pixels[r * width + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v = true) { pixels[r * width + c] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto p : pixels) n += p;
    return n;
  }
  bool empty() const { return count() == 0; }

  friend bool operator==(const BinaryImage&, const BinaryImage&) = default;
};

enum class Connectivity { four = 4, eight = 8 };

// Ids are dense in 1..count, assigned in row-major order of each component's
// first pixel; 0 marks background.
struct CCLabeling {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> ids;
  std::size_t count = 0;
  std::vector<std::size_t> sizes;  // sizes[id - 1]
};

inline BinaryImage threshold_binary(const Mask& mask, std::uint8_t level) {
  BinaryImage out(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) out.pixels[i] = mask.labels[i] >= level ? 1 : 0;
  return out;
}

namespace detail {

// Breadth-first flood from seed over pixels where pixels[i] == value and
// ids[i] == 0, writing id; returns the number of pixels reached.
inline std::size_t flood(const BinaryImage& img, std::vector<std::uint32_t>& ids, std::size_t seed,
                         std::uint8_t value, std::uint32_t id, Connectivity conn,
                         std::vector<std::size_t>& queue) {
  const long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  queue.clear();
  queue.push_back(seed);
  ids[seed] = id;
  std::size_t head = 0;
  while (head < queue.size()) {
    const std::size_t p = queue[head++];
    const long r = static_cast<long>(p) / W, c = static_cast<long>(p) % W;
    for (long dr = -1; dr <= 1; ++dr) {
      for (long dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        if (conn == Connectivity::four && dr != 0 && dc != 0) continue;
        const long nr = r + dr, nc = c + dc;
        if (nr < 0 || nc < 0 || nr >= H || nc >= W) continue;
        const std::size_t q = static_cast<std::size_t>(nr * W + nc);
        if (ids[q] == 0 && img.pixels[q] == value) {
          ids[q] = id;
          queue.push_back(q);
        }
      }
    }
  }
  return queue.size();
}

}  // namespace detail

// Background pixels that cannot reach the border through 4-connected
// background become foreground.
inline BinaryImage fill_holes(const BinaryImage& bw) {
  const std::size_t H = bw.height, W = bw.width;
  std::vector<std::uint32_t> reached(H * W, 0);
  std::vector<std::size_t> queue;
  auto seed = [&](std::size_t r, std::size_t c) {
    const std::size_t p = r * W + c;
    if (!bw.pixels[p] && !reached[p]) detail::flood(bw, reached, p, 0, 1, Connectivity::four, queue);
  };
  for (std::size_t c = 0; c < W; ++c) {
    seed(0, c);
    seed(H - 1, c);
  }
  for (std::size_t r = 0; r < H; ++r) {
    seed(r, 0);
    seed(r, W - 1);
  }
  BinaryImage out = bw;
  for (std::size_t p = 0; p < H * W; ++p) {
    if (!bw.pixels[p] && !reached[p]) out.pixels[p] = 1;
  }
  return out;
}

inline CCLabeling connected_components(const BinaryImage& bw, Connectivity conn = Connectivity::eight) {
  CCLabeling lab{bw.height, bw.width, std::vector<std::uint32_t>(bw.pixels.size(), 0), 0, {}};
  std::vector<std::size_t> queue;
  for (std::size_t p = 0; p < bw.pixels.size(); ++p) {
    if (bw.pixels[p] && lab.ids[p] == 0) {
      const auto id = static_cast<std::uint32_t>(++lab.count);
      lab.sizes.push_back(detail::flood(bw, lab.ids, p, 1, id, conn, queue));
    }
  }
  return lab;
}

// Pixels of the most populous component; ties go to the lowest id.
inline BinaryImage largest_component(const CCLabeling& lab) {
  BinaryImage out(lab.height, lab.width);
  if (lab.count == 0) return out;
  std::size_t best = 0;
  for (std::size_t i = 1; i < lab.sizes.size(); ++i) {
    if (lab.sizes[i] > lab.sizes[best]) best = i;
  }
  const auto id = static_cast<std::uint32_t>(best + 1);
  for (std::size_t p = 0; p < lab.ids.size(); ++p) out.pixels[p] = lab.ids[p] == id ? 1 : 0;
  return out;
}

// Keeps, per class level i = 1..3, the largest hole-free 8-connected region
// of {label >= i}; everything else at that level is cleared before the next.
inline Mask filter_mask(const Mask& predicted) {
  predicted.validate();
  Mask mp = predicted;
  Mask mf(mp.height, mp.width);
  for (std::uint8_t level = sclera; level <= pupil; ++level) {
    BinaryImage bw = fill_holes(threshold_binary(mp, level));
    if (bw.empty()) continue;
    const BinaryImage keep = largest_component(connected_components(bw, Connectivity::eight));
    for (std::size_t p = 0; p < bw.pixels.size(); ++p) {
      if (keep.pixels[p]) {
        mf.labels[p] = level;
      } else if (bw.pixels[p]) {
        mp.labels[p] = background;
      }
    }
  }
  return mf;
}

}  // namespace eyeseg
