#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eyeseg/mask.hpp"

namespace eyeseg {

// How a class with an empty union contributes to a per-image mean.
enum class AbsentClassPolicy { exclude, count_as_one };

// |P ∩ G| / |P ∪ G| for one class; nullopt when both are empty.
inline std::optional<double> iou(const Mask& pred, const Mask& gt, std::uint8_t class_id) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("iou: mask sizes differ (" + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width) + ")");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == class_id, g = gt.labels[i] == class_id;
    inter += (p && g);
    uni += (p || g);
  }
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct ImageScore {
  std::string id;
  std::array<std::optional<double>, kNumClasses> class_iou;
  double mean = 0.0;
};

inline ImageScore score_image(const Mask& pred, const Mask& gt, std::string id = {},
                              AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
  ImageScore s{std::move(id), {}, 0.0};
  double total = 0.0;
  std::size_t n = 0;
  for (std::uint8_t c = 0; c < kNumClasses; ++c) {
    s.class_iou[c] = iou(pred, gt, c);
    if (s.class_iou[c]) {
      total += *s.class_iou[c];
      ++n;
    } else if (policy == AbsentClassPolicy::count_as_one) {
      total += 1.0;
      ++n;
    }
  }
  s.mean = n ? total / static_cast<double>(n) : 1.0;
  return s;
}

// Mean over images of the per-image class-mean IoU.
inline double miou(const std::vector<Mask>& preds, const std::vector<Mask>& gts,
                   AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
  if (preds.size() != gts.size()) throw ShapeError("miou: prediction and ground-truth counts differ");
  if (preds.empty()) throw std::invalid_argument("miou: no images");
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) total += score_image(preds[i], gts[i], {}, policy).mean;
  return total / static_cast<double>(preds.size());
}

// Model size in MiB at 4 bytes per parameter.
inline double size_score(std::size_t param_count) {
  return static_cast<double>(param_count) * 4.0 / (1024.0 * 1024.0);
}

struct OverallScore {
  double raw;         // in [0, 100]
  double normalized;  // raw / 100
};

inline OverallScore overall_score(double miou_value, double size_mb) {
  const double size_term = size_mb > 0.0 ? std::min(1.0, 1.0 / size_mb) : 1.0;
  const double raw = 50.0 * (miou_value + size_term);
  return {raw, raw / 100.0};
}

inline double round_to(double v, int decimals) {
  const double f = std::pow(10.0, decimals);
  return std::round(v * f) / f;
}

struct EvalReport {
  std::vector<ImageScore> per_image;
  double miou = 0.0;
  std::size_t param_count = 0;
  double size_mb = 0.0;
  double overall = 0.0;
  double overall_normalized = 0.0;
};

inline EvalReport evaluate(const std::vector<Mask>& preds, const std::vector<Mask>& gts,
                           const std::vector<std::string>& ids, std::size_t param_count,
                           AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
  if (preds.size() != gts.size() || ids.size() != preds.size()) {
    throw ShapeError("evaluate: prediction, ground-truth and id counts differ");
  }
  if (preds.empty()) throw std::invalid_argument("evaluate: no images");
  EvalReport r;
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.per_image.push_back(score_image(preds[i], gts[i], ids[i], policy));
    total += r.per_image.back().mean;
  }
  r.miou = total / static_cast<double>(preds.size());
  r.param_count = param_count;
  r.size_mb = size_score(param_count);
  const auto m = overall_score(r.miou, r.size_mb);
  r.overall = m.raw;
  r.overall_normalized = m.normalized;
  return r;
}

// {"images": [{"id", "iou": [bg, sclera, iris, pupil] (null = absent), "mean"}],
//  "aggregate": {"miou", "T", "S", "M", "M_normalized"}}
inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : r.per_image) {
    nlohmann::json ious = nlohmann::json::array();
    for (const auto& v : s.class_iou) ious.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    images.push_back({{"id", s.id}, {"iou", ious}, {"mean", s.mean}});
  }
  return {{"images", images},
          {"aggregate",
           {{"miou", r.miou},
            {"T", r.param_count},
            {"S", r.size_mb},
            {"M", r.overall},
            {"M_normalized", r.overall_normalized}}}};
}

}  // namespace eyeseg
