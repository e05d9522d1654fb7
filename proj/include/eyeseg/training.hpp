#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eyeseg/dataset.hpp"
#include "eyeseg/model.hpp"

namespace eyeseg {

// ---------------------------------------------------------------------------
// Generalized dice loss
//
//   w_l  = 1 / (sum_n r_ln + eps_w)^2
//   loss = 1 - (2 sum_l w_l sum_n r_ln p_ln + eps) / (sum_l w_l sum_n (r_ln + p_ln) + eps)
//
// with sums over every pixel of the batch. eps_w keeps absent classes finite.

struct DiceOptions {
  double weight_epsilon = 1e-6;
  double smooth = 1e-6;
  double normalization_tolerance = 1e-3;
};

inline Tensor generalized_dice_loss(const Tensor& probs, const std::vector<Mask>& targets,
                                    DiceOptions opt = {}) {
  detail::expect_ndim(probs, 4, "generalized_dice_loss", "probs");
  const std::size_t B = probs.dim(0), C = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
  if (targets.size() != B) throw ShapeError("generalized_dice_loss: batch has " + std::to_string(B) +
                                            " images but " + std::to_string(targets.size()) + " masks");
  for (const auto& m : targets) {
    if (m.height != probs.dim(2) || m.width != probs.dim(3)) {
      throw ShapeError("generalized_dice_loss: mask size does not match probabilities");
    }
    for (auto l : m.labels)
      if (l >= C) throw ShapeError("generalized_dice_loss: label exceeds class count");
  }
  const auto p = probs.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += p[(b * C + c) * HW + i];
      if (std::abs(s - 1.0) > opt.normalization_tolerance) {
        throw std::invalid_argument("generalized_dice_loss: probabilities at pixel " + std::to_string(i) +
                                    " of image " + std::to_string(b) + " sum to " + std::to_string(s));
      }
    }
  std::vector<double> volume(C, 0.0), inter(C, 0.0), prob_sum(C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* pc = p.data() + (b * C + c) * HW;
      const auto& labels = targets[b].labels;
      for (std::size_t i = 0; i < HW; ++i) {
        prob_sum[c] += pc[i];
        if (labels[i] == c) {
          volume[c] += 1.0;
          inter[c] += pc[i];
        }
      }
    }
  std::vector<double> w(C);
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    w[c] = 1.0 / ((volume[c] + opt.weight_epsilon) * (volume[c] + opt.weight_epsilon));
    num += w[c] * inter[c];
    den += w[c] * (volume[c] + prob_sum[c]);
  }
  const double top = 2.0 * num + opt.smooth, bottom = den + opt.smooth;
  const double loss = 1.0 - top / bottom;
  return detail::make_result({1}, {loss}, "generalized_dice_loss", {probs},
                             [B, C, HW, w, top, bottom, targets](detail::Node& self) {
                               double* g = detail::input_grad(self, 0);
                               if (!g) return;
                               const double d = self.grad[0];
                               const double inv = 1.0 / (bottom * bottom);
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const auto& labels = targets[b].labels;
                                   double* gc = g + (b * C + c) * HW;
                                   for (std::size_t i = 0; i < HW; ++i) {
                                     const double r = labels[i] == c ? 1.0 : 0.0;
                                     gc[i] += -d * w[c] * (2.0 * r * bottom - top) * inv;
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Adam with coupled L2 decay (decay skipped for batch-norm affine arrays).

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

inline void adam_step(ParameterStore& params, AdamState& state, double lr, double weight_decay,
                      AdamOptions opt = {}) {
  const auto& entries = params.entries();
  if (state.m.empty()) {
    state.m.resize(entries.size());
    state.v.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!is_learnable(entries[i].kind)) continue;
      state.m[i].assign(entries[i].tensor.size(), 0.0);
      state.v[i].assign(entries[i].tensor.size(), 0.0);
    }
  }
  if (state.m.size() != entries.size()) {
    throw ShapeError("adam_step: optimizer state has " + std::to_string(state.m.size()) +
                     " slots for " + std::to_string(entries.size()) + " parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!is_learnable(e.kind)) continue;
    Tensor t = e.tensor;
    auto value = t.data();
    const auto grad = t.grad();
    if (!grad.empty() && grad.size() != value.size()) {
      throw ShapeError("adam_step: gradient of " + e.name + " has wrong size");
    }
    if (state.m[i].size() != value.size()) {
      throw ShapeError("adam_step: optimizer state for " + e.name + " has wrong size");
    }
    const double decay = e.kind == ParamKind::weight ? weight_decay : 0.0;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double g = (grad.empty() ? 0.0 : grad[k]) + decay * value[k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g * g;
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      value[k] -= lr * mhat / (std::sqrt(vhat) + opt.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr_initial = 1e-3;
  double lr_final = 5e-4;
  std::size_t lr_decay_start_epoch = 28;
  std::size_t lr_constant_from_epoch = 47;
  double weight_decay = 1e-4;
  std::size_t swa_start_epoch = 51;
  double brightness_min = 0.5;
  double brightness_max = 2.0;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("epochs and batch_size must be positive");
    if (lr_final > lr_initial) throw std::invalid_argument("lr_final must not exceed lr_initial");
    if (swa_start_epoch > epochs) throw std::invalid_argument("swa_start_epoch must not exceed epochs");
    if (lr_constant_from_epoch < lr_decay_start_epoch) {
      throw std::invalid_argument("lr_constant_from_epoch must not precede lr_decay_start_epoch");
    }
    if (!(brightness_min > 0.0) || brightness_max < brightness_min) {
      throw std::invalid_argument("brightness range must be positive and ordered");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr_initial", c.lr_initial},
       {"lr_final", c.lr_final},
       {"lr_decay_start_epoch", c.lr_decay_start_epoch},
       {"lr_constant_from_epoch", c.lr_constant_from_epoch},
       {"weight_decay", c.weight_decay},
       {"swa_start_epoch", c.swa_start_epoch},
       {"brightness_range", {c.brightness_min, c.brightness_max}},
       {"augment", c.augment},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_initial = j.value("lr_initial", c.lr_initial);
  c.lr_final = j.value("lr_final", c.lr_final);
  c.lr_decay_start_epoch = j.value("lr_decay_start_epoch", c.lr_decay_start_epoch);
  c.lr_constant_from_epoch = j.value("lr_constant_from_epoch", c.lr_constant_from_epoch);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.swa_start_epoch = j.value("swa_start_epoch", c.swa_start_epoch);
  if (j.contains("brightness_range")) {
    c.brightness_min = j["brightness_range"].at(0).get<double>();
    c.brightness_max = j["brightness_range"].at(1).get<double>();
  }
  c.augment = j.value("augment", c.augment);
  c.seed = j.value("seed", c.seed);
}

// Constant lr_initial up to the decay start, a linear ramp that reaches
// lr_final at lr_constant_from_epoch, then constant. Epochs are 1-based.
inline double lr_schedule(std::size_t epoch, const TrainConfig& c = {}) {
  if (epoch <= c.lr_decay_start_epoch) return c.lr_initial;
  if (epoch >= c.lr_constant_from_epoch) return c.lr_final;
  const double t = static_cast<double>(epoch - c.lr_decay_start_epoch) /
                   static_cast<double>(c.lr_constant_from_epoch - c.lr_decay_start_epoch);
  return c.lr_initial - t * (c.lr_initial - c.lr_final);
}

// ---------------------------------------------------------------------------
// Stochastic weight averaging over end-of-epoch snapshots.

struct SwaState {
  std::vector<std::vector<double>> mean;  // per store entry; empty for statistics
  std::size_t count = 0;
};

inline void swa_update(SwaState& state, const ParameterStore& params, std::size_t epoch,
                       std::size_t swa_start_epoch) {
  if (epoch < swa_start_epoch) return;
  const auto& entries = params.entries();
  if (state.count == 0) {
    state.mean.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (is_learnable(entries[i].kind)) state.mean[i].assign(entries[i].tensor.size(), 0.0);
    }
  }
  if (state.mean.size() != entries.size()) throw ShapeError("swa_update: parameter layout changed");
  ++state.count;
  const double k = static_cast<double>(state.count);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& mean = state.mean[i];
    const auto w = entries[i].tensor.data();
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += (w[j] - mean[j]) / k;
  }
}

inline Tensor make_batch(const std::vector<const GrayImage*>& images) {
  if (images.empty()) throw std::invalid_argument("make_batch: empty batch");
  const std::size_t H = images.front()->height, W = images.front()->width;
  std::vector<double> v;
  v.reserve(images.size() * H * W);
  for (const auto* img : images) {
    if (img->height != H || img->width != W) throw ShapeError("make_batch: images differ in size");
    v.insert(v.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor::from({images.size(), 1, H, W}, std::move(v));
}

// Re-estimates every batch-norm running statistic as the cumulative average
// of train-mode batch statistics over images (no weight updates).
inline void recalibrate_batch_norm(const ModelConfig& cfg, ParameterStore& params,
                                   const std::vector<Sample>& data, std::size_t batch_size) {
  for (const auto& e : params.entries()) {
    if (e.kind != ParamKind::statistic) continue;
    Tensor t = e.tensor;
    const bool is_var = e.name.size() >= 4 && e.name.substr(e.name.size() - 4) == ".var";
    std::fill(t.data().begin(), t.data().end(), is_var ? 1.0 : 0.0);
  }
  NoGradGuard no_grad;
  const EyeNet net(cfg, params);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<const GrayImage*> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) batch.push_back(&data[i].image);
    net.forward(make_batch(batch), BnMode::train, nullptr, {std::nullopt, 1e-5});
  }
}

// SWA weights installed into a copy of params, batch norm recalibrated on data.
inline ParameterStore swa_finalize(const SwaState& state, const ParameterStore& params, const ModelConfig& cfg,
                                   const std::vector<Sample>& data, std::size_t batch_size) {
  ParameterStore out = params.clone();
  if (state.count == 0) return out;
  const auto& entries = out.entries();
  if (state.mean.size() != entries.size()) throw ShapeError("swa_finalize: parameter layout changed");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (state.mean[i].empty()) continue;
    Tensor t = entries[i].tensor;
    std::copy(state.mean[i].begin(), state.mean[i].end(), t.data().begin());
  }
  if (!data.empty()) recalibrate_batch_norm(cfg, out, data, batch_size);
  return out;
}

// ---------------------------------------------------------------------------

// Multiplies every pixel by factor and clamps to [0,1].
inline GrayImage augment_brightness(const GrayImage& img, double factor) {
  GrayImage out = img;
  for (auto& v : out.pixels) v = std::clamp(v * factor, 0.0, 1.0);
  return out;
}

inline double draw_brightness_factor(std::mt19937_64& rng, double lo = 0.5, double hi = 2.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline GrayImage augment_brightness(const GrayImage& img, std::mt19937_64& rng, double lo = 0.5,
                                    double hi = 2.0) {
  return augment_brightness(img, draw_brightness_factor(rng, lo, hi));
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool swa_active = false;
  double wall_ms = 0.0;

  // Everything except timing; used for reproducibility comparisons.
  bool same_outcome(const EpochRecord& o) const {
    return epoch == o.epoch && lr == o.lr && train_loss == o.train_loss && val_loss == o.val_loss &&
           swa_active == o.swa_active;
  }
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},           {"lr", r.lr},
          {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
          {"swa_active", r.swa_active}, {"wall_ms", r.wall_ms}};
}

struct TrainResult {
  ParameterStore final_params;
  ParameterStore best_params;
  ParameterStore swa_params;
  std::vector<EpochRecord> history;
  double best_val_loss = INFINITY;
  std::size_t best_epoch = 0;
  AdamState optimizer;
  SwaState swa;
};

struct TrainingDiverged : NonFiniteError {
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& what)
      : NonFiniteError(what + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch)),
        epoch(epoch),
        batch(batch) {}
  std::size_t epoch;
  std::size_t batch;
};

inline std::vector<Mask> masks_of(const std::vector<const Sample*>& samples) {
  std::vector<Mask> out;
  for (const auto* s : samples) out.push_back(s->mask);
  return out;
}

// Eval-mode loss over a split, batched, without augmentation. Single-batch
// splits give the exact dataset loss; otherwise the mean of batch losses.
inline double evaluate_loss(const EyeNet& net, const std::vector<Sample>& data, std::size_t batch_size,
                            BnMode mode = BnMode::eval) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<const Sample*> chunk;
    std::vector<const GrayImage*> imgs;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) {
      chunk.push_back(&data[i]);
      imgs.push_back(&data[i].image);
    }
    const Tensor probs = softmax_channels(net.forward(make_batch(imgs), mode));
    total += generalized_dice_loss(probs, masks_of(chunk)).item();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const Dataset& data,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train: train and val splits must be non-empty");
  TrainResult result;
  ParameterStore params = build(model_cfg, cfg.seed);
  const EyeNet net(model_cfg, params);
  std::vector<std::size_t> order(data.train.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq shuffle_seed{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(epoch), 1u};
    std::mt19937_64 shuffle_rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<GrayImage> augmented;
      std::vector<const Sample*> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const Sample& s = data.train[order[i]];
        chunk.push_back(&s);
        if (cfg.augment) {
          std::seed_seq aug_seed{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(epoch),
                                 static_cast<std::uint32_t>(order[i]), 2u};
          std::mt19937_64 rng(aug_seed);
          augmented.push_back(augment_brightness(s.image, rng, cfg.brightness_min, cfg.brightness_max));
        } else {
          augmented.push_back(s.image);
        }
      }
      std::vector<const GrayImage*> imgs;
      for (const auto& g : augmented) imgs.push_back(&g);
      Tensor loss;
      try {
        loss = generalized_dice_loss(softmax_channels(net.forward(make_batch(imgs), BnMode::train)),
                                     masks_of(chunk));
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(epoch, batches + 1, e.what());
      }
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingDiverged(epoch, batches + 1, "non-finite loss " + std::to_string(value));
      params.zero_grad();
      backward(loss);
      adam_step(params, result.optimizer, lr, cfg.weight_decay);
      loss_sum += value;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    try {
      rec.val_loss = evaluate_loss(net, data.val, cfg.batch_size);
    } catch (const NonFiniteError& e) {
      throw TrainingDiverged(epoch, 0, std::string("validation: ") + e.what());
    }
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingDiverged(epoch, 0, "non-finite validation loss " + std::to_string(rec.val_loss));
    }
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.best_params = params.clone();
    }
    swa_update(result.swa, params, epoch, cfg.swa_start_epoch);
    rec.swa_active = epoch >= cfg.swa_start_epoch;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.final_params = params.clone();
  result.swa_params = swa_finalize(result.swa, params, model_cfg, data.train, cfg.batch_size);
  return result;
}

}  // namespace eyeseg
