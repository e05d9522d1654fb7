#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "eyeseg/mask.hpp"
#include "eyeseg/nn.hpp"

namespace eyeseg {

// N3: both decoder streams and SE. N2: N3 without SE. N1: N3 without D2.
enum class Variant { N1, N2, N3 };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::N1: return "N1";
    case Variant::N2: return "N2";
    case Variant::N3: return "N3";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "N1" || s == "n1") return Variant::N1;
  if (s == "N2" || s == "n2") return Variant::N2;
  if (s == "N3" || s == "n3") return Variant::N3;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected N1, N2 or N3)");
}

// One row of the encoder table: a plain 3x3 conv or a group of `repeats`
// bottlenecks where only the first block applies `stride`.
struct EncoderStage {
  enum class Kind { conv, bottleneck };
  Kind kind;
  std::size_t expansion;
  std::size_t channels;
  std::size_t repeats;
  std::size_t stride;
};

inline std::vector<EncoderStage> default_encoder() {
  using K = EncoderStage::Kind;
  return {
      {K::conv, 0, 32, 1, 2},
      {K::bottleneck, 1, 16, 2, 1},
      {K::bottleneck, 6, 24, 3, 2},
      {K::bottleneck, 6, 32, 4, 2},
      // Listed with s=1 at 40x25, which only closes with stride 2.
      {K::conv, 0, 64, 1, 2},
  };
}

struct ModelConfig {
  Variant variant = Variant::N3;
  std::size_t in_channels = 1;
  std::size_t height = 640;
  std::size_t width = 400;
  std::vector<EncoderStage> encoder = default_encoder();
  std::size_t decoder_channels = 64;
  std::vector<std::size_t> d1_channels = {32, 16, 4};
  std::size_t se_reduction = 4;
  std::size_t num_classes = kNumClasses;
  std::size_t upsample = 4;
  Activation encoder_activation = Activation::relu6;
  Activation decoder_activation = Activation::relu;

  static ModelConfig for_variant(Variant v, std::size_t h = 640, std::size_t w = 400) {
    ModelConfig c;
    c.variant = v;
    c.height = h;
    c.width = w;
    return c;
  }

  bool has_d2() const { return variant != Variant::N1; }
  bool has_se() const { return variant != Variant::N2; }

  void validate() const {
    if (encoder.size() < 2 || encoder.front().kind != EncoderStage::Kind::conv ||
        encoder.back().kind != EncoderStage::Kind::conv) {
      throw std::invalid_argument("encoder must start and end with a conv stage");
    }
    for (const auto& s : encoder) {
      if (s.channels == 0 || s.repeats == 0 || s.stride == 0 ||
          (s.kind == EncoderStage::Kind::bottleneck && s.expansion == 0)) {
        throw std::invalid_argument("encoder stage sizes must be positive");
      }
    }
    if (encoder.back().channels != decoder_channels) {
      throw std::invalid_argument("last encoder stage must produce decoder_channels features");
    }
    if (d1_channels.empty() || d1_channels.back() != num_classes) {
      throw std::invalid_argument("decoder stream D1 must end at num_classes channels");
    }
    if (in_channels == 0 || height == 0 || width == 0 || upsample == 0 || se_reduction == 0) {
      throw std::invalid_argument("model sizes must be positive");
    }
  }
};

inline std::string conv_stage_name(std::size_t index, std::size_t stages) {
  if (index == 0) return "encoder.stem";
  if (index + 1 == stages) return "encoder.head";
  return "encoder.conv" + std::to_string(index);
}

// Every array the configuration instantiates, in build order.
inline ParamLayout model_layout(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout layout;
  std::size_t ch = cfg.in_channels;
  std::size_t group = 0;
  for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
    const auto& s = cfg.encoder[i];
    if (s.kind == EncoderStage::Kind::conv) {
      const std::string prefix = conv_stage_name(i, cfg.encoder.size());
      layout.push_back({prefix + ".conv.weight", {s.channels, ch, 3, 3}, ch * 9});
      BatchNorm::declare(layout, prefix + ".bn", s.channels);
    } else {
      ++group;
      for (std::size_t j = 0; j < s.repeats; ++j) {
        BottleneckBlock::Config bc{ch, s.channels, s.expansion, j == 0 ? s.stride : 1,
                                   cfg.encoder_activation};
        BottleneckBlock::declare(layout, "encoder.block" + std::to_string(group) + "." + std::to_string(j), bc);
        ch = s.channels;
      }
      continue;
    }
    ch = s.channels;
  }
  DSConvBlock::declare(layout, "decoder.shared",
                       {cfg.decoder_channels, cfg.decoder_channels, 1, cfg.decoder_activation, true});
  std::size_t d1_in = cfg.decoder_channels;
  for (std::size_t j = 0; j < cfg.d1_channels.size(); ++j) {
    const bool last = j + 1 == cfg.d1_channels.size();
    DSConvBlock::declare(layout, "decoder.d1." + std::to_string(j),
                         {d1_in, cfg.d1_channels[j], 1, cfg.decoder_activation, !last});
    d1_in = cfg.d1_channels[j];
  }
  if (cfg.has_se()) SEBlock::declare(layout, "decoder.d1.se", {cfg.num_classes, cfg.se_reduction});
  if (cfg.has_d2()) {
    layout.push_back({"decoder.d2.pw.weight", {cfg.num_classes, cfg.decoder_channels, 1, 1},
                      cfg.decoder_channels});
    BatchNorm::declare(layout, "decoder.d2.bn", cfg.num_classes);
  }
  return layout;
}

// He-initialized parameter store for cfg.
inline ParameterStore build(const ModelConfig& cfg, std::uint64_t seed) {
  return materialize(model_layout(cfg), seed);
}

inline std::size_t param_count(const ParameterStore& params) { return params.param_count(); }

// Checks that store holds exactly the arrays cfg declares; the message lists
// every offending tensor.
inline void validate_store(const ModelConfig& cfg, const ParameterStore& store) {
  const ParamLayout layout = model_layout(cfg);
  std::set<std::string> expected;
  std::string problems;
  for (const auto& d : layout) {
    expected.insert(d.name);
    if (!store.contains(d.name)) {
      problems += "\n  missing " + d.name + " " + to_string(d.shape);
    } else if (store.get(d.name).shape() != d.shape) {
      problems += "\n  " + d.name + ": file has " + to_string(store.get(d.name).shape()) +
                  ", model expects " + to_string(d.shape);
    }
  }
  for (const auto& e : store.entries()) {
    if (!expected.count(e.name)) problems += "\n  unexpected " + e.name;
  }
  if (!problems.empty()) {
    throw ShapeError("parameter store does not match " + to_string(cfg.variant) + " model:" + problems);
  }
}

// Variant implied by which decoder arrays a store carries.
inline Variant infer_variant(const ParameterStore& store) {
  const bool d2 = store.contains("decoder.d2.pw.weight");
  const bool se = store.contains("decoder.d1.se.fc1.weight");
  if (d2 && se) return Variant::N3;
  if (d2) return Variant::N2;
  if (se) return Variant::N1;
  throw ShapeError("store has neither decoder stream D2 nor SE; not an N1/N2/N3 model");
}

// Named activation shapes captured during a forward pass.
using ForwardTrace = std::vector<std::pair<std::string, Shape>>;

// The segmentation network bound to a parameter store.
class EyeNet {
 public:
  EyeNet(ModelConfig cfg, const ParameterStore& store) : cfg_(std::move(cfg)) {
    validate_store(cfg_, store);
    std::size_t ch = cfg_.in_channels;
    std::size_t group = 0;
    for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
      const auto& s = cfg_.encoder[i];
      Stage stage;
      if (s.kind == EncoderStage::Kind::conv) {
        stage.name = conv_stage_name(i, cfg_.encoder.size());
        stage.conv_weight = store.get(stage.name + ".conv.weight");
        stage.conv_bn = BatchNorm::bind(store, stage.name + ".bn", s.channels);
        stage.stride = s.stride;
      } else {
        ++group;
        stage.name = "encoder.block" + std::to_string(group);
        for (std::size_t j = 0; j < s.repeats; ++j) {
          BottleneckBlock::Config bc{ch, s.channels, s.expansion, j == 0 ? s.stride : 1,
                                     cfg_.encoder_activation};
          stage.blocks.push_back(BottleneckBlock::bind(store, stage.name + "." + std::to_string(j), bc));
          ch = s.channels;
        }
      }
      ch = s.channels;
      encoder_.push_back(std::move(stage));
    }
    shared_ = DSConvBlock::bind(store, "decoder.shared",
                                {cfg_.decoder_channels, cfg_.decoder_channels, 1, cfg_.decoder_activation, true});
    std::size_t d1_in = cfg_.decoder_channels;
    for (std::size_t j = 0; j < cfg_.d1_channels.size(); ++j) {
      const bool last = j + 1 == cfg_.d1_channels.size();
      d1_.push_back(DSConvBlock::bind(store, "decoder.d1." + std::to_string(j),
                                      {d1_in, cfg_.d1_channels[j], 1, cfg_.decoder_activation, !last}));
      d1_in = cfg_.d1_channels[j];
    }
    if (cfg_.has_se()) se_ = SEBlock::bind(store, "decoder.d1.se", {cfg_.num_classes, cfg_.se_reduction});
    if (cfg_.has_d2()) {
      d2_weight_ = store.get("decoder.d2.pw.weight");
      d2_bn_ = BatchNorm::bind(store, "decoder.d2.bn", cfg_.num_classes);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // x: [B, in_channels, H, W] -> logits [B, num_classes, H, W].
  Tensor forward(const Tensor& x, BnMode mode, ForwardTrace* trace = nullptr,
                 BatchNormOptions bn = {}) const {
    if (x.ndim() != 4 || x.dim(1) != cfg_.in_channels) {
      throw ShapeError("eyenet: expected input [B," + std::to_string(cfg_.in_channels) +
                       ",H,W], got " + to_string(x.shape()));
    }
    if (x.dim(2) < 16 || x.dim(3) < 16) {
      throw ShapeError("eyenet: spatial size must be at least 16x16, got " + to_string(x.shape()));
    }
    require_finite(x, "eyenet input");
    auto record = [&](const std::string& name, const Tensor& t) {
      if (!all_finite(t.data())) throw NonFiniteError("non-finite activation after " + name);
      if (trace) trace->emplace_back(name, t.shape());
    };
    Tensor h = x;
    for (const auto& stage : encoder_) {
      if (stage.blocks.empty()) {
        h = conv2d(h, stage.conv_weight, stage.stride, 1);
        h = activate(stage.conv_bn(h, mode, bn), cfg_.encoder_activation);
      } else {
        for (std::size_t j = 0; j < stage.blocks.size(); ++j) {
          h = bottleneck_forward(stage.blocks[j], h, mode, bn);
        }
      }
      record(stage.name, h);
    }
    h = ds_conv_forward(shared_, h, mode, bn);
    record("decoder.shared", h);
    h = bilinear_upsample(h, cfg_.upsample);
    record("decoder.upsample", h);

    Tensor d1 = h;
    for (std::size_t j = 0; j < d1_.size(); ++j) d1 = ds_conv_forward(d1_[j], d1, mode, bn);
    if (se_) d1 = se_forward(*se_, d1);
    record("decoder.d1", d1);
    const std::size_t out_h = x.dim(2), out_w = x.dim(3);
    Tensor logits = bilinear_resize(d1, out_h, out_w);
    if (d2_weight_.defined()) {
      Tensor d2 = d2_bn_(pointwise_conv2d(h, d2_weight_), mode, bn);
      record("decoder.d2", d2);
      logits = add(logits, bilinear_resize(d2, out_h, out_w));
    }
    record("logits", logits);
    return logits;
  }

 private:
  struct Stage {
    std::string name;
    Tensor conv_weight;
    BatchNorm conv_bn;
    std::size_t stride = 1;
    std::vector<BottleneckBlock> blocks;
  };

  ModelConfig cfg_;
  std::vector<Stage> encoder_;
  DSConvBlock shared_;
  std::vector<DSConvBlock> d1_;
  std::optional<SEBlock> se_;
  Tensor d2_weight_;
  BatchNorm d2_bn_;
};

inline Tensor forward(const ModelConfig& cfg, const ParameterStore& params, const Tensor& x, BnMode mode,
                      ForwardTrace* trace = nullptr) {
  return EyeNet(cfg, params).forward(x, mode, trace);
}

// Per-pixel argmax over classes; ties go to the lower class index.
inline std::vector<Mask> predict_masks(const Tensor& logits) {
  if (logits.ndim() != 4) throw ShapeError("predict_mask: logits must be [B,C,H,W]");
  const std::size_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (C > kNumClasses) throw ShapeError("predict_mask: at most 4 classes supported");
  std::vector<Mask> out;
  out.reserve(B);
  const auto v = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    Mask m(H, W);
    for (std::size_t i = 0; i < H * W; ++i) {
      std::size_t best = 0;
      double best_v = v[b * C * H * W + i];
      for (std::size_t c = 1; c < C; ++c) {
        const double val = v[(b * C + c) * H * W + i];
        if (val > best_v) {
          best_v = val;
          best = c;
        }
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline Mask predict_mask(const Tensor& logits) {
  if (logits.ndim() != 4 || logits.dim(0) != 1) throw ShapeError("predict_mask: expected batch of one");
  return predict_masks(logits).front();
}

}  // namespace eyeseg
