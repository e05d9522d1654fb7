#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "eyeseg/ops.hpp"
#include "eyeseg/parameters.hpp"

namespace eyeseg {

enum class Activation { none, relu, relu6 };

inline Tensor activate(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::relu6: return relu6(x);
    case Activation::none: break;
  }
  return x;
}

// One learnable or statistic array a layer asks for. fan_in > 0 marks a
// He-initialized weight; everything else follows the batch-norm defaults.
struct ParamDecl {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
};

using ParamLayout = std::vector<ParamDecl>;

inline std::vector<double> default_init(const ParamDecl& d, std::mt19937_64& rng) {
  if (d.fan_in > 0) return he_init(d.shape, d.fan_in, rng);
  const std::size_t n = numel(d.shape);
  const std::string_view name = d.name;
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
  };
  if (ends_with(".stat.var") || (kind_from_name(name) == ParamKind::norm_affine && ends_with(".weight"))) {
    return std::vector<double>(n, 1.0);
  }
  return std::vector<double>(n, 0.0);
}

// Allocates every declared array in declaration order from one seeded stream.
inline ParameterStore materialize(const ParamLayout& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore store;
  for (const auto& d : layout) store.add(d.name, Tensor::from(d.shape, default_init(d, rng)));
  return store;
}

inline Tensor bind_checked(const ParameterStore& store, const std::string& name, const Shape& shape) {
  const Tensor& t = store.get(name);
  if (t.shape() != shape) {
    throw ShapeError("parameter " + name + " has shape " + to_string(t.shape()) + ", expected " +
                     to_string(shape));
  }
  return t;
}

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;

  static void declare(ParamLayout& layout, const std::string& prefix, std::size_t channels) {
    layout.push_back({prefix + ".weight", {channels}});
    layout.push_back({prefix + ".bias", {channels}});
    layout.push_back({prefix + ".stat.mean", {channels}});
    layout.push_back({prefix + ".stat.var", {channels}});
    layout.push_back({prefix + ".stat.count", {1}});
  }

  static BatchNorm bind(const ParameterStore& store, const std::string& prefix, std::size_t channels) {
    return {bind_checked(store, prefix + ".weight", {channels}),
            bind_checked(store, prefix + ".bias", {channels}),
            {bind_checked(store, prefix + ".stat.mean", {channels}),
             bind_checked(store, prefix + ".stat.var", {channels}),
             bind_checked(store, prefix + ".stat.count", {1})}};
  }

  static constexpr std::size_t parameter_count(std::size_t channels) { return 2 * channels; }

  Tensor operator()(const Tensor& x, BnMode mode, BatchNormOptions opt = {}) const {
    return batch_norm(x, gamma, beta, stats, mode, opt);
  }
};

// Depthwise 3x3 -> BN -> act -> pointwise -> BN [-> act].
struct DSConvBlock {
  struct Config {
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t stride = 1;
    Activation activation = Activation::relu;
    bool final_activation = true;
  };

  Config config;
  Tensor dw_weight;
  BatchNorm dw_bn;
  Tensor pw_weight;
  BatchNorm pw_bn;

  static void declare(ParamLayout& layout, const std::string& prefix, const Config& c) {
    layout.push_back({prefix + ".dw.weight", {c.in_channels, 1, 3, 3}, 9});
    BatchNorm::declare(layout, prefix + ".dw_bn", c.in_channels);
    layout.push_back({prefix + ".pw.weight", {c.out_channels, c.in_channels, 1, 1}, c.in_channels});
    BatchNorm::declare(layout, prefix + ".pw_bn", c.out_channels);
  }

  static DSConvBlock bind(const ParameterStore& store, const std::string& prefix, const Config& c) {
    return {c,
            bind_checked(store, prefix + ".dw.weight", {c.in_channels, 1, 3, 3}),
            BatchNorm::bind(store, prefix + ".dw_bn", c.in_channels),
            bind_checked(store, prefix + ".pw.weight", {c.out_channels, c.in_channels, 1, 1}),
            BatchNorm::bind(store, prefix + ".pw_bn", c.out_channels)};
  }

  static constexpr std::size_t parameter_count(std::size_t cin, std::size_t cout) {
    return 9 * cin + 2 * cin + cin * cout + 2 * cout;
  }
};

inline Tensor ds_conv_forward(const DSConvBlock& block, const Tensor& x, BnMode mode,
                              BatchNormOptions bn = {}) {
  if (x.ndim() != 4 || x.dim(1) != block.config.in_channels) {
    throw ShapeError("ds_conv: expected " + std::to_string(block.config.in_channels) +
                     " input channels, got " + to_string(x.shape()));
  }
  Tensor h = depthwise_conv2d(x, block.dw_weight, block.config.stride, 1);
  h = activate(block.dw_bn(h, mode, bn), block.config.activation);
  h = block.pw_bn(pointwise_conv2d(h, block.pw_weight), mode, bn);
  return block.config.final_activation ? activate(h, block.config.activation) : h;
}

// Inverted residual: [expand 1x1 -> BN -> act] -> dw 3x3 -> BN -> act ->
// linear 1x1 projection -> BN, plus identity shortcut when shapes allow.
struct BottleneckBlock {
  struct Config {
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t expansion = 1;
    std::size_t stride = 1;
    Activation activation = Activation::relu6;

    std::size_t hidden() const { return in_channels * expansion; }
    bool has_expansion() const { return expansion != 1; }
    bool residual() const { return stride == 1 && in_channels == out_channels; }
  };

  Config config;
  Tensor expand_weight;  // undefined when expansion == 1
  BatchNorm expand_bn;
  Tensor dw_weight;
  BatchNorm dw_bn;
  Tensor project_weight;
  BatchNorm project_bn;

  static void declare(ParamLayout& layout, const std::string& prefix, const Config& c) {
    const std::size_t hid = c.hidden();
    if (c.has_expansion()) {
      layout.push_back({prefix + ".expand.weight", {hid, c.in_channels, 1, 1}, c.in_channels});
      BatchNorm::declare(layout, prefix + ".expand_bn", hid);
    }
    layout.push_back({prefix + ".dw.weight", {hid, 1, 3, 3}, 9});
    BatchNorm::declare(layout, prefix + ".dw_bn", hid);
    layout.push_back({prefix + ".project.weight", {c.out_channels, hid, 1, 1}, hid});
    BatchNorm::declare(layout, prefix + ".project_bn", c.out_channels);
  }

  static BottleneckBlock bind(const ParameterStore& store, const std::string& prefix, const Config& c) {
    const std::size_t hid = c.hidden();
    BottleneckBlock b{c, {}, {}, {}, {}, {}, {}};
    if (c.has_expansion()) {
      b.expand_weight = bind_checked(store, prefix + ".expand.weight", {hid, c.in_channels, 1, 1});
      b.expand_bn = BatchNorm::bind(store, prefix + ".expand_bn", hid);
    }
    b.dw_weight = bind_checked(store, prefix + ".dw.weight", {hid, 1, 3, 3});
    b.dw_bn = BatchNorm::bind(store, prefix + ".dw_bn", hid);
    b.project_weight = bind_checked(store, prefix + ".project.weight", {c.out_channels, hid, 1, 1});
    b.project_bn = BatchNorm::bind(store, prefix + ".project_bn", c.out_channels);
    return b;
  }

  static constexpr std::size_t parameter_count(std::size_t cin, std::size_t cout, std::size_t t) {
    const std::size_t hid = cin * t;
    const std::size_t expand = t == 1 ? 0 : cin * hid + 2 * hid;
    return expand + 9 * hid + 2 * hid + hid * cout + 2 * cout;
  }
};

inline Tensor bottleneck_forward(const BottleneckBlock& block, const Tensor& x, BnMode mode,
                                 BatchNormOptions bn = {}) {
  const auto& c = block.config;
  if (x.ndim() != 4 || x.dim(1) != c.in_channels) {
    throw ShapeError("bottleneck: expected " + std::to_string(c.in_channels) +
                     " input channels, got " + to_string(x.shape()));
  }
  Tensor h = x;
  if (c.has_expansion()) {
    h = activate(block.expand_bn(pointwise_conv2d(h, block.expand_weight), mode, bn), c.activation);
  }
  h = activate(block.dw_bn(depthwise_conv2d(h, block.dw_weight, c.stride, 1), mode, bn), c.activation);
  h = block.project_bn(pointwise_conv2d(h, block.project_weight), mode, bn);
  return c.residual() ? add(h, x) : h;
}

// Squeeze-and-excitation with bias-free maps C -> max(1, C/r) -> C.
struct SEBlock {
  struct Config {
    std::size_t channels;
    std::size_t reduction = 4;
    std::size_t hidden() const { return std::max<std::size_t>(1, channels / reduction); }
  };

  Config config;
  Tensor fc1;  // [hidden, C]
  Tensor fc2;  // [C, hidden]

  static void declare(ParamLayout& layout, const std::string& prefix, const Config& c) {
    layout.push_back({prefix + ".fc1.weight", {c.hidden(), c.channels}, c.channels});
    layout.push_back({prefix + ".fc2.weight", {c.channels, c.hidden()}, c.hidden()});
  }

  static SEBlock bind(const ParameterStore& store, const std::string& prefix, const Config& c) {
    return {c, bind_checked(store, prefix + ".fc1.weight", {c.hidden(), c.channels}),
            bind_checked(store, prefix + ".fc2.weight", {c.channels, c.hidden()})};
  }

  static constexpr std::size_t parameter_count(std::size_t channels, std::size_t reduction) {
    const std::size_t hid = std::max<std::size_t>(1, channels / reduction);
    return 2 * channels * hid;
  }
};

// Per-channel gates in (0,1), shape [B,C].
inline Tensor se_gate(const SEBlock& block, const Tensor& x) {
  Tensor z = relu(linear(global_avg_pool(x), block.fc1));
  return sigmoid(linear(z, block.fc2));
}

inline Tensor se_forward(const SEBlock& block, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != block.config.channels) {
    throw ShapeError("se: expected " + std::to_string(block.config.channels) +
                     " channels, got " + to_string(x.shape()));
  }
  return mul_channelwise(x, se_gate(block, x));
}

}  // namespace eyeseg
