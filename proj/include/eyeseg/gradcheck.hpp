#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "eyeseg/model.hpp"
#include "eyeseg/training.hpp"

// Central finite-difference verification of the backward rules. Only forward
// evaluations feed the numerical side, so the check is independent of the
// gradients it audits.

namespace eyeseg {

struct GradCheckOptions {
  double step = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::size_t probes = 24;
  std::size_t max_rejections = 200;
};

struct GradCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t rejected = 0;  // probes whose step crossed an activation kink

  bool passed(double tolerance) const { return probes > 0 && max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

struct ProbeEval {
  double value;
  std::uint64_t kinks;
};

inline ProbeEval probe_eval(const std::function<Tensor()>& loss_fn) {
  NoGradGuard no_grad;
  auto& probe = kink_probe();
  probe.active = true;
  probe.hash = 1469598103934665603ull;
  const double v = loss_fn().item();
  probe.active = false;
  return {v, probe.hash};
}

}  // namespace detail

// loss_fn must rebuild the scalar loss from the current leaf values. Probes
// are drawn uniformly over (leaf, coordinate) pairs.
inline GradCheckResult check_gradients(std::string name, const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> leaves, std::mt19937_64& rng,
                                       GradCheckOptions opt = {}) {
  GradCheckResult res{std::move(name)};
  for (auto& l : leaves) l.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) {
    std::vector<double> g(l.size(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  const std::uint64_t base_kinks = detail::probe_eval(loss_fn).kinks;
  std::uniform_int_distribution<std::size_t> pick_leaf(0, leaves.size() - 1);
  while (res.probes < opt.probes && res.rejected <= opt.max_rejections) {
    const std::size_t li = pick_leaf(rng);
    Tensor leaf = leaves[li];
    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, leaf.size() - 1)(rng);
    const double saved = leaf.data()[k];
    leaf.data()[k] = saved + opt.step;
    const auto plus = detail::probe_eval(loss_fn);
    leaf.data()[k] = saved - opt.step;
    const auto minus = detail::probe_eval(loss_fn);
    leaf.data()[k] = saved;
    if (plus.kinks != base_kinks || minus.kinks != base_kinks) {
      ++res.rejected;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * opt.step);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[li][k], numeric, opt.floor));
    ++res.probes;
  }
  return res;
}

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from the kinks at 0 (and 6 when relu6 is set).
inline Tensor kink_free_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = u(rng);
    } while (std::abs(x) < 1e-3 || std::abs(x - 6.0) < 1e-3);
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Contracts an arbitrary output with fixed random weights so that no
// gradient vanishes by symmetry.
inline std::function<Tensor()> weighted(std::function<Tensor()> f, std::mt19937_64& rng) {
  Tensor probe_out = [&] {
    NoGradGuard g;
    return f();
  }();
  Tensor w = random_tensor(probe_out.shape(), rng, -1.0, 1.0, false);
  return [f = std::move(f), w] { return sum(mul(f(), w)); };
}

inline std::vector<Mask> random_masks(std::size_t b, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> lab(0, 3);
  std::vector<Mask> out;
  for (std::size_t i = 0; i < b; ++i) {
    Mask m(h, w);
    for (auto& l : m.labels) l = static_cast<std::uint8_t>(lab(rng));
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

// A small full-width network forwarded at 32x16 (batch 2, train-mode BN)
// through softmax and the dice loss; probes cover the input and weights.
inline GradCheckResult check_network_gradients(std::uint64_t seed, Variant variant = Variant::N3,
                                               GradCheckOptions opt = {}) {
  std::mt19937_64 rng(seed);
  const ModelConfig cfg = ModelConfig::for_variant(variant, 32, 16);
  ParameterStore params = build(cfg, seed);
  // Non-trivial affine parameters so the batch-norm paths are exercised.
  for (const auto& e : params.entries()) {
    if (e.kind != ParamKind::norm_affine) continue;
    Tensor t = e.tensor;
    std::uniform_real_distribution<double> u(0.5, 1.5), b(-0.2, 0.2);
    const bool gamma = e.name.size() > 7 && e.name.substr(e.name.size() - 7) == ".weight";
    for (auto& v : t.data()) v = gamma ? u(rng) : b(rng);
  }
  const EyeNet net(cfg, params);
  Tensor x = detail::random_tensor({2, 1, 32, 16}, rng, 0.0, 1.0);
  const auto targets = detail::random_masks(2, 32, 16, rng);
  std::vector<Tensor> leaves{x};
  for (const auto& e : params.entries())
    if (is_learnable(e.kind)) leaves.push_back(e.tensor);
  auto loss = [&] {
    return generalized_dice_loss(softmax_channels(net.forward(x, BnMode::train)), targets);
  };
  opt.probes = std::max<std::size_t>(opt.probes, 48);
  return check_gradients("network(" + to_string(variant) + ",32x16)", loss, leaves, rng, opt);
}

// Every differentiable primitive on random small tensors, one result per op.
inline std::vector<GradCheckResult> gradcheck_suite(std::uint64_t seed, GradCheckOptions opt = {}) {
  using detail::kink_free_tensor;
  using detail::random_tensor;
  using detail::weighted;
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](std::string name, std::function<Tensor()> f, std::vector<Tensor> leaves) {
    out.push_back(check_gradients(std::move(name), weighted(std::move(f), rng), std::move(leaves), rng, opt));
  };

  {
    Tensor x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    run("conv2d", [=] { return conv2d(x, w, 2, 1); }, {x, w});
  }
  {
    Tensor x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({3, 1, 3, 3}, rng);
    run("depthwise_conv2d", [=] { return depthwise_conv2d(x, w, 1, 1); }, {x, w});
  }
  {
    Tensor x = random_tensor({2, 3, 4, 5}, rng), w = random_tensor({5, 3, 1, 1}, rng);
    run("pointwise_conv2d", [=] { return pointwise_conv2d(x, w); }, {x, w});
  }
  {
    Tensor x = random_tensor({3, 2, 4, 3}, rng, -2.0, 2.0);
    Tensor g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
    auto stats = BatchNormStats::fresh(2);
    run("batch_norm(train)", [=] { return batch_norm(x, g, b, stats, BnMode::train); }, {x, g, b});
  }
  {
    Tensor x = random_tensor({2, 2, 3, 3}, rng, -2.0, 2.0);
    Tensor g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
    BatchNormStats stats{Tensor::from({2}, {0.3, -0.2}), Tensor::from({2}, {1.5, 0.7}), Tensor::ones({1})};
    run("batch_norm(eval)", [=] { return batch_norm(x, g, b, stats, BnMode::eval); }, {x, g, b});
  }
  {
    Tensor x = kink_free_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
    run("relu", [=] { return relu(x); }, {x});
  }
  {
    Tensor x = kink_free_tensor({2, 3, 4, 4}, rng, -2.0, 8.0);
    run("relu6", [=] { return relu6(x); }, {x});
  }
  {
    Tensor x = random_tensor({2, 3, 3, 3}, rng, -4.0, 4.0);
    run("sigmoid", [=] { return sigmoid(x); }, {x});
  }
  {
    Tensor x = random_tensor({2, 4, 3, 3}, rng, -3.0, 3.0);
    run("softmax_channels", [=] { return softmax_channels(x); }, {x});
  }
  {
    Tensor a = random_tensor({2, 3, 3, 2}, rng), b = random_tensor({2, 3, 3, 2}, rng);
    run("add", [=] { return add(a, b); }, {a, b});
    run("mul", [=] { return mul(a, b); }, {a, b});
  }
  {
    Tensor x = random_tensor({2, 3, 4, 3}, rng), s = random_tensor({2, 3}, rng);
    run("mul_channelwise", [=] { return mul_channelwise(x, s); }, {x, s});
  }
  {
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    run("global_avg_pool", [=] { return global_avg_pool(x); }, {x});
  }
  {
    Tensor x = random_tensor({3, 4}, rng), w = random_tensor({2, 4}, rng);
    run("linear", [=] { return linear(x, w); }, {x, w});
  }
  {
    Tensor x = random_tensor({2, 2, 3, 4}, rng);
    run("bilinear_upsample", [=] { return bilinear_upsample(x, 3); }, {x});
    run("bilinear_resize", [=] { return bilinear_resize(x, 7, 5); }, {x});
  }
  {
    Tensor logits = random_tensor({2, 4, 4, 3}, rng, -2.0, 2.0, false);
    Tensor p = softmax_channels(logits).detach();
    p.set_requires_grad(true);
    const auto targets = detail::random_masks(2, 4, 3, rng);
    out.push_back(check_gradients("generalized_dice_loss", [=] { return generalized_dice_loss(p, targets); },
                                  {p}, rng, opt));
  }
  out.push_back(check_network_gradients(seed, Variant::N3, opt));
  return out;
}

}  // namespace eyeseg
