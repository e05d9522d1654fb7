#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eyeseg/tensor.hpp"

namespace eyeseg {

namespace detail {

inline void expect_ndim(const Tensor& t, std::size_t n, std::string_view op, std::string_view what) {
  if (t.ndim() != n) {
    throw ShapeError(std::string(op) + ": " + std::string(what) + " must be " + std::to_string(n) +
                     "-D, got " + to_string(t.shape()));
  }
}

inline void expect_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// Thread-local fingerprint of activation-kink patterns. Finite-difference
// checks compare fingerprints of perturbed and unperturbed forwards to
// discard probes whose step crosses a ReLU kink.
struct KinkProbeState {
  bool active = false;
  std::uint64_t hash = 1469598103934665603ull;
  void mix(std::uint64_t v) {
    hash ^= v;
    hash *= 1099511628211ull;
  }
};

inline KinkProbeState& kink_probe() {
  thread_local KinkProbeState state;
  return state;
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, stride, padding, groups;
  std::size_t out_height, out_width;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, std::size_t stride,
                                  std::size_t padding, std::size_t groups, std::string_view op) {
  expect_ndim(input, 4, op, "input");
  expect_ndim(weight, 4, op, "weight");
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  if (weight.dim(3) != g.kernel) throw ShapeError(std::string(op) + ": kernel must be square");
  if (g.in_channels % groups != 0 || g.out_channels % groups != 0 ||
      weight.dim(1) * groups != g.in_channels) {
    throw ShapeError(std::string(op) + ": input " + to_string(input.shape()) +
                     " incompatible with weight " + to_string(weight.shape()));
  }
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw ShapeError(std::string(op) + ": kernel larger than padded input");
  }
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
  return g;
}

// Valid output range [lo, hi) along one axis for kernel offset k.
inline std::pair<long, long> conv_range(long in_size, long out_size, long k, long stride, long pad) {
  long lo = 0;
  if (pad - k > 0) lo = (pad - k + stride - 1) / stride;
  long hi = (in_size - 1 + pad - k);
  hi = hi < 0 ? 0 : hi / stride + 1;
  return {std::min(lo, out_size), std::min(hi, out_size)};
}

// Grouped direct convolution shared by the full, depthwise and pointwise
// entry points. mode 0: forward, 1: grad input, 2: grad weight.
template <int Mode>
void conv_kernel(const ConvGeometry& g, const double* in, const double* w, const double* gout,
                 double* out) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const long Ho = static_cast<long>(g.out_height), Wo = static_cast<long>(g.out_width);
  const long k = static_cast<long>(g.kernel), s = static_cast<long>(g.stride),
             p = static_cast<long>(g.padding);
  const std::size_t cin_g = g.in_channels / g.groups;
  const std::size_t cout_g = g.out_channels / g.groups;
  const bool flat = (k == 1 && s == 1 && p == 0);
  const long cols = flat ? H * W : Wo;
  const long in_cols = flat ? H * W : W;
  std::vector<std::pair<long, long>> row_ranges(k), col_ranges(k);
  for (long kk = 0; kk < k; ++kk) {
    row_ranges[kk] = flat ? std::pair<long, long>{0, 1} : conv_range(H, Ho, kk, s, p);
    col_ranges[kk] = flat ? std::pair<long, long>{0, cols} : conv_range(W, Wo, kk, s, p);
  }
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const std::size_t group = co / cout_g;
      const std::size_t out_off = (b * g.out_channels + co) * g.out_height * g.out_width;
      for (std::size_t cil = 0; cil < cin_g; ++cil) {
        const std::size_t ci = group * cin_g + cil;
        const std::size_t in_off = (b * g.in_channels + ci) * g.height * g.width;
        const std::size_t w_off = (co * cin_g + cil) * g.kernel * g.kernel;
        for (long kh = 0; kh < k; ++kh) {
          const auto [r_lo, r_hi] = row_ranges[kh];
          for (long kw = 0; kw < k; ++kw) {
            const auto [c_lo, c_hi] = col_ranges[kw];
            if (c_lo >= c_hi) continue;
            const std::size_t widx = w_off + kh * k + kw;
            double acc = 0.0;
            const double wv = (Mode == 2) ? 0.0 : w[widx];
            for (long oh = r_lo; oh < r_hi; ++oh) {
              const long ih = flat ? 0 : oh * s - p + kh;
              const long in_row = in_off + ih * in_cols;
              const long out_row = out_off + oh * cols;
              const long shift = kw - p;
              if constexpr (Mode == 0) {
                const double* src = in + in_row + shift;
                double* dst = out + out_row;
                if (s == 1) {
                  for (long ow = c_lo; ow < c_hi; ++ow) dst[ow] += wv * src[ow];
                } else {
                  for (long ow = c_lo; ow < c_hi; ++ow) dst[ow] += wv * src[ow * s];
                }
              } else if constexpr (Mode == 1) {
                double* dst = out + in_row + shift;
                const double* src = gout + out_row;
                if (s == 1) {
                  for (long ow = c_lo; ow < c_hi; ++ow) dst[ow] += wv * src[ow];
                } else {
                  for (long ow = c_lo; ow < c_hi; ++ow) dst[ow * s] += wv * src[ow];
                }
              } else {
                const double* src = in + in_row + shift;
                const double* go = gout + out_row;
                if (s == 1) {
                  for (long ow = c_lo; ow < c_hi; ++ow) acc += src[ow] * go[ow];
                } else {
                  for (long ow = c_lo; ow < c_hi; ++ow) acc += src[ow * s] * go[ow];
                }
              }
            }
            if constexpr (Mode == 2) out[widx] += acc;
          }
        }
      }
    }
  }
}

inline Tensor conv_impl(const Tensor& input, const Tensor& weight, std::size_t stride,
                        std::size_t padding, std::size_t groups, std::string_view op) {
  const ConvGeometry g = conv_geometry(input, weight, stride, padding, groups, op);
  require_finite(input, std::string(op) + " input");
  std::vector<double> out(g.batch * g.out_channels * g.out_height * g.out_width, 0.0);
  conv_kernel<0>(g, input.data().data(), weight.data().data(), nullptr, out.data());
  return make_result({g.batch, g.out_channels, g.out_height, g.out_width}, std::move(out), op,
                     {input, weight}, [g](Node& self) {
                       const Node& in = *self.inputs[0];
                       const Node& w = *self.inputs[1];
                       if (double* gi = input_grad(self, 0)) {
                         conv_kernel<1>(g, nullptr, w.value.data(), self.grad.data(), gi);
                       }
                       if (double* gw = input_grad(self, 1)) {
                         conv_kernel<2>(g, in.value.data(), nullptr, self.grad.data(), gw);
                       }
                     });
}

}  // namespace detail

// Cross-correlation without bias. weight: [Cout, Cin, k, k].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride = 1,
                     std::size_t padding = 0) {
  detail::expect_ndim(weight, 4, "conv2d", "weight");
  detail::expect_ndim(input, 4, "conv2d", "input");
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  return detail::conv_impl(input, weight, stride, padding, 1, "conv2d");
}

// Per-channel spatial filtering. weight: [C, 1, k, k].
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, std::size_t stride = 1,
                               std::size_t padding = 0) {
  detail::expect_ndim(weight, 4, "depthwise_conv2d", "weight");
  detail::expect_ndim(input, 4, "depthwise_conv2d", "input");
  if (weight.dim(0) != input.dim(1) || weight.dim(1) != 1) {
    throw ShapeError("depthwise_conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, weight is " + to_string(weight.shape()));
  }
  return detail::conv_impl(input, weight, stride, padding, input.dim(1), "depthwise_conv2d");
}

// Per-pixel channel mixing. weight: [Cout, Cin, 1, 1].
inline Tensor pointwise_conv2d(const Tensor& input, const Tensor& weight) {
  detail::expect_ndim(weight, 4, "pointwise_conv2d", "weight");
  detail::expect_ndim(input, 4, "pointwise_conv2d", "input");
  if (weight.dim(2) != 1 || weight.dim(3) != 1 || weight.dim(1) != input.dim(1)) {
    throw ShapeError("pointwise_conv2d: input " + to_string(input.shape()) +
                     " incompatible with weight " + to_string(weight.shape()));
  }
  return detail::conv_impl(input, weight, 1, 0, 1, "pointwise_conv2d");
}

enum class BnMode { train, eval };

// Running statistics of one batch-norm layer. count is the number of
// batches folded in so far; zero means eval mode is not yet usable.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
  Tensor count;

  static BatchNormStats fresh(std::size_t channels) {
    return {Tensor::zeros({channels}), Tensor::ones({channels}), Tensor::zeros({1})};
  }
  void reset() {
    std::fill(mean.data().begin(), mean.data().end(), 0.0);
    std::fill(var.data().begin(), var.data().end(), 1.0);
    count.data()[0] = 0.0;
  }
};

struct BatchNormOptions {
  // nullopt: cumulative average over all batches seen since the last reset.
  std::optional<double> momentum = 0.1;
  double epsilon = 1e-5;
};

// Train mode normalizes by biased batch statistics and folds them into
// stats (the handles in stats are updated in place). Eval mode uses stats.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const BatchNormStats& stats, BnMode mode, BatchNormOptions opt = {}) {
  detail::expect_ndim(x, 4, "batch_norm", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.shape() != Shape{C} ||
      stats.var.shape() != Shape{C}) {
    throw ShapeError("batch_norm: parameters must have shape [" + std::to_string(C) + "]");
  }
  const std::size_t n = B * HW;
  std::vector<double> mean(C), invstd(C);
  const auto xv = x.data();
  if (mode == BnMode::train) {
    if (n < 2) throw ShapeError("batch_norm: train mode needs at least 2 values per channel");
    std::vector<double> var(C);
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = xv.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      mean[c] = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* p = xv.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) ss += (p[i] - mean[c]) * (p[i] - mean[c]);
      }
      var[c] = ss / static_cast<double>(n);
      invstd[c] = 1.0 / std::sqrt(var[c] + opt.epsilon);
    }
    const double seen = stats.count[0];
    const double m = opt.momentum ? *opt.momentum : 1.0 / (seen + 1.0);
    auto rm = stats.mean.node_ptr()->value.data();
    auto rv = stats.var.node_ptr()->value.data();
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - m) * rm[c] + m * mean[c];
      rv[c] = (1.0 - m) * rv[c] + m * var[c];
    }
    stats.count.node_ptr()->value[0] = seen + 1.0;
  } else {
    if (stats.count[0] <= 0.0) {
      throw StateError("batch_norm: eval mode before any running statistics were recorded");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      invstd[c] = 1.0 / std::sqrt(stats.var[c] + opt.epsilon);
    }
  }
  std::vector<double> out(x.size());
  const auto gv = gamma.data(), bv = beta.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * HW;
      const double a = gv[c] * invstd[c];
      const double shift = bv[c] - a * mean[c];
      for (std::size_t i = 0; i < HW; ++i) out[off + i] = a * xv[off + i] + shift;
    }
  }
  const bool train = mode == BnMode::train;
  return detail::make_result(
      x.shape(), std::move(out), "batch_norm", {x, gamma, beta},
      [B, C, HW, n, train, mean, invstd](detail::Node& self) {
        const auto& xin = self.inputs[0]->value;
        const auto& g = self.inputs[1]->value;
        const double* dy = self.grad.data();
        double* gx = detail::input_grad(self, 0);
        double* gg = detail::input_grad(self, 1);
        double* gb = detail::input_grad(self, 2);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              const double xhat = (xin[off + i] - mean[c]) * invstd[c];
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * xhat;
            }
          }
          if (gg) gg[c] += sum_dy_xhat;
          if (gb) gb[c] += sum_dy;
          if (!gx) continue;
          const double k = g[c] * invstd[c];
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (train) {
                const double xhat = (xin[off + i] - mean[c]) * invstd[c];
                gx[off + i] += k * (dy[off + i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
              } else {
                gx[off + i] += k * dy[off + i];
              }
            }
          }
        }
      });
}

namespace detail {

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, std::string_view op, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), op, {x}, [deriv](Node& self) {
    if (double* gx = input_grad(self, 0)) {
      const auto& in = self.inputs[0]->value;
      for (std::size_t i = 0; i < in.size(); ++i) gx[i] += self.grad[i] * deriv(in[i], self.value[i]);
    }
  });
}

inline void probe_kinks(const Tensor& x, double upper) {
  auto& probe = kink_probe();
  if (!probe.active) return;
  std::uint64_t word = 0;
  std::size_t bit = 0;
  for (double v : x.data()) {
    word = (word << 2) | (v > 0.0 ? 1u : 0u) | (v < upper ? 2u : 0u);
    if (++bit == 32) {
      probe.mix(word);
      word = 0;
      bit = 0;
    }
  }
  probe.mix(word);
}

}  // namespace detail

// Subgradient at the kinks is zero.
inline Tensor relu(const Tensor& x) {
  detail::probe_kinks(x, INFINITY);
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor relu6(const Tensor& x) {
  detail::probe_kinks(x, 6.0);
  return detail::unary(
      x, "relu6", [](double v) { return std::min(std::max(v, 0.0), 6.0); },
      [](double v, double) { return (v > 0.0 && v < 6.0) ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = detail::input_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::expect_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (double* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({1}, {s}, "sum", {x}, [](detail::Node& self) {
    if (double* g = detail::input_grad(self, 0)) {
      const double d = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += d;
    }
  });
}

// [B,C,H,W] -> [B,C]
inline Tensor global_avg_pool(const Tensor& x) {
  detail::expect_ndim(x, 4, "global_avg_pool", "input");
  const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(BC);
  for (std::size_t i = 0; i < BC; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < HW; ++j) s += x[i * HW + j];
    out[i] = s / static_cast<double>(HW);
  }
  return detail::make_result({x.dim(0), x.dim(1)}, std::move(out), "global_avg_pool", {x},
                             [BC, HW](detail::Node& self) {
                               if (double* g = detail::input_grad(self, 0)) {
                                 const double inv = 1.0 / static_cast<double>(HW);
                                 for (std::size_t i = 0; i < BC; ++i) {
                                   const double d = self.grad[i] * inv;
                                   for (std::size_t j = 0; j < HW; ++j) g[i * HW + j] += d;
                                 }
                               }
                             });
}

// Bias-free dense map: x [B,Cin], weight [Cout,Cin] -> [B,Cout].
inline Tensor linear(const Tensor& x, const Tensor& weight) {
  detail::expect_ndim(x, 2, "linear", "input");
  detail::expect_ndim(weight, 2, "linear", "weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), Cout = weight.dim(0);
  if (weight.dim(1) != Cin) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  }
  std::vector<double> out(B * Cout, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Cout; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < Cin; ++i) s += weight[o * Cin + i] * x[b * Cin + i];
      out[b * Cout + o] = s;
    }
  return detail::make_result({B, Cout}, std::move(out), "linear", {x, weight},
                             [B, Cin, Cout](detail::Node& self) {
                               const auto& xv = self.inputs[0]->value;
                               const auto& wv = self.inputs[1]->value;
                               double* gx = detail::input_grad(self, 0);
                               double* gw = detail::input_grad(self, 1);
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t o = 0; o < Cout; ++o) {
                                   const double d = self.grad[b * Cout + o];
                                   for (std::size_t i = 0; i < Cin; ++i) {
                                     if (gx) gx[b * Cin + i] += d * wv[o * Cin + i];
                                     if (gw) gw[o * Cin + i] += d * xv[b * Cin + i];
                                   }
                                 }
                             });
}

// x [B,C,H,W] scaled by a per-(sample, channel) gate [B,C].
inline Tensor mul_channelwise(const Tensor& x, const Tensor& gate) {
  detail::expect_ndim(x, 4, "mul_channelwise", "input");
  if (gate.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw ShapeError("mul_channelwise: gate " + to_string(gate.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < BC; ++i)
    for (std::size_t j = 0; j < HW; ++j) out[i * HW + j] = x[i * HW + j] * gate[i];
  return detail::make_result(x.shape(), std::move(out), "mul_channelwise", {x, gate},
                             [BC, HW](detail::Node& self) {
                               const auto& xv = self.inputs[0]->value;
                               const auto& sv = self.inputs[1]->value;
                               double* gx = detail::input_grad(self, 0);
                               double* gs = detail::input_grad(self, 1);
                               for (std::size_t i = 0; i < BC; ++i) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < HW; ++j) {
                                   const double d = self.grad[i * HW + j];
                                   if (gx) gx[i * HW + j] += d * sv[i];
                                   acc += d * xv[i * HW + j];
                                 }
                                 if (gs) gs[i] += acc;
                               }
                             });
}

// Softmax across the channel axis of [B,C,H,W], independently per pixel.
inline Tensor softmax_channels(const Tensor& x) {
  detail::expect_ndim(x, 4, "softmax_channels", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      const std::size_t base = b * C * HW + i;
      double mx = -INFINITY;
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[base + c * HW]);
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        out[base + c * HW] = std::exp(x[base + c * HW] - mx);
        z += out[base + c * HW];
      }
      for (std::size_t c = 0; c < C; ++c) out[base + c * HW] /= z;
    }
  return detail::make_result(x.shape(), std::move(out), "softmax_channels", {x},
                             [B, C, HW](detail::Node& self) {
                               double* gx = detail::input_grad(self, 0);
                               if (!gx) return;
                               const auto& y = self.value;
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t i = 0; i < HW; ++i) {
                                   const std::size_t base = b * C * HW + i;
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < C; ++c)
                                     dot += self.grad[base + c * HW] * y[base + c * HW];
                                   for (std::size_t c = 0; c < C; ++c) {
                                     const std::size_t j = base + c * HW;
                                     gx[j] += y[j] * (self.grad[j] - dot);
                                   }
                                 }
                             });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel centers: src = (d + 0.5) * in / out - 0.5, clamped to [0, in-1].
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

// Bilinear resampling of [B,C,H,W] to [B,C,out_h,out_w].
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::expect_ndim(x, 4, "bilinear_resize", "input");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output size must be positive");
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto rows = detail::lerp_taps(H, out_h);
  const auto cols = detail::lerp_taps(W, out_w);
  std::vector<double> out(BC * out_h * out_w);
  for (std::size_t p = 0; p < BC; ++p) {
    const double* src = x.data().data() + p * H * W;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t r = 0; r < out_h; ++r) {
      const auto& tr = rows[r];
      const double* r0 = src + tr.i0 * W;
      const double* r1 = src + tr.i1 * W;
      for (std::size_t c = 0; c < out_w; ++c) {
        const auto& tc = cols[c];
        const double top = r0[tc.i0] * (1.0 - tc.w1) + r0[tc.i1] * tc.w1;
        const double bot = r1[tc.i0] * (1.0 - tc.w1) + r1[tc.i1] * tc.w1;
        dst[r * out_w + c] = top * (1.0 - tr.w1) + bot * tr.w1;
      }
    }
  }
  return detail::make_result(
      {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), "bilinear_resize", {x},
      [BC, H, W, out_h, out_w, rows, cols](detail::Node& self) {
        double* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t p = 0; p < BC; ++p) {
          double* g = gx + p * H * W;
          const double* go = self.grad.data() + p * out_h * out_w;
          for (std::size_t r = 0; r < out_h; ++r) {
            const auto& tr = rows[r];
            for (std::size_t c = 0; c < out_w; ++c) {
              const auto& tc = cols[c];
              const double d = go[r * out_w + c];
              const double top = d * (1.0 - tr.w1), bot = d * tr.w1;
              g[tr.i0 * W + tc.i0] += top * (1.0 - tc.w1);
              g[tr.i0 * W + tc.i1] += top * tc.w1;
              g[tr.i1 * W + tc.i0] += bot * (1.0 - tc.w1);
              g[tr.i1 * W + tc.i1] += bot * tc.w1;
            }
          }
        }
      });
}

inline Tensor bilinear_upsample(const Tensor& x, std::size_t scale_factor) {
  detail::expect_ndim(x, 4, "bilinear_upsample", "input");
  if (scale_factor < 1) throw ShapeError("bilinear_upsample: scale must be >= 1");
  return bilinear_resize(x, x.dim(2) * scale_factor, x.dim(3) * scale_factor);
}

// Multiply counts of one stride-1 "same" layer, for cost comparisons.
inline std::size_t conv_multiplies(std::size_t h, std::size_t w, std::size_t cin, std::size_t cout,
                                   std::size_t k) {
  return h * w * cin * cout * k * k;
}

inline std::size_t separable_multiplies(std::size_t h, std::size_t w, std::size_t cin,
                                        std::size_t cout, std::size_t k) {
  return h * w * cin * k * k + h * w * cin * cout;
}

}  // namespace eyeseg
