#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sona/gemm.hpp"
#include "sona/ops.hpp"
#include "sona/random.hpp"
#include "sona/tensor.hpp"

namespace sona {

enum class Mode { train, eval };

struct Extent2 {
  int h = 1;
  int w = 1;
};

struct Conv2dParams {
  Tensor weight;  // [out_c x in_c x kh x kw]
  std::optional<Tensor> bias;  // [out_c]
  Extent2 stride{1, 1};
  Extent2 padding{0, 0};
  Extent2 dilation{1, 1};

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
};

struct BatchNormState {
  Tensor scale;
  Tensor shift;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  Mode mode = Mode::train;

  static BatchNormState create(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5) {
    if (!(epsilon > 0.0)) throw contract_error("batch norm epsilon must be positive");
    return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true),
            Tensor::zeros({channels}), Tensor::full({channels}, 1.0), momentum, epsilon, Mode::train};
  }
  std::size_t channels() const { return scale.numel(); }
};

struct BottleneckParams {
  Conv2dParams reduce;   // 1x1
  Conv2dParams spatial;  // 3x3, carries stride and dilation
  Conv2dParams expand;   // 1x1
  BatchNormState reduce_bn, spatial_bn, expand_bn;
  std::optional<Conv2dParams> projection;
  std::optional<BatchNormState> projection_bn;
};

enum class ActivationKind { relu, leaky_relu };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  double slope = 0.0;

  static Activation relu() { return {ActivationKind::relu, 0.0}; }
  static Activation leaky(double slope = 0.01) { return {ActivationKind::leaky_relu, slope}; }
};

enum class PoolKind { avg, max };

/// Output extent of a convolution along one axis; may be <= 0 for invalid configs.
inline long conv_out_extent(long in, int kernel, int stride, int pad, int dilation) {
  return (in + 2L * pad - static_cast<long>(dilation) * (kernel - 1) - 1) / stride + 1;
}

// Cross-correlation with stride, zero padding and dilation, lowered to
// im2col + GEMM per sample.
inline Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) throw dimension_error("conv2d: expected NCHW input, got " + shape_str(x.shape()));
  const auto& ws = p.weight.shape();
  if (ws.size() != 4) throw dimension_error("conv2d: weight must be 4-D, got " + shape_str(ws));
  if (x.dim(1) != ws[1])
    throw dimension_error("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                          std::to_string(ws[1]) + " (input " + shape_str(x.shape()) + ", weight " +
                          shape_str(ws) + ")");
  if (p.stride.h < 1 || p.stride.w < 1 || p.dilation.h < 1 || p.dilation.w < 1 || p.padding.h < 0 ||
      p.padding.w < 0)
    throw contract_error("conv2d: stride and dilation must be >= 1, padding >= 0");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = ws[0], kh = ws[2], kw = ws[3];
  const long oh_l = conv_out_extent(static_cast<long>(h), static_cast<int>(kh), p.stride.h, p.padding.h, p.dilation.h);
  const long ow_l = conv_out_extent(static_cast<long>(w), static_cast<int>(kw), p.stride.w, p.padding.w, p.dilation.w);
  if (oh_l < 1 || ow_l < 1)
    throw dimension_error("conv2d: non-positive output extent " + std::to_string(oh_l) + "x" +
                          std::to_string(ow_l) + " for input " + shape_str(x.shape()));
  if (p.bias && p.bias->numel() != oc) throw dimension_error("conv2d: bias length does not match out channels");
  const auto oh = static_cast<std::size_t>(oh_l), ow = static_cast<std::size_t>(ow_l);
  const std::size_t K = c * kh * kw, P = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && p.stride.h == 1 && p.stride.w == 1 && p.padding.h == 0 &&
                         p.padding.w == 0;

  const Extent2 st = p.stride, pad = p.padding, dil = p.dilation;
  auto im2col = [=](const double* img, double* col) {
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t ki = 0; ki < kh; ++ki)
        for (std::size_t kj = 0; kj < kw; ++kj) {
          double* row = col + ((ci * kh + ki) * kw + kj) * P;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy) * st.h - pad.h + static_cast<long>(ki) * dil.h;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox) * st.w - pad.w + static_cast<long>(kj) * dil.w;
              row[oy * ow + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                      ? img[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]
                                      : 0.0;
            }
          }
        }
  };

  std::vector<double> cols;
  if (!pointwise) cols.resize(n * K * P);
  std::vector<double> out(n * oc * P, 0.0);
  const double* wd = p.weight.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    const double* col = x.data().data() + s * c * h * w;
    if (!pointwise) {
      im2col(col, cols.data() + s * K * P);
      col = cols.data() + s * K * P;
    }
    double* os = out.data() + s * oc * P;
    if (p.bias) {
      for (std::size_t o = 0; o < oc; ++o) std::fill_n(os + o * P, P, (*p.bias)[o]);
    }
    gemm::nn(oc, P, K, wd, col, os);
  }

  Tensor bias = p.bias ? *p.bias : Tensor();
  Tensor weight = p.weight;
  return Tensor::make_result(
      "conv2d", {n, oc, oh, ow}, std::move(out), {x, weight, bias},
      [=, cols = std::move(cols)](std::span<const double> g) {
        auto gx = grad_sink(x);
        auto gw = grad_sink(weight);
        auto gb = grad_sink(bias);
        std::vector<double> dcol(gx.empty() ? 0 : K * P);
        for (std::size_t s = 0; s < n; ++s) {
          const double* gs = g.data() + s * oc * P;
          const double* col = pointwise ? x.data().data() + s * c * h * w : cols.data() + s * K * P;
          if (!gw.empty()) gemm::nt(oc, K, P, gs, col, gw.data());
          if (!gb.empty())
            for (std::size_t o = 0; o < oc; ++o)
              for (std::size_t q = 0; q < P; ++q) gb[o] += gs[o * P + q];
          if (gx.empty()) continue;
          double* dx = gx.data() + s * c * h * w;
          if (pointwise) {
            gemm::tn(K, P, oc, weight.data().data(), gs, dx);
            continue;
          }
          std::fill(dcol.begin(), dcol.end(), 0.0);
          gemm::tn(K, P, oc, weight.data().data(), gs, dcol.data());
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ki = 0; ki < kh; ++ki)
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* row = dcol.data() + ((ci * kh + ki) * kw + kj) * P;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const long iy = static_cast<long>(oy) * st.h - pad.h + static_cast<long>(ki) * dil.h;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const long ix = static_cast<long>(ox) * st.w - pad.w + static_cast<long>(kj) * dil.w;
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    dx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * ow + ox];
                  }
                }
              }
        }
      });
}

// Per-channel normalization of [n x c] or [n x c x h x w]. Train mode uses
// batch statistics (biased variance) and folds the unbiased variance into the
// running estimate; eval mode uses the running estimates.
inline Tensor batch_norm(const Tensor& x, BatchNormState& s) {
  if (x.rank() != 2 && x.rank() != 4)
    throw dimension_error("batch_norm: expected [n x c] or NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (c != s.channels())
    throw dimension_error("batch_norm: input has " + std::to_string(c) + " channels, state has " +
                          std::to_string(s.channels()));
  const std::size_t m = n * hw;
  const bool train = s.mode == Mode::train;
  if (train && m < 2) throw contract_error("batch_norm: train mode needs at least 2 values per channel, got " +
                                           std::to_string(m));
  auto xd = x.data();
  std::vector<double> xhat(xd.size());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (train) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t q = 0; q < hw; ++q) acc += xd[(i * c + ch) * hw + q];
      mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t q = 0; q < hw; ++q) {
          const double d = xd[(i * c + ch) * hw + q] - mu;
          sq += d * d;
        }
      var = sq / static_cast<double>(m);
      auto rm = s.running_mean.mutable_data();
      auto rv = s.running_var.mutable_data();
      rm[ch] = (1.0 - s.momentum) * rm[ch] + s.momentum * mu;
      rv[ch] = (1.0 - s.momentum) * rv[ch] + s.momentum * sq / static_cast<double>(m - 1);
    } else {
      mu = s.running_mean[ch];
      var = s.running_var[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + s.epsilon);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t q = 0; q < hw; ++q) {
        const auto idx = (i * c + ch) * hw + q;
        xhat[idx] = (xd[idx] - mu) * inv_std[ch];
      }
  }
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < hw; ++q) {
        const auto idx = (i * c + ch) * hw + q;
        out[idx] = s.scale[ch] * xhat[idx] + s.shift[ch];
      }

  Tensor scale = s.scale, shift = s.shift;
  return Tensor::make_result(
      "batch_norm", x.shape(), std::move(out), {x, scale, shift},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
        auto gx = grad_sink(x);
        auto gscale = grad_sink(scale);
        auto gshift = grad_sink(shift);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < hw; ++q) {
              const auto idx = (i * c + ch) * hw + q;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (!gshift.empty()) gshift[ch] += sum_g;
          if (!gscale.empty()) gscale[ch] += sum_gx;
          if (gx.empty()) continue;
          const double gamma = scale[ch];
          if (train) {
            const double k = gamma * inv_std[ch] / static_cast<double>(m);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t q = 0; q < hw; ++q) {
                const auto idx = (i * c + ch) * hw + q;
                gx[idx] += k * (static_cast<double>(m) * g[idx] - sum_g - xhat[idx] * sum_gx);
              }
          } else {
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t q = 0; q < hw; ++q) {
                const auto idx = (i * c + ch) * hw + q;
                gx[idx] += g[idx] * gamma * inv_std[ch];
              }
          }
        }
      });
}

inline Tensor activation(const Tensor& x, Activation act) {
  const double slope = act.kind == ActivationKind::relu ? 0.0 : act.slope;
  if (!(slope >= 0.0 && slope < 1.0)) throw contract_error("activation: slope must lie in [0, 1)");
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : slope * xd[i];
  return Tensor::make_result(act.kind == ActivationKind::relu ? "relu" : "leaky_relu", x.shape(), std::move(out),
                             {x}, [x, slope](std::span<const double> g) {
                               auto gx = grad_sink(x);
                               auto xd = x.data();
                               for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += xd[i] > 0.0 ? g[i] : slope * g[i];
                             });
}

inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu()); }
inline Tensor leaky_relu(const Tensor& x, double slope) { return activation(x, Activation::leaky(slope)); }

// [n x c x h x w] -> [n x c]. Max routes the gradient to the first maximum
// in row-major order.
inline Tensor global_pool(const Tensor& x, PoolKind kind) {
  if (x.rank() != 4) throw dimension_error("global_pool: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<double> out(n * c);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? n * c : 0);
  for (std::size_t r = 0; r < n * c; ++r) {
    const double* in = xd.data() + r * hw;
    if (kind == PoolKind::avg) {
      double acc = 0.0;
      for (std::size_t q = 0; q < hw; ++q) acc += in[q];
      out[r] = acc / static_cast<double>(hw);
    } else {
      std::size_t best = 0;
      for (std::size_t q = 1; q < hw; ++q)
        if (in[q] > in[best]) best = q;
      argmax[r] = best;
      out[r] = in[best];
    }
  }
  return Tensor::make_result(kind == PoolKind::avg ? "global_avg_pool" : "global_max_pool", {n, c}, std::move(out),
                             {x}, [x, kind, hw, argmax = std::move(argmax)](std::span<const double> g) {
                               auto gx = grad_sink(x);
                               for (std::size_t r = 0; r < g.size(); ++r) {
                                 if (kind == PoolKind::avg) {
                                   const double v = g[r] / static_cast<double>(hw);
                                   for (std::size_t q = 0; q < hw; ++q) gx[r * hw + q] += v;
                                 } else {
                                   gx[r * hw + argmax[r]] += g[r];
                                 }
                               }
                             });
}

// Softmax over the last dimension with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
  const std::size_t k = m.shape().back();
  const std::size_t rows = m.numel() / k;
  auto md = m.data();
  std::vector<double> out(md.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = md.data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (std::isnan(in[j])) throw numeric_error("softmax_rows: NaN in row " + std::to_string(r));
      mx = std::max(mx, in[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += (out[r * k + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= total;
  }
  auto result = Tensor::make_result("softmax_rows", m.shape(), out, {m}, {});
  if (result.requires_grad()) {
    result.node()->backward = [m, y = std::move(out), rows, k](std::span<const double> g) {
      auto gm = grad_sink(m);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
        for (std::size_t j = 0; j < k; ++j) gm[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
      }
    };
  }
  return result;
}

// relu(shortcut(x) + F(x)), F = 1x1 -> BN -> relu -> 3x3 -> BN -> relu -> 1x1 -> BN.
inline Tensor bottleneck(const Tensor& x, BottleneckParams& p) {
  if (x.rank() != 4 || x.dim(1) != p.reduce.in_channels())
    throw dimension_error("bottleneck: input " + (x.defined() ? shape_str(x.shape()) : std::string("?")) +
                          " does not match block input channels " + std::to_string(p.reduce.in_channels()));
  if (!p.projection && p.expand.out_channels() != p.reduce.in_channels())
    throw dimension_error("bottleneck: output channels differ from input channels and no projection is set");
  Tensor y = relu(batch_norm(conv2d(x, p.reduce), p.reduce_bn));
  y = relu(batch_norm(conv2d(y, p.spatial), p.spatial_bn));
  y = batch_norm(conv2d(y, p.expand), p.expand_bn);
  Tensor shortcut = x;
  if (p.projection) shortcut = batch_norm(conv2d(x, *p.projection), *p.projection_bn);
  return relu(add(shortcut, y));
}

// Kaiming-style uniform initialization, bound sqrt(6 / fan_in).
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Conv2dParams make_conv(std::size_t in_c, std::size_t out_c, int kernel, Rng& rng, bool bias = false,
                              int stride = 1, int dilation = 1) {
  Conv2dParams p;
  const auto k = static_cast<std::size_t>(kernel);
  p.weight = kaiming_uniform({out_c, in_c, k, k}, in_c * k * k, rng);
  if (bias) p.bias = Tensor::zeros({out_c}, true);
  p.stride = {stride, stride};
  p.dilation = {dilation, dilation};
  const int pad = dilation * (kernel - 1) / 2;
  p.padding = {pad, pad};
  return p;
}

}  // namespace sona
