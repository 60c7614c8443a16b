#pragma once

// Second-order non-local attention.
//
// For an input map x (c channels, h*w positions) the block computes
//   theta(x) = leaky_relu(BN(conv1x1(x)))          [hw x c/r]
//   g(x)     = conv1x1(x)                            [hw x c/r]
//   Sigma    = theta(x) * Ibar * theta(x)^T          [hw x hw]
//   A        = softmax_rows(Sigma / sqrt(c/r))
//   out      = x + p(A * g(x))
// with the centering matrix Ibar = a (I - a 1), a = 1 / (c/r). Ibar is never
// materialized: since (I - a 1) is idempotent, Sigma = a * Tc * Tc^T where Tc
// is theta(x) with each row's mean removed.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sona/nn.hpp"
#include "sona/ops.hpp"
#include "sona/tensor.hpp"

namespace sona {

struct SonaConfig {
  std::size_t channels = 0;
  std::size_t reduction = 2;
  double leaky_slope = 0.01;

  std::size_t reduced() const { return channels / reduction; }

  void validate() const {
    if (channels == 0 || reduction == 0) throw contract_error("SonaConfig: channels and reduction must be positive");
    if (channels % reduction != 0)
      throw contract_error("SonaConfig: reduction " + std::to_string(reduction) + " does not divide " +
                           std::to_string(channels) + " channels");
    if (reduced() < 2) throw contract_error("SonaConfig: c/r must be at least 2 for a non-degenerate centering");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw contract_error("SonaConfig: leaky_slope must lie in [0, 1)");
  }
};

struct SonaParams {
  Conv2dParams theta;  // c -> c/r, no bias (BN follows)
  BatchNormState theta_bn;
  Conv2dParams g;  // c -> c/r, bias
  Conv2dParams p;  // c/r -> c, bias, zero-initialized
};

// Ibar = a (I - a 1) of size d x d, kept as the scalar a.
struct CenteringMatrix {
  std::size_t size = 0;
  double a = 0.0;

  explicit CenteringMatrix(std::size_t d) : size(d), a(1.0 / static_cast<double>(d)) {}

  double at(std::size_t i, std::size_t j) const { return a * ((i == j ? 1.0 : 0.0) - a); }

  std::vector<double> apply(std::span<const double> v) const {
    double total = 0.0;
    for (double e : v) total += e;
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = a * (v[i] - a * total);
    return out;
  }
};

inline SonaParams make_sona_params(const SonaConfig& cfg, Rng& rng, double bn_momentum = 0.1, double bn_eps = 1e-5) {
  cfg.validate();
  const auto c = cfg.channels, cr = cfg.reduced();
  SonaParams p;
  p.theta = make_conv(c, cr, 1, rng, false);
  p.theta_bn = BatchNormState::create(cr, bn_momentum, bn_eps);
  p.g = make_conv(c, cr, 1, rng, true);
  p.p = make_conv(cr, c, 1, rng, true);
  std::fill(p.p.weight.mutable_data().begin(), p.p.weight.mutable_data().end(), 0.0);
  return p;
}

// Sigma = theta Ibar theta^T for [hw x d] or batched [n x hw x d] input.
inline Tensor spatial_covariance(const Tensor& theta) {
  if (theta.rank() != 2 && theta.rank() != 3)
    throw dimension_error("spatial_covariance: expected [hw x d] or [n x hw x d], got " + shape_str(theta.shape()));
  const bool batched = theta.rank() == 3;
  const std::size_t n = batched ? theta.dim(0) : 1;
  const std::size_t hw = theta.shape()[theta.rank() - 2];
  const std::size_t d = theta.shape()[theta.rank() - 1];
  if (d < 2) throw contract_error("spatial_covariance: need at least 2 reduced channels, got " + std::to_string(d));
  const double a = 1.0 / static_cast<double>(d);

  std::vector<double> centered(theta.numel());
  auto td = theta.data();
  for (std::size_t r = 0; r < n * hw; ++r) {
    const double* row = td.data() + r * d;
    // A constant row centers to exactly zero; the rounded mean need not equal it.
    if (std::all_of(row, row + d, [&](double v) { return v == row[0]; })) continue;
    double mu = 0.0;
    for (std::size_t k = 0; k < d; ++k) mu += row[k];
    mu *= a;
    for (std::size_t k = 0; k < d; ++k) centered[r * d + k] = row[k] - mu;
  }
  std::vector<double> out(n * hw * hw);
  for (std::size_t s = 0; s < n; ++s) {
    const double* tc = centered.data() + s * hw * d;
    double* sig = out.data() + s * hw * hw;
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t j = i; j < hw; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += tc[i * d + k] * tc[j * d + k];
        sig[i * hw + j] = sig[j * hw + i] = a * dot;
      }
  }
  Shape shape = batched ? Shape{n, hw, hw} : Shape{hw, hw};
  return Tensor::make_result(
      "spatial_covariance", std::move(shape), std::move(out), {theta},
      [theta, n, hw, d, a, centered = std::move(centered)](std::span<const double> g) {
        auto gt = grad_sink(theta);
        std::vector<double> gsym(hw * hw), dtc(hw * d);
        for (std::size_t s = 0; s < n; ++s) {
          const double* gs = g.data() + s * hw * hw;
          for (std::size_t i = 0; i < hw; ++i)
            for (std::size_t j = 0; j < hw; ++j) gsym[i * hw + j] = a * (gs[i * hw + j] + gs[j * hw + i]);
          std::fill(dtc.begin(), dtc.end(), 0.0);
          gemm::nn(hw, d, hw, gsym.data(), centered.data() + s * hw * d, dtc.data());
          // Row centering is its own adjoint.
          for (std::size_t i = 0; i < hw; ++i) {
            double mu = 0.0;
            for (std::size_t k = 0; k < d; ++k) mu += dtc[i * d + k];
            mu *= a;
            for (std::size_t k = 0; k < d; ++k) gt[(s * hw + i) * d + k] += dtc[i * d + k] - mu;
          }
        }
      });
}

struct SonaOutput {
  Tensor output;     // [n x c x h x w]
  Tensor attention;  // [n x hw x hw], rows sum to 1
};

inline SonaOutput sona_forward_with_attention(const Tensor& x, SonaParams& params, const SonaConfig& cfg) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(1) != cfg.channels || params.theta.in_channels() != cfg.channels)
    throw dimension_error("sona_forward: input " + shape_str(x.shape()) + " does not match module channels " +
                          std::to_string(cfg.channels));
  const std::size_t h = x.dim(2), w = x.dim(3);
  const Tensor theta = leaky_relu(batch_norm(conv2d(x, params.theta), params.theta_bn), cfg.leaky_slope);
  const Tensor gx = conv2d(x, params.g);
  const Tensor sigma = spatial_covariance(to_position_major(theta));
  const Tensor attention = softmax_rows(scale(sigma, 1.0 / std::sqrt(static_cast<double>(cfg.reduced()))));
  const Tensor z = to_channel_major(matmul(attention, to_position_major(gx)), h, w);
  return {add(x, conv2d(z, params.p)), attention};
}

inline Tensor sona_forward(const Tensor& x, SonaParams& params, const SonaConfig& cfg) {
  return sona_forward_with_attention(x, params, cfg).output;
}

// Attention row of one reference position, folded back to [h x w].
inline Tensor attention_heatmap(const Tensor& x, SonaParams& params, const SonaConfig& cfg, std::size_t ref_row,
                                std::size_t ref_col, std::size_t sample = 0) {
  if (x.rank() != 4) throw dimension_error("attention_heatmap: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (ref_row >= h || ref_col >= w || sample >= x.dim(0))
    throw dimension_error("attention_heatmap: reference (" + std::to_string(ref_row) + "," + std::to_string(ref_col) +
                          ") outside " + std::to_string(h) + "x" + std::to_string(w));
  const auto att = sona_forward_with_attention(x, params, cfg).attention;
  const std::size_t hw = h * w;
  const double* row = att.data().data() + (sample * hw + ref_row * w + ref_col) * hw;
  return Tensor({h, w}, std::vector<double>(row, row + hw));
}

}  // namespace sona
