#pragma once

// DropBlock with independent block height and width.
//
// Seeds are Bernoulli(gamma) over every anchor where the whole block fits;
// each seed zeroes the block_height x block_width rectangle whose top-left
// corner it marks. One mask per sample, shared across channels. Kept values
// are rescaled by (h*w)/kept so the map's total mass is preserved.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sona/random.hpp"
#include "sona/tensor.hpp"

namespace sona {

struct DropBlockPlusConfig {
  double gamma = 0.1;
  int block_height = 5;
  int block_width = 8;
  bool enabled = true;
  // Draw each mask's block size uniformly from [1, block_height] x [1, block_width].
  bool random_size = false;

  void validate(std::size_t h, std::size_t w) const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw contract_error("dropblock: gamma must lie in [0, 1]");
    if (block_height < 1 || block_width < 1) throw contract_error("dropblock: block extents must be positive");
    if (static_cast<std::size_t>(block_height) > h || static_cast<std::size_t>(block_width) > w)
      throw contract_error("dropblock: block " + std::to_string(block_height) + "x" + std::to_string(block_width) +
                           " does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " map");
  }
};

struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> keep;  // 1 = kept, row-major

  static Mask ones(std::size_t h, std::size_t w) { return {h, w, std::vector<std::uint8_t>(h * w, 1)}; }
  std::size_t kept() const {
    std::size_t k = 0;
    for (auto v : keep) k += v;
    return k;
  }
  bool operator==(const Mask&) const = default;
};

inline Mask sample_mask(std::size_t h, std::size_t w, const DropBlockPlusConfig& cfg, Rng& rng) {
  cfg.validate(h, w);
  std::size_t bh = static_cast<std::size_t>(cfg.block_height);
  std::size_t bw = static_cast<std::size_t>(cfg.block_width);
  if (cfg.random_size) {
    bh = static_cast<std::size_t>(rng.uniform_int(1, cfg.block_height));
    bw = static_cast<std::size_t>(rng.uniform_int(1, cfg.block_width));
  }
  Mask mask = Mask::ones(h, w);
  for (std::size_t i = 0; i + bh <= h; ++i)
    for (std::size_t j = 0; j + bw <= w; ++j) {
      if (!rng.bernoulli(cfg.gamma)) continue;
      for (std::size_t di = 0; di < bh; ++di)
        for (std::size_t dj = 0; dj < bw; ++dj) mask.keep[(i + di) * w + j + dj] = 0;
    }
  if (mask.kept() == 0) return Mask::ones(h, w);
  return mask;
}

// One mask per sample, each from its own child stream.
inline std::vector<Mask> sample_masks(std::size_t n, std::size_t h, std::size_t w, const DropBlockPlusConfig& cfg,
                                      Rng& rng) {
  std::vector<Mask> masks;
  masks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng child = rng.split();
    masks.push_back(sample_mask(h, w, cfg, child));
  }
  return masks;
}

// y[n,c,i,j] = x[n,c,i,j] * mask_n[i,j] * (h*w / kept_n); identity when disabled.
inline Tensor apply_mask(const Tensor& x, std::span<const Mask> masks, const DropBlockPlusConfig& cfg) {
  if (!cfg.enabled) return x;
  if (x.rank() != 4) throw dimension_error("apply_mask: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  if (masks.size() != n) throw dimension_error("apply_mask: " + std::to_string(masks.size()) + " masks for batch of " +
                                               std::to_string(n));
  std::vector<double> factor(n * hw);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& m = masks[s];
    if (m.height != h || m.width != w)
      throw dimension_error("apply_mask: mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                            " does not match map " + std::to_string(h) + "x" + std::to_string(w));
    const std::size_t kept = m.kept();
    if (kept == 0) throw contract_error("apply_mask: mask keeps no cells");
    const double norm = static_cast<double>(hw) / static_cast<double>(kept);
    for (std::size_t q = 0; q < hw; ++q) factor[s * hw + q] = m.keep[q] ? norm : 0.0;
  }
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < hw; ++q) {
        const auto idx = (s * c + ch) * hw + q;
        out[idx] = xd[idx] * factor[s * hw + q];
      }
  return Tensor::make_result("dropblock", x.shape(), std::move(out), {x},
                             [x, n, c, hw, factor = std::move(factor)](std::span<const double> g) {
                               auto gx = grad_sink(x);
                               for (std::size_t s = 0; s < n; ++s)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t q = 0; q < hw; ++q) {
                                     const auto idx = (s * c + ch) * hw + q;
                                     gx[idx] += g[idx] * factor[s * hw + q];
                                   }
                             });
}

}  // namespace sona
