#pragma once

// Differentiable tensor primitives that are not specific to neural layers.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "sona/gemm.hpp"
#include "sona/tensor.hpp"

namespace sona {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw dimension_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

inline void accumulate(std::span<double> dst, std::span<const double> src, double factor = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (auto ga = grad_sink(a); !ga.empty()) detail::accumulate(ga, g);
    if (auto gb = grad_sink(b); !gb.empty()) detail::accumulate(gb, g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (auto ga = grad_sink(a); !ga.empty()) detail::accumulate(ga, g);
    if (auto gb = grad_sink(b); !gb.empty()) detail::accumulate(gb, g, -1.0);
  });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    auto ad = a.data();
    auto bd = b.data();
    if (auto ga = grad_sink(a); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bd[i];
    if (auto gb = grad_sink(b); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ad[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return Tensor::make_result("scale", a.shape(), std::move(out), {a}, [a, s](std::span<const double> g) {
    detail::accumulate(grad_sink(a), g, s);
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return Tensor::make_result("add_scalar", a.shape(), std::move(out), {a},
                             [a](std::span<const double> g) { detail::accumulate(grad_sink(a), g); });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result("sum", {1}, {s}, {a}, [a](std::span<const double> g) {
    for (auto& v : grad_sink(a)) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Same data, new shape. Gradient passes through unchanged.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw dimension_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result("reshape", std::move(shape), std::move(out), {a},
                             [a](std::span<const double> g) { detail::accumulate(grad_sink(a), g); });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw dimension_error("transpose: expected a matrix, got " + shape_str(a.shape()));
  const auto r = a.dim(0), c = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return Tensor::make_result("transpose", {c, r}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

// Matrix product of [m x k] and [k x n], or a batched product of
// [b x m x k] and [b x k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0);
  const bool plain = a.rank() == 2 && b.rank() == 2;
  if ((!batched && !plain) || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2])
    throw dimension_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s)
    gemm::nn(m, n, k, a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n);
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return Tensor::make_result("matmul", std::move(shape), std::move(out), {a, b},
                             [a, b, batch, m, n, k](std::span<const double> g) {
                               auto ga = grad_sink(a);
                               auto gb = grad_sink(b);
                               for (std::size_t s = 0; s < batch; ++s) {
                                 const double* gs = g.data() + s * m * n;
                                 if (!ga.empty())  // dA = G * B^T
                                   gemm::nt(m, k, n, gs, b.data().data() + s * k * n, ga.data() + s * m * k);
                                 if (!gb.empty())  // dB = A^T * G
                                   gemm::tn(k, n, m, a.data().data() + s * m * k, gs, gb.data() + s * k * n);
                               }
                             });
}

// Picks elements by flat index into a 1-D tensor.
inline Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
  if (indices.empty()) throw dimension_error("gather: empty index list");
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= a.numel())
      throw dimension_error("gather: index " + std::to_string(indices[i]) + " out of range for " +
                            shape_str(a.shape()));
    out[i] = a.data()[indices[i]];
  }
  const auto n = indices.size();
  return Tensor::make_result("gather", {n}, std::move(out), {a},
                             [a, idx = std::move(indices)](std::span<const double> g) {
                               auto ga = grad_sink(a);
                               for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
                             });
}

// [r x c1] ++ [r x c2] -> [r x (c1 + c2)]
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw dimension_error("concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  const auto r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> out(r * (ca + cb));
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return Tensor::make_result("concat_cols", {r, ca + cb}, std::move(out), {a, b},
                             [a, b, r, ca, cb](std::span<const double> g) {
                               auto ga = grad_sink(a);
                               auto gb = grad_sink(b);
                               for (std::size_t i = 0; i < r; ++i) {
                                 const double* row = g.data() + i * (ca + cb);
                                 if (!ga.empty())
                                   for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += row[j];
                                 if (!gb.empty())
                                   for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += row[ca + j];
                               }
                             });
}

// [n x c x h x w] -> [n x (h*w) x c]: one row per spatial position.
inline Tensor to_position_major(const Tensor& x) {
  if (x.rank() != 4) throw dimension_error("to_position_major: expected NCHW, got " + shape_str(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(s * hw + p) * c + ch] = xd[(s * c + ch) * hw + p];
  return Tensor::make_result("to_position_major", {n, hw, c}, std::move(out), {x},
                             [x, n, c, hw](std::span<const double> g) {
                               auto gx = grad_sink(x);
                               for (std::size_t s = 0; s < n; ++s)
                                 for (std::size_t ch = 0; ch < c; ++ch)
                                   for (std::size_t p = 0; p < hw; ++p)
                                     gx[(s * c + ch) * hw + p] += g[(s * hw + p) * c + ch];
                             });
}

// [n x (h*w) x c] -> [n x c x h x w]
inline Tensor to_channel_major(const Tensor& x, std::size_t h, std::size_t w) {
  if (x.rank() != 3 || x.dim(1) != h * w)
    throw dimension_error("to_channel_major: cannot fold " + shape_str(x.shape()) + " into " +
                          std::to_string(h) + "x" + std::to_string(w));
  const auto n = x.dim(0), hw = x.dim(1), c = x.dim(2);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[(s * c + ch) * hw + p] = xd[(s * hw + p) * c + ch];
  return Tensor::make_result("to_channel_major", {n, c, h, w}, std::move(out), {x},
                             [x, n, c, hw](std::span<const double> g) {
                               auto gx = grad_sink(x);
                               for (std::size_t s = 0; s < n; ++s)
                                 for (std::size_t p = 0; p < hw; ++p)
                                   for (std::size_t ch = 0; ch < c; ++ch)
                                     gx[(s * hw + p) * c + ch] += g[(s * c + ch) * hw + p];
                             });
}

// Log-softmax over the last dimension, max-shifted.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = in[j] - lse;
  }
  auto result = Tensor::make_result("log_softmax", x.shape(), out, {x}, {});
  if (result.requires_grad()) {
    result.node()->backward = [x, out = std::move(out), rows, k](std::span<const double> g) {
      auto gx = grad_sink(x);
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
        for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] - std::exp(out[r * k + j]) * gs;
      }
    };
  }
  return result;
}

}  // namespace sona
