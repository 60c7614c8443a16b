#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sona/nn.hpp"
#include "sona/ops.hpp"
#include "sona/tensor.hpp"

namespace sona {

// D[i,j] = sqrt(max(|f_i - f_j|^2, 1e-12)) for features [B x d]. The clamp
// keeps the gradient finite at zero distance (it is zero there).
inline Tensor pairwise_euclidean(const Tensor& f) {
  if (f.rank() != 2) throw dimension_error("pairwise_euclidean: expected [B x d], got " + shape_str(f.shape()));
  constexpr double clamp = 1e-12;
  const std::size_t b = f.dim(0), d = f.dim(1);
  auto fd = f.data();
  std::vector<double> out(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = fd[i * d + k] - fd[j * d + k];
        sq += diff * diff;
      }
      out[i * b + j] = std::sqrt(std::max(sq, clamp));
    }
  auto result = Tensor::make_result("pairwise_euclidean", {b, b}, out, {f}, {});
  if (result.requires_grad()) {
    result.node()->backward = [f, b, d, dist = std::move(out)](std::span<const double> g) {
      auto gf = grad_sink(f);
      auto fd = f.data();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
          const double dij = dist[i * b + j];
          if (i == j || dij * dij <= clamp) continue;
          const double coeff = g[i * b + j] / dij;
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = fd[i * d + k] - fd[j * d + k];
            gf[i * d + k] += coeff * diff;
            gf[j * d + k] -= coeff * diff;
          }
        }
    };
  }
  return result;
}

// Mean over anchors of max(0, margin + max_pos D[a,p] - min_neg D[a,n]).
// Ties pick the lowest index. The anchor itself is not a positive.
inline Tensor batch_hard_triplet(const Tensor& features, const std::vector<int>& labels, double margin) {
  if (features.rank() != 2 || features.dim(0) != labels.size())
    throw dimension_error("batch_hard_triplet: " + std::to_string(labels.size()) + " labels for features " +
                          shape_str(features.shape()));
  const std::size_t b = labels.size();
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  for (const auto& [label, count] : counts) {
    if (count < 2) throw contract_error("batch_hard_triplet: label " + std::to_string(label) + " has a single occurrence");
  }
  if (counts.size() < 2) throw contract_error("batch_hard_triplet: batch has no negatives (single label)");

  const Tensor dist = pairwise_euclidean(features);
  auto dd = dist.data();
  std::vector<std::size_t> pos_idx(b), neg_idx(b);
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t best_pos = b, best_neg = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (best_pos == b || dd[a * b + j] > dd[a * b + best_pos]) best_pos = j;
      } else {
        if (best_neg == b || dd[a * b + j] < dd[a * b + best_neg]) best_neg = j;
      }
    }
    pos_idx[a] = a * b + best_pos;
    neg_idx[a] = a * b + best_neg;
  }
  const Tensor gap = sub(gather(dist, std::move(pos_idx)), gather(dist, std::move(neg_idx)));
  return mean(relu(add_scalar(gap, margin)));
}

// Mean over the batch of -sum_c q_c log softmax(logits)_c with
// q = (1 - eps) onehot + eps / C.
inline Tensor label_smoothed_ce(const Tensor& logits, const std::vector<int>& labels, double epsilon) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw dimension_error("label_smoothed_ce: " + std::to_string(labels.size()) + " labels for logits " +
                          shape_str(logits.shape()));
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw contract_error("label_smoothed_ce: epsilon must lie in [0, 1)");
  const std::size_t b = logits.dim(0), classes = logits.dim(1);
  std::vector<double> target(b * classes, epsilon / static_cast<double>(classes));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw dimension_error("label_smoothed_ce: label " + std::to_string(labels[i]) + " outside [0, " +
                            std::to_string(classes) + ")");
    target[i * classes + static_cast<std::size_t>(labels[i])] += 1.0 - epsilon;
  }
  const Tensor q(logits.shape(), std::move(target));
  return scale(sum(mul(log_softmax(logits), q)), -1.0 / static_cast<double>(b));
}

}  // namespace sona
