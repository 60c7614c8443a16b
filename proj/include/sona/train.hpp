#pragma once

#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "sona/data.hpp"
#include "sona/losses.hpp"
#include "sona/model.hpp"
#include "sona/optim.hpp"

namespace sona {

// Warm-up then step decay over a 400-epoch reference run; every breakpoint
// scales by total_epochs / 400. With s = total_epochs / 400:
//   [0, 50s)    base * (1 + floor(epoch / 5s))
//   [50s, 200s) 10 * base
//   [200s, 300s) base
//   [300s, ...) base / 10
inline double lr_schedule(std::size_t epoch, std::size_t total_epochs, double base_lr = 1e-4) {
  if (total_epochs == 0 || epoch >= total_epochs)
    throw contract_error("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(total_epochs) + ")");
  const double s = static_cast<double>(total_epochs) / 400.0;
  const auto e = static_cast<double>(epoch);
  if (e < 50.0 * s) return base_lr * std::min(10.0, 1.0 + std::floor(e / (5.0 * s)));
  if (e < 200.0 * s) return 10.0 * base_lr;
  if (e < 300.0 * s) return base_lr;
  return base_lr / 10.0;
}

struct LossWeights {
  double global_triplet = 1.0;
  double global_ce = 1.0;
  double local_triplet = 1.0;
  double local_ce = 1.0;
};

struct TrainConfig {
  std::size_t p = 8;
  std::size_t k = 4;
  double margin = 0.3;
  double epsilon = 0.1;
  std::size_t epochs = 100;
  std::size_t max_steps = 200;  // 0 = no cap
  double base_lr = 1e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  LossWeights weights;
  AugmentConfig augment;

  void validate() const {
    if (p < 2 || k < 2) throw contract_error("train: P and K must both be at least 2");
    if (epochs == 0) throw contract_error("train: epochs must be positive");
    if (!(base_lr >= 0.0)) throw contract_error("train: base learning rate must be nonnegative");
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw contract_error("train: epsilon must lie in [0, 1)");
  }
};

inline constexpr std::array<const char*, 4> kLossTerms{"global_triplet", "global_ce", "local_triplet", "local_ce"};

struct LossTerms {
  std::array<Tensor, 4> terms;  // in kLossTerms order
  Tensor total;
};

inline LossTerms compute_losses(const TrainOutputs& out, const std::vector<int>& labels, const TrainConfig& cfg) {
  LossTerms l;
  l.terms = {batch_hard_triplet(out.global_feat, labels, cfg.margin),
             label_smoothed_ce(out.global_logits, labels, cfg.epsilon),
             batch_hard_triplet(out.local_feat, labels, cfg.margin),
             label_smoothed_ce(out.local_logits, labels, cfg.epsilon)};
  const std::array<double, 4> w{cfg.weights.global_triplet, cfg.weights.global_ce, cfg.weights.local_triplet,
                                cfg.weights.local_ce};
  l.total = scale(l.terms[0], w[0]);
  for (std::size_t i = 1; i < 4; ++i) l.total = add(l.total, scale(l.terms[i], w[i]));
  return l;
}

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double lr = 0.0;
  std::array<double, 4> terms{};  // batch means
  double total = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
  double first_total = 0.0;  // loss of the very first batch
  double last_total = 0.0;   // loss of the very last batch
  std::array<double, 4> last_terms{};
};

inline std::string format_epoch(const EpochLog& e) {
  std::string s = "epoch " + std::to_string(e.epoch) + " steps " + std::to_string(e.steps) + " lr " + format_real(e.lr);
  for (std::size_t i = 0; i < 4; ++i) s += std::string(" ") + kLossTerms[i] + " " + format_real(e.terms[i]);
  return s + " total " + format_real(e.total);
}

// Dense class indices for the identities present in `samples`.
inline std::map<int, int> class_map(const Dataset& data, const std::vector<std::size_t>& samples) {
  std::map<int, int> m;
  for (std::size_t i : samples) m.emplace(data[i].person_id, 0);
  int next = 0;
  for (auto& [pid, cls] : m) cls = next++;
  return m;
}

inline std::size_t steps_per_epoch(std::size_t n_images, const TrainConfig& cfg) {
  const std::size_t batch = cfg.p * cfg.k;
  return std::max<std::size_t>(1, (n_images + batch - 1) / batch);
}

// Trains on data[samples]. Stops at cfg.epochs or after cfg.max_steps
// optimizer steps, whichever comes first.
inline TrainResult train(ModelState& model, const Dataset& data, const std::vector<std::size_t>& samples,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const auto classes = class_map(data, samples);
  if (classes.size() > model.config.num_classes)
    throw contract_error("train: " + std::to_string(classes.size()) + " identities but the model has " +
                         std::to_string(model.config.num_classes) + " classes");
  std::vector<int> labels;
  for (std::size_t i : samples) labels.push_back(classes.at(data[i].person_id));

  model.set_mode(Mode::train);
  Adam opt(model.params.trainable(), AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed);
  TrainResult result;
  const std::size_t per_epoch = steps_per_epoch(samples.size(), cfg);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps && result.steps >= cfg.max_steps) break;
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_schedule(epoch, cfg.epochs, cfg.base_lr);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      if (cfg.max_steps && result.steps >= cfg.max_steps) break;
      const auto batch = pk_sample(labels, cfg.p, cfg.k, rng);
      std::vector<Image> images;
      std::vector<int> batch_labels;
      for (std::size_t j : batch) {
        images.push_back(augment(data[samples[j]].image, cfg.augment, true, rng));
        batch_labels.push_back(labels[j]);
      }
      const auto out = forward_train(model, stack(images), rng);
      const auto losses = compute_losses(out, batch_labels, cfg);
      for (std::size_t t = 0; t < 4; ++t)
        if (!std::isfinite(losses.terms[t].item()))
          throw numeric_error("train: non-finite " + std::string(kLossTerms[t]) + " loss at epoch " +
                              std::to_string(epoch) + " batch " + std::to_string(b));
      if (!std::isfinite(losses.total.item()))
        throw numeric_error("train: non-finite total loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b));
      opt.zero_grad();
      backward(losses.total);
      opt.step(entry.lr);
      if (result.steps == 0) result.first_total = losses.total.item();
      result.last_total = losses.total.item();
      for (std::size_t t = 0; t < 4; ++t) {
        entry.terms[t] += losses.terms[t].item();
        result.last_terms[t] = losses.terms[t].item();
      }
      entry.total += losses.total.item();
      ++entry.steps;
      ++result.steps;
    }
    if (entry.steps == 0) break;
    for (auto& v : entry.terms) v /= static_cast<double>(entry.steps);
    entry.total /= static_cast<double>(entry.steps);
    if (log) *log << format_epoch(entry) << '\n';
    result.epochs.push_back(entry);
  }
  return result;
}

}  // namespace sona
