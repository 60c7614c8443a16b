#pragma once

// Eval-mode single-image forward timing, with and without SONA blocks.

#include <chrono>
#include <cmath>
#include <numeric>
#include <vector>

#include "sona/model.hpp"

namespace sona {

struct TimingStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
};

struct BenchReport {
  TimingStats with_sona;
  TimingStats without_sona;
  double overhead_pct = 0.0;
  std::size_t trials = 0;
};

inline TimingStats timing_stats(const std::vector<double>& ms) {
  TimingStats s;
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - s.mean_ms) * (v - s.mean_ms);
  s.std_ms = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  return s;
}

// Each trial times `repeats` consecutive forwards and records the per-forward
// average. The two models alternate which runs first in successive trials.
inline BenchReport bench(const ModelConfig& cfg, std::size_t trials, std::size_t warmup, std::size_t repeats = 5) {
  if (trials < 10) throw contract_error("bench: need at least 10 trials");
  if (repeats == 0) throw contract_error("bench: repeats must be positive");
  ModelConfig plain = cfg;
  plain.sona_sites.clear();
  ModelState with = build(cfg), without = build(plain);
  with.set_mode(Mode::eval);
  without.set_mode(Mode::eval);
  Rng rng(cfg.seed);
  std::vector<double> pixels(cfg.input_channels * cfg.input_height * cfg.input_width);
  for (auto& v : pixels) v = rng.uniform(-1.0, 1.0);
  const Tensor image({1, cfg.input_channels, cfg.input_height, cfg.input_width}, pixels);

  NoGradGuard no_grad;
  auto time_one = [&](ModelState& m) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < repeats; ++r) forward_features(m, image);
    const std::chrono::duration<double, std::milli> dt = std::chrono::steady_clock::now() - start;
    return dt.count() / static_cast<double>(repeats);
  };
  for (std::size_t i = 0; i < warmup; ++i) {
    time_one(with);
    time_one(without);
  }
  std::vector<double> tw, to;
  for (std::size_t t = 0; t < trials; ++t) {
    if (t % 2 == 0) {
      tw.push_back(time_one(with));
      to.push_back(time_one(without));
    } else {
      to.push_back(time_one(without));
      tw.push_back(time_one(with));
    }
  }
  BenchReport r;
  r.trials = trials;
  r.with_sona = timing_stats(tw);
  r.without_sona = timing_stats(to);
  r.overhead_pct = 100.0 * (r.with_sona.mean_ms - r.without_sona.mean_ms) / r.without_sona.mean_ms;
  return r;
}

}  // namespace sona
