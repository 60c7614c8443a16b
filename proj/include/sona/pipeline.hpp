#pragma once

// Dataset-level glue: embedding whole splits and running a complete
// train-then-evaluate experiment.

#include <chrono>
#include <ostream>
#include <vector>

#include "sona/config.hpp"
#include "sona/data.hpp"
#include "sona/model.hpp"
#include "sona/reid_eval.hpp"
#include "sona/train.hpp"

namespace sona {

inline std::vector<EmbeddingRecord> embed_samples(ModelState& model, const Dataset& data,
                                                  const std::vector<std::size_t>& samples, const AugmentConfig& aug,
                                                  bool flip_average, std::size_t chunk = 16) {
  model.set_mode(Mode::eval);
  Rng unused(0);
  std::vector<EmbeddingRecord> out;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    std::vector<Image> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(augment(data[samples[i]].image, aug, false, unused));
    const Tensor e = embed_batch(model, stack(images), flip_average);
    const std::size_t dim = e.dim(1);
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = data[samples[i]];
      const auto row = e.data().subspan((i - start) * dim, dim);
      out.push_back({s.person_id, s.camera_id, {row.begin(), row.end()}});
    }
  }
  return out;
}

// Attention of one reference position at a SONA site, as an [h x w] map over
// that site's feature grid. `image` must already be normalized.
inline Tensor model_heatmap(ModelState& model, const Image& image, int site, std::size_t ref_row,
                            std::size_t ref_col) {
  if (!model.sona.count(site)) throw contract_error("heatmap: model has no SONA block after stage " + std::to_string(site));
  model.set_mode(Mode::eval);
  NoGradGuard no_grad;
  ForwardTrace trace;
  forward_features(model, stack({image}), nullptr, &trace);
  const auto& grid = trace.stage_shapes.at(static_cast<std::size_t>(site));
  const std::size_t h = grid[2], w = grid[3], hw = h * w;
  if (ref_row >= h || ref_col >= w)
    throw dimension_error("heatmap: reference (" + std::to_string(ref_row) + "," + std::to_string(ref_col) +
                          ") outside the " + std::to_string(h) + "x" + std::to_string(w) + " feature grid");
  const double* row = trace.attention.at(site).data().data() + (ref_row * w + ref_col) * hw;
  return Tensor({h, w}, std::vector<double>(row, row + hw));
}

struct ExperimentResult {
  TrainResult train;
  RankingResult ranking;
  double seconds = 0.0;
  std::size_t parameters = 0;
};

inline ExperimentResult run_experiment(const RunConfig& cfg, const Dataset& data, const Split& split,
                                       std::ostream* log = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult r;
  ModelState model = build(cfg.model);
  r.parameters = model.parameter_count();
  r.train = train(model, data, split.train, cfg.train, log);
  const auto q = embed_samples(model, data, split.query, cfg.train.augment, cfg.eval.flip_average);
  const auto g = embed_samples(model, data, split.gallery, cfg.train.augment, cfg.eval.flip_average);
  r.ranking = evaluate(q, g, cfg.eval.max_rank, cfg.eval.metric);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace sona
