#pragma once

// Finite-difference checks over every differentiable building block, shared
// by the command-line tool and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "sona/attention.hpp"
#include "sona/dropblock.hpp"
#include "sona/grad_check.hpp"
#include "sona/losses.hpp"
#include "sona/model.hpp"

namespace sona {

struct GradSuiteEntry {
  std::string module;
  std::string name;
  double max_rel_error = 0.0;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

inline Tensor suite_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline void randomize(Tensor& t, Rng& rng, double bound) {
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

}  // namespace detail

inline std::vector<std::string> grad_suite_modules() { return {"nn", "sona", "dropblock", "losses", "model"}; }

// module: one of grad_suite_modules() or "all".
inline std::vector<GradSuiteEntry> run_grad_suite(const std::string& module) {
  std::vector<GradSuiteEntry> out;
  const bool all = module == "all";
  bool known = all;
  for (const auto& m : grad_suite_modules()) known = known || m == module;
  if (!known) throw contract_error("gradcheck: unknown module '" + module + "'");
  auto want = [&](const char* m) { return all || module == m; };
  auto record = [&](const char* m, const char* name, const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                    double eps = 1e-6) { out.push_back({m, name, grad_check_all(f, std::move(wrt), eps).max_rel_error}); };
  Rng rng(2024);
  using detail::suite_tensor;

  if (want("nn")) {
    auto x = suite_tensor({2, 3, 5, 6}, rng);
    auto w = suite_tensor({4, 3, 3, 3}, rng);
    auto b = suite_tensor({4}, rng);
    Conv2dParams conv{w, b, {1, 1}, {1, 1}, {1, 1}};
    Conv2dParams strided{w, b, {2, 1}, {2, 1}, {2, 1}};
    auto probe = suite_tensor({2, 4, 5, 6}, rng, false);
    record("nn", "conv2d", [&] { return sum(mul(conv2d(x, conv), probe)); }, {x, w, b});
    record("nn", "conv2d strided dilated", [&] { return sum(mul(conv2d(x, strided), conv2d(x, strided))); }, {x, w, b});

    auto bx = suite_tensor({4, 3, 2, 2}, rng);
    auto bn = BatchNormState::create(3);
    detail::randomize(bn.scale, rng, 1.5);
    auto bprobe = suite_tensor({4, 3, 2, 2}, rng, false);
    record("nn", "batch_norm train", [&] { return sum(mul(batch_norm(bx, bn), bprobe)); }, {bx, bn.scale, bn.shift});
    auto bn_eval = BatchNormState::create(3);
    bn_eval.mode = Mode::eval;
    record("nn", "batch_norm eval", [&] { return sum(mul(batch_norm(bx, bn_eval), bprobe)); },
           {bx, bn_eval.scale, bn_eval.shift});

    auto a = suite_tensor({3, 7}, rng);
    auto aprobe = suite_tensor({3, 7}, rng, false);
    record("nn", "relu", [&] { return sum(mul(relu(a), aprobe)); }, {a});
    record("nn", "leaky_relu", [&] { return sum(mul(leaky_relu(a, 0.01), aprobe)); }, {a});
    record("nn", "softmax_rows", [&] { return sum(mul(softmax_rows(a), aprobe)); }, {a});

    auto px = suite_tensor({2, 3, 3, 4}, rng);
    auto pprobe = suite_tensor({2, 3}, rng, false);
    record("nn", "global_pool avg", [&] { return sum(mul(reshape(global_pool(px, PoolKind::avg), {2, 3}), pprobe)); },
           {px});
    record("nn", "global_pool max", [&] { return sum(mul(reshape(global_pool(px, PoolKind::max), {2, 3}), pprobe)); },
           {px});

    BottleneckParams blk;
    blk.reduce = make_conv(8, 2, 1, rng);
    blk.spatial = make_conv(2, 2, 3, rng, false, 1, 2);
    blk.expand = make_conv(2, 8, 1, rng);
    blk.reduce_bn = BatchNormState::create(2);
    blk.spatial_bn = BatchNormState::create(2);
    blk.expand_bn = BatchNormState::create(8);
    auto bbx = suite_tensor({2, 8, 4, 4}, rng);
    auto bbprobe = suite_tensor({2, 8, 4, 4}, rng, false);
    record("nn", "bottleneck", [&] { return sum(mul(bottleneck(bbx, blk), bbprobe)); },
           {bbx, blk.reduce.weight, blk.spatial.weight, blk.expand.weight});
  }

  if (want("sona")) {
    auto theta = suite_tensor({6, 4}, rng);
    auto sprobe = suite_tensor({6, 6}, rng, false);
    record("sona", "spatial_covariance", [&] { return sum(mul(spatial_covariance(theta), sprobe)); }, {theta});

    SonaConfig cfg{4, 2};
    auto params = make_sona_params(cfg, rng);
    detail::randomize(params.p.weight, rng, 0.5);
    params.theta_bn.mode = Mode::eval;
    auto x = suite_tensor({1, 4, 3, 2}, rng);
    record("sona", "sona_forward (eval BN)", [&] { return sum(sona_forward(x, params, cfg)); },
           {x, params.theta.weight, params.g.weight, params.p.weight, params.theta_bn.scale});
    auto train_params = make_sona_params(cfg, rng);
    detail::randomize(train_params.p.weight, rng, 0.5);
    auto xt = suite_tensor({2, 4, 2, 3}, rng);
    auto probe = suite_tensor({2, 4, 2, 3}, rng, false);
    record("sona", "sona_forward (train BN)", [&] { return sum(mul(sona_forward(xt, train_params, cfg), probe)); },
           {xt, train_params.theta.weight, train_params.g.weight, train_params.p.weight});
  }

  if (want("dropblock")) {
    DropBlockPlusConfig cfg{0.2, 2, 2};
    auto masks = sample_masks(1, 4, 4, cfg, rng);
    auto x = suite_tensor({1, 2, 4, 4}, rng);
    auto probe = suite_tensor({1, 2, 4, 4}, rng, false);
    record("dropblock", "apply_mask (frozen)", [&] { return sum(mul(apply_mask(x, masks, cfg), probe)); }, {x});
  }

  if (want("losses")) {
    auto f = suite_tensor({8, 5}, rng);
    const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3};
    record("losses", "batch_hard_triplet", [&] { return batch_hard_triplet(f, labels, 0.3); }, {f});
    auto logits = suite_tensor({8, 4}, rng);
    record("losses", "label_smoothed_ce", [&] { return label_smoothed_ce(logits, labels, 0.1); }, {logits});
  }

  if (want("model")) {
    ModelConfig cfg;
    cfg.input_height = 16;
    cfg.input_width = 8;
    cfg.backbone = {4, 3, 2, {{1, 4, 2, 1}, {1, 8, 2, 1}, {1, 8, 1, 2}, {1, 16, 1, 2}}};
    cfg.dropblock = {0.3, 1, 1, true, false};
    cfg.global_dim = 4;
    cfg.local_dim = 8;
    cfg.num_classes = 2;
    cfg.sona_sites = {2};
    auto m = build(cfg);
    detail::randomize(m.sona.at(2).p.weight, rng, 0.5);
    auto images = suite_tensor({4, 3, 16, 8}, rng, false);
    const std::vector<int> labels{0, 0, 1, 1};
    auto loss = [&] {
      Rng mask_rng(5);
      const auto o = forward_train(m, images, mask_rng);
      return add(add(batch_hard_triplet(o.global_feat, labels, 0.3), label_smoothed_ce(o.global_logits, labels, 0.1)),
                 add(batch_hard_triplet(o.local_feat, labels, 0.3), label_smoothed_ce(o.local_logits, labels, 0.1)));
    };
    record("model", "full network (4-term loss)", loss,
           {m.stem.weight, m.stages[1][0].spatial.weight, m.sona.at(2).theta.weight, m.sona.at(2).p.weight,
            m.global_reduce.weight, m.local_block.reduce.weight, m.local_reduce.weight, m.global_classifier,
            m.local_classifier});
  }
  return out;
}

}  // namespace sona
