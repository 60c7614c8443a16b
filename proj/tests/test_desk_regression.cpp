#include <gtest/gtest.h>

#include "sona/config.hpp"
#include "sona/train.hpp"

using namespace sona;

// Seeded SONA2-Net desk run with pinned loss values.
TEST(DeskTraining, LossFallsAndTripletsAreSatisfied) {
  const auto cfg = parse_config("sona.sites = 2\n");
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  const auto r = train(model, data, split.train, cfg.train);
  ASSERT_LE(r.steps, 200u);
  const auto& last = r.epochs.back();
  EXPECT_LT(r.last_total, r.first_total);
  EXPECT_LT(last.terms[0], cfg.train.margin / 2);
  EXPECT_LT(last.terms[2], cfg.train.margin / 2);

  EXPECT_NEAR(r.first_total, 8.3470818667559801, 1e-9);
  EXPECT_NEAR(r.last_total, 1.6724809091230548, 1e-6);
  EXPECT_NEAR(last.total, 1.7015129994874831, 1e-6);
}
