#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "sona/checkpoint.hpp"
#include "sona/config.hpp"
#include "sona/data.hpp"
#include "sona/grad_suite.hpp"
#include "sona/image.hpp"
#include "sona/pipeline.hpp"
#include "sona/train.hpp"

using namespace sona;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sona_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_run() {
  return parse_config(
      "data.ids = 6\n"
      "data.images_per_id = 4\n"
      "data.height = 32\n"
      "data.width = 16\n"
      "data.train_ids = 4\n"
      "train.P = 4\n"
      "train.K = 2\n"
      "train.max_steps = 3\n"
      "train.epochs = 10\n"
      "augment.cutout = 4\n");
}

}  // namespace

TEST(Config, DefaultsFinalize) {
  const auto c = parse_config("");
  EXPECT_EQ(c.model.num_classes, c.train_ids);
  EXPECT_EQ(c.model.input_height, c.data.height);
  EXPECT_EQ(c.model.backbone.stages.size(), 4u);
}

TEST(Config, UnknownKeyNamesLine) {
  try {
    parse_config("# comment\n\ntrain.P = 4\ntrain.bogus = 1\n");
    FAIL();
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("train.bogus"), std::string::npos);
  }
}

TEST(Config, MalformedValues) {
  EXPECT_THROW(parse_config("train.P = four\n"), format_error);
  EXPECT_THROW(parse_config("augment.flip = maybe\n"), format_error);
  EXPECT_THROW(parse_config("augment.mean = 1,2\n"), format_error);
  EXPECT_THROW(parse_config("no equals sign\n"), format_error);
  EXPECT_THROW(parse_config("model.backbone = tiny\n"), format_error);
  EXPECT_THROW(parse_config("eval.metric = manhattan\n"), format_error);
}

TEST(Config, ContractViolations) {
  EXPECT_THROW(parse_config("data.train_ids = 16\n"), contract_error);
  EXPECT_THROW(parse_config("train.P = 9\n"), contract_error);
  EXPECT_THROW(parse_config("bench.trials = 3\n"), contract_error);
  EXPECT_THROW(parse_config("sona.sites = 7\n"), std::exception);
}

TEST(Config, TextRoundTrip) {
  const auto c = parse_config(
      "sona.sites = 2,3\ndropblock.gamma = 0.25\naugment.mean = 0.1,0.2,0.3\neval.metric = cosine\n"
      "train.lr = 0.00035\nmodel.backbone = desk\n");
  const std::string text = to_text(c);
  const auto d = parse_config(text);
  EXPECT_EQ(to_text(d), text);
  EXPECT_EQ(d.model.sona_sites, (std::vector<int>{2, 3}));
  EXPECT_EQ(d.model.dropblock.gamma, 0.25);
  EXPECT_EQ(d.train.augment.mean[2], 0.3);
  EXPECT_EQ(d.eval.metric, DistanceMetric::cosine);
  EXPECT_EQ(d.train.base_lr, 0.00035);
  EXPECT_TRUE(parse_config("sona.sites = none\n").model.sona_sites.empty());
}

TEST(LrSchedule, FullScaleValues) {
  EXPECT_EQ(lr_schedule(0, 400), 1e-4);
  EXPECT_EQ(lr_schedule(4, 400), 1e-4);
  EXPECT_EQ(lr_schedule(5, 400), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(49, 400), 1e-3);
  EXPECT_EQ(lr_schedule(50, 400), 1e-3);
  EXPECT_EQ(lr_schedule(199, 400), 1e-3);
  EXPECT_EQ(lr_schedule(200, 400), 1e-4);
  EXPECT_EQ(lr_schedule(299, 400), 1e-4);
  EXPECT_EQ(lr_schedule(300, 400), 1e-5);
  EXPECT_EQ(lr_schedule(399, 400), 1e-5);
}

TEST(LrSchedule, ScalesWithLength) {
  EXPECT_EQ(lr_schedule(10, 40), 1e-3);
  EXPECT_EQ(lr_schedule(20, 40), 1e-4);
  EXPECT_EQ(lr_schedule(30, 40), 1e-5);
  EXPECT_EQ(lr_schedule(0, 40, 2.0), 2.0);
}

TEST(LrSchedule, OutOfRange) {
  EXPECT_THROW(lr_schedule(400, 400), contract_error);
  EXPECT_THROW(lr_schedule(0, 0), contract_error);
}

TEST(Synthetic, SizesAndLabels) {
  SyntheticConfig cfg;
  const auto d = gen_synthetic(cfg);
  ASSERT_EQ(d.size(), 128u);
  std::map<int, int> per_id;
  for (const auto& s : d) {
    ++per_id[s.person_id];
    EXPECT_EQ(s.image.height, 64u);
    EXPECT_EQ(s.image.width, 32u);
    for (double v : s.image.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  EXPECT_EQ(per_id.size(), 16u);
  for (auto [id, n] : per_id) EXPECT_EQ(n, 8);
}

TEST(Synthetic, CleanImagesOfOneIdentityCoincide) {
  SyntheticConfig cfg;
  cfg.noise = 0.0;
  cfg.camera_strength = 0.0;
  cfg.max_shift = 0;
  const auto d = gen_synthetic(cfg);
  for (std::size_t i = 1; i < cfg.images_per_id; ++i) EXPECT_EQ(d[0].image, d[i].image);
  EXPECT_NE(d[0].image, d[cfg.images_per_id].image);
}

TEST(Synthetic, Deterministic) {
  SyntheticConfig cfg;
  cfg.num_ids = 4;
  const auto a = gen_synthetic(cfg), b = gen_synthetic(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image, b[i].image);
  cfg.seed = 8;
  EXPECT_NE(gen_synthetic(cfg)[0].image, a[0].image);
}

TEST(Synthetic, NearestCentroidSeparates) {
  const auto d = gen_synthetic(SyntheticConfig{});
  std::map<int, std::vector<double>> centroid;
  std::map<int, int> count;
  for (const auto& s : d) {
    if (s.camera_id != 0) continue;
    auto& c = centroid[s.person_id];
    if (c.empty()) c.assign(s.image.data.size(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += s.image.data[i];
    ++count[s.person_id];
  }
  for (auto& [id, c] : centroid)
    for (auto& v : c) v /= count[id];
  int correct = 0, total = 0;
  for (const auto& s : d) {
    if (s.camera_id == 0) continue;
    int best = -1;
    double best_d = 1e300;
    for (const auto& [id, c] : centroid) {
      double dist = 0.0;
      for (std::size_t i = 0; i < c.size(); ++i) dist += (c[i] - s.image.data[i]) * (c[i] - s.image.data[i]);
      if (dist < best_d) best_d = dist, best = id;
    }
    correct += best == s.person_id;
    ++total;
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.95);
}

TEST(Synthetic, InvalidConfig) {
  SyntheticConfig cfg;
  cfg.cameras = 1;
  EXPECT_THROW(gen_synthetic(cfg), contract_error);
}

TEST(Split, IdentityDisjoint) {
  const auto d = gen_synthetic(SyntheticConfig{});
  const auto s = split_by_identity(d, 8);
  EXPECT_EQ(s.train.size(), 64u);
  EXPECT_EQ(s.query.size(), 16u);
  EXPECT_EQ(s.gallery.size(), 48u);
  std::set<int> train_ids, test_ids;
  for (auto i : s.train) train_ids.insert(d[i].person_id);
  for (auto i : s.query) test_ids.insert(d[i].person_id);
  for (auto i : s.gallery) test_ids.insert(d[i].person_id);
  for (int id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
  // Every query has a cross-camera match in the gallery.
  for (auto q : s.query) {
    bool found = false;
    for (auto g : s.gallery) found |= d[g].person_id == d[q].person_id && d[g].camera_id != d[q].camera_id;
    EXPECT_TRUE(found);
  }
}

TEST(Pnm, RoundTripBinaryColor) {
  Image img = Image::blank(3, 5, 4);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i * 7 % 256) / 255.0;
  std::stringstream ss;
  write_pnm(ss, img);
  EXPECT_EQ(read_pnm(ss), img);
}

TEST(Pnm, AsciiWithComments) {
  std::stringstream ss("P2\n# a comment\n2 2 # trailing\n4\n0 1\n2 4\n");
  const auto img = read_pnm(ss);
  EXPECT_EQ(img.channels, 1u);
  EXPECT_EQ(img.at(0, 1, 0), 0.5);
  EXPECT_EQ(img.at(0, 1, 1), 1.0);
  std::stringstream col("P3 1 1 255 255 0 51");
  const auto c = read_pnm(col);
  EXPECT_EQ(c.at(2, 0, 0), 0.2);
}

TEST(Pnm, Errors) {
  std::stringstream bad("P7 1 1 255");
  EXPECT_THROW(read_pnm(bad), format_error);
  std::stringstream trunc("P5 4 4 255\nab");
  EXPECT_THROW(read_pnm(trunc), format_error);
  EXPECT_THROW(read_pnm("/nonexistent/x.ppm"), format_error);
}

TEST(Dataset, DiskRoundTrip) {
  SyntheticConfig cfg;
  cfg.num_ids = 4;
  cfg.images_per_id = 3;
  const auto d = gen_synthetic(cfg);
  const auto s = split_by_identity(d, 2);
  const auto dir = scratch("dataset");
  write_dataset(dir, d, s);
  const auto all = read_list(dir / "manifest.tsv");
  ASSERT_EQ(all.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(all[i].image, d[i].image);
    EXPECT_EQ(all[i].person_id, d[i].person_id);
    EXPECT_EQ(all[i].camera_id, d[i].camera_id);
  }
  EXPECT_EQ(read_list(dir / "query.tsv").size(), s.query.size());
  fs::remove_all(dir);
}

TEST(PkSample, StructureAndReplacement) {
  const std::vector<int> labels{0, 0, 0, 1, 1, 2};
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = pk_sample(labels, 2, 2, rng);
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(labels[b[0]], labels[b[1]]);
    EXPECT_EQ(labels[b[2]], labels[b[3]]);
    EXPECT_NE(labels[b[0]], labels[b[2]]);
    if (labels[b[0]] != 2) EXPECT_NE(b[0], b[1]);
    if (labels[b[0]] == 2) EXPECT_EQ(b[0], 5u);
  }
  EXPECT_THROW(pk_sample(labels, 4, 2, rng), contract_error);
}

TEST(PkSample, IdentitiesUniform) {
  std::vector<int> labels;
  for (int id = 0; id < 4; ++id)
    for (int n = 0; n < 4; ++n) labels.push_back(id);
  Rng rng(11);
  std::map<int, int> hits;
  const int draws = 1000;
  for (int t = 0; t < draws; ++t)
    for (auto i : pk_sample(labels, 2, 2, rng)) ++hits[labels[i]];
  // Each identity appears in a batch with probability 1/2 and contributes 2 images.
  const double mean = draws * 0.5 * 2, sd = 2 * std::sqrt(draws * 0.25);
  for (auto [id, n] : hits) EXPECT_LT(std::abs(n - mean), 3 * sd) << id;
}

TEST(Augment, FlipTwiceIsIdentity) {
  const auto d = gen_synthetic(SyntheticConfig{.num_ids = 2, .images_per_id = 2});
  EXPECT_EQ(flip_horizontal(flip_horizontal(d[0].image)), d[0].image);
  EXPECT_NE(flip_horizontal(d[0].image), d[0].image);
}

TEST(Augment, NormalizeToZeroMean) {
  const auto img = gen_synthetic(SyntheticConfig{.num_ids = 2, .images_per_id = 2})[0].image;
  AugmentConfig cfg;
  cfg.stddev = {1.0, 1.0, 1.0};
  const std::size_t hw = img.height * img.width;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t q = 0; q < hw; ++q) m += img.data[c * hw + q];
    cfg.mean[c] = m / static_cast<double>(hw);
  }
  const auto out = normalize(img, cfg);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t q = 0; q < hw; ++q) m += out.data[c * hw + q];
    EXPECT_NEAR(m / static_cast<double>(hw), 0.0, 1e-12);
  }
}

TEST(Augment, CutoutZeroesOneSquare) {
  Image img = Image::blank(3, 16, 8);
  for (auto& v : img.data) v = 0.75;
  AugmentConfig cfg;
  cfg.flip = false;
  cfg.normalize = false;
  cfg.cutout = 3;
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto out = augment(img, cfg, true, rng);
    for (std::size_t c = 0; c < 3; ++c) {
      int zeros = 0;
      for (std::size_t q = 0; q < 16 * 8; ++q) zeros += out.data[c * 128 + q] == 0.0;
      EXPECT_EQ(zeros, 9);
    }
  }
  cfg.cutout = 9;
  EXPECT_THROW(augment(img, cfg, true, rng), contract_error);
  EXPECT_EQ(augment(img, cfg, false, rng), img);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto cfg = small_run();
  cfg.model.sona_sites = {2};
  cfg.finalize();
  auto model = build(cfg.model);
  Rng rng(9);
  for (auto& e : model.params.entries()) {
    Tensor t = e.tensor;
    for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  }
  const auto bytes = serialize_checkpoint(model, cfg);
  const auto ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(to_text(ck.config), to_text(cfg));
  EXPECT_EQ(ck.model.params.checksum(), model.params.checksum());
  for (const auto& e : model.params.entries()) {
    const Tensor* t = ck.model.params.find(e.name);
    ASSERT_NE(t, nullptr);
    for (std::size_t i = 0; i < t->numel(); ++i) ASSERT_EQ((*t)[i], e.tensor[i]) << e.name;
  }
  EXPECT_EQ(serialize_checkpoint(ck.model, ck.config), bytes);
}

TEST(Checkpoint, DetectsCorruption) {
  auto cfg = small_run();
  auto model = build(cfg.model);
  auto bytes = serialize_checkpoint(model, cfg);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), format_error);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), format_error);
  EXPECT_THROW(deserialize_checkpoint("SONA"), format_error);
}

TEST(Checkpoint, FileRoundTrip) {
  auto cfg = small_run();
  auto model = build(cfg.model);
  const auto dir = scratch("ckpt");
  save_checkpoint((dir / "m.ckpt").string(), model, cfg);
  EXPECT_EQ(load_checkpoint((dir / "m.ckpt").string()).model.params.checksum(), model.params.checksum());
  EXPECT_THROW(load_checkpoint((dir / "missing.ckpt").string()), format_error);
  fs::remove_all(dir);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  auto cfg = small_run();
  cfg.train.base_lr = 0.0;
  cfg.model.dropblock.enabled = true;
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  std::map<std::string, std::vector<double>> before;
  for (const auto& e : model.params.entries())
    if (e.trainable) before[e.name] = {e.tensor.data().begin(), e.tensor.data().end()};
  const auto r = train(model, data, split.train, cfg.train);
  EXPECT_EQ(r.steps, 3u);
  for (const auto& e : model.params.entries())
    if (e.trainable)
      for (std::size_t i = 0; i < e.tensor.numel(); ++i) ASSERT_EQ(e.tensor[i], before[e.name][i]) << e.name;
}

TEST(Train, Reproducible) {
  auto cfg = small_run();
  cfg.model.sona_sites = {2};
  cfg.finalize();
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto a = build(cfg.model), b = build(cfg.model);
  std::ostringstream la, lb;
  train(a, data, split.train, cfg.train, &la);
  train(b, data, split.train, cfg.train, &lb);
  EXPECT_FALSE(la.str().empty());
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(serialize_checkpoint(a, cfg), serialize_checkpoint(b, cfg));
}

TEST(Train, LogsOneLinePerEpoch) {
  auto cfg = small_run();
  cfg.train.max_steps = 0;
  cfg.train.epochs = 2;
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  std::ostringstream log;
  const auto r = train(model, data, split.train, cfg.train, &log);
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.steps, 4u);
  const std::string text = log.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  for (const char* term : kLossTerms) EXPECT_NE(text.find(term), std::string::npos);
}

TEST(Train, NonFiniteLossNamesTerm) {
  auto cfg = small_run();
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  Tensor w = model.local_classifier;
  w.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(model, data, split.train, cfg.train);
    FAIL();
  } catch (const numeric_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("local_ce"), std::string::npos) << msg;
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
  }
}

TEST(Train, TooManyIdentities) {
  auto cfg = small_run();
  const auto data = gen_synthetic(cfg.data);
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  auto model = build(cfg.model);
  EXPECT_THROW(train(model, data, all, cfg.train), contract_error);
}

TEST(Train, DropBlockRaisesTrainingLoss) {
  auto cfg = small_run();
  cfg.model.dropblock = {0.5, 2, 2, true, false};
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  model.set_mode(Mode::train);
  std::vector<Image> images;
  std::vector<int> labels;
  for (auto i : split.train) {
    images.push_back(normalize(data[i].image, cfg.train.augment));
    labels.push_back(data[i].person_id);
  }
  const Tensor batch = stack(images);
  NoGradGuard no_grad;
  Rng rng(1);
  const auto with = compute_losses(forward_train(model, batch, rng), labels, cfg.train);
  model.config.dropblock.enabled = false;
  const auto without = compute_losses(forward_train(model, batch, rng), labels, cfg.train);
  EXPECT_GT(with.terms[2].item() + with.terms[3].item(), without.terms[2].item() + without.terms[3].item());
  EXPECT_EQ(with.terms[1].item(), without.terms[1].item());
}

TEST(Pipeline, EmbedSamplesMatchesDirectEmbedding) {
  auto cfg = small_run();
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  auto model = build(cfg.model);
  const auto recs = embed_samples(model, data, split.query, cfg.train.augment, true, 3);
  ASSERT_EQ(recs.size(), split.query.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& s = data[split.query[i]];
    EXPECT_EQ(recs[i].person_id, s.person_id);
    Rng unused(0);
    const auto img = augment(s.image, cfg.train.augment, false, unused);
    const auto e = embed(model, reshape(stack({img}), {3, img.height, img.width}), true);
    ASSERT_EQ(e.size(), recs[i].feature.size());
    for (std::size_t j = 0; j < e.size(); ++j) EXPECT_NEAR(e[j], recs[i].feature[j], 1e-12);
  }
}

TEST(GradSuite, UnknownModule) { EXPECT_THROW(run_grad_suite("optics"), contract_error); }

TEST(GradSuite, LossesAndDropBlockPass) {
  for (const char* m : {"losses", "dropblock"}) {
    const auto entries = run_grad_suite(m);
    EXPECT_FALSE(entries.empty());
    for (const auto& e : entries) EXPECT_LT(e.max_rel_error, kGradTolerance) << e.name;
  }
}

TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(SONA_CONFIG_DIR)) {
    if (entry.path().extension() != ".conf") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
    ++n;
  }
  EXPECT_GE(n, 7u);
  const auto desk = load_config(std::string(SONA_CONFIG_DIR) + "/desk.conf");
  EXPECT_EQ(to_text(desk), to_text(parse_config("sona.sites = 2\n")));
  const auto both = load_config(std::string(SONA_CONFIG_DIR) + "/sona23_net.conf");
  EXPECT_EQ(both.model.sona_sites, (std::vector<int>{2, 3}));
}
