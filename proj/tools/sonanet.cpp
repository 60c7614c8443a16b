#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "sona/bench.hpp"
#include "sona/checkpoint.hpp"
#include "sona/grad_suite.hpp"
#include "sona/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sona;

namespace {

// A directory means its manifest.tsv.
Dataset read_data(const fs::path& p) { return read_list(fs::is_directory(p) ? p / "manifest.tsv" : p); }

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

std::vector<EmbeddingRecord> read_embeddings_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw format_error("cannot open " + path);
  return read_embeddings(is);
}

int cmd_gen(const std::string& config, const std::string& out) {
  const auto cfg = load_config(config);
  const auto data = gen_synthetic(cfg.data);
  const auto split = split_by_identity(data, cfg.train_ids);
  write_dataset(out, data, split);
  std::cout << "wrote " << data.size() << " images (" << split.train.size() << " train, " << split.query.size()
            << " query, " << split.gallery.size() << " gallery) to " << out << '\n';
  return 0;
}

int cmd_train(const std::string& config, const std::string& data_path, const std::string& out) {
  const auto cfg = load_config(config);
  fs::path p = data_path;
  if (fs::is_directory(p)) p /= "train.tsv";
  const auto data = read_list(p);
  auto model = build(cfg.model);
  const auto r = train(model, data, all_indices(data), cfg.train, &std::cout);
  std::cout << "steps " << r.steps << " first_total " << format_real(r.first_total) << " last_total "
            << format_real(r.last_total) << '\n';
  save_checkpoint(out, model, cfg);
  return 0;
}

int cmd_embed(const std::string& ckpt, const std::string& data_path, const std::string& out, bool no_flip) {
  auto ck = load_checkpoint(ckpt);
  const auto data = read_data(data_path);
  const auto records = embed_samples(ck.model, data, all_indices(data), ck.config.train.augment,
                                     ck.config.eval.flip_average && !no_flip);
  std::ofstream os(out);
  if (!os) throw format_error("cannot write " + out);
  write_embeddings(os, records);
  std::cout << "wrote " << records.size() << " embeddings of length " << ck.model.embedding_dim() << " to " << out
            << '\n';
  return 0;
}

int cmd_eval(const std::string& query, const std::string& gallery, std::size_t max_rank, bool cosine) {
  const auto r = evaluate(read_embeddings_file(query), read_embeddings_file(gallery), max_rank,
                          cosine ? DistanceMetric::cosine : DistanceMetric::euclidean);
  if (r.skipped) std::cerr << "warning: " << r.skipped << " queries have no valid gallery match and were skipped\n";
  std::cout << format_report(r);
  return 0;
}

int cmd_gradcheck(const std::string& module) {
  bool ok = true;
  for (const auto& e : run_grad_suite(module)) {
    const bool pass = e.max_rel_error < kGradTolerance;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(10) << e.module << std::setw(30) << e.name
              << format_real(e.max_rel_error) << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_heatmap(const std::string& ckpt, const std::string& image_path, const std::string& ref, const std::string& out,
                int site) {
  auto ck = load_checkpoint(ckpt);
  const auto parts = split(ref, ',');
  if (parts.size() != 2) throw format_error("--ref expects R,C");
  const auto r = parse_int<std::size_t>(trim(parts[0])), c = parse_int<std::size_t>(trim(parts[1]));
  if (site == 0) {
    if (ck.model.sona.empty()) throw contract_error("heatmap: checkpoint has no SONA blocks");
    site = ck.model.sona.begin()->first;
  }
  Rng unused(0);
  const auto img = augment(read_pnm(image_path), ck.config.train.augment, false, unused);
  const auto map = model_heatmap(ck.model, img, site, r, c);
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::ofstream os(out);
  if (!os) throw format_error("cannot write " + out);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) os << format_real(map[y * w + x]) << (x + 1 < w ? ' ' : '\n');
  fs::path pgm = out;
  pgm.replace_extension(".pgm");
  write_pnm(pgm.string(), heat_to_gray({map.data().begin(), map.data().end()}, h, w));
  std::cout << "site " << site << " grid " << h << "x" << w << " -> " << out << ", " << pgm.string() << '\n';
  return 0;
}

int cmd_bench(const std::string& config, std::size_t trials) {
  const auto cfg = load_config(config);
  const auto r = bench(cfg.model, trials ? trials : cfg.bench.trials, cfg.bench.warmup);
  std::cout << "with_sona_ms " << format_real(r.with_sona.mean_ms) << " +- " << format_real(r.with_sona.std_ms) << '\n'
            << "without_sona_ms " << format_real(r.without_sona.mean_ms) << " +- "
            << format_real(r.without_sona.std_ms) << '\n'
            << "overhead_pct " << format_real(r.overhead_pct) << '\n';
  return 0;
}

int cmd_run(const std::string& config) {
  const auto cfg = load_config(config);
  const auto data = gen_synthetic(cfg.data);
  const auto r = run_experiment(cfg, data, split_by_identity(data, cfg.train_ids), &std::cout);
  std::cout << "parameters " << r.parameters << " steps " << r.train.steps << " seconds " << r.seconds << '\n'
            << format_report(r.ranking);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SONA-Net person re-identification toolkit"};
  app.require_subcommand(1);
  std::string config, out, data, ckpt, query, gallery, module = "all", image, ref;
  std::size_t max_rank = 10, trials = 0;
  bool cosine = false, no_flip = false;
  int site = 0;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  tr->add_option("--config", config)->required();
  tr->add_option("--data", data, "dataset directory or list")->required();
  tr->add_option("--out", out, "checkpoint path")->required();

  auto* emb = app.add_subcommand("embed", "write flip-averaged embeddings for a list");
  emb->add_option("--ckpt", ckpt)->required();
  emb->add_option("--data", data, "list (.tsv) or dataset directory")->required();
  emb->add_option("--out", out)->required();
  emb->add_flag("--no-flip-avg", no_flip);

  auto* ev = app.add_subcommand("eval", "CMC and mAP from query and gallery embeddings");
  ev->add_option("--query", query)->required();
  ev->add_option("--gallery", gallery)->required();
  ev->add_option("--max-rank", max_rank);
  ev->add_flag("--cosine", cosine);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gc->add_option("--module", module)->check(CLI::IsMember({"all", "nn", "sona", "dropblock", "losses", "model"}));

  auto* hm = app.add_subcommand("heatmap", "attention map of one reference position");
  hm->add_option("--ckpt", ckpt)->required();
  hm->add_option("--image", image)->required();
  hm->add_option("--ref", ref, "R,C on the SONA feature grid")->required();
  hm->add_option("--out", out, "text output; a .pgm is written alongside")->required();
  hm->add_option("--site", site, "stage after which the SONA block sits (default: first)");

  auto* bn = app.add_subcommand("bench", "eval-mode forward time with and without SONA");
  bn->add_option("--config", config)->required();
  bn->add_option("--trials", trials);

  auto* run = app.add_subcommand("run", "generate, train and evaluate in one go");
  run->add_option("--config", config)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen(config, out);
    if (*tr) return cmd_train(config, data, out);
    if (*emb) return cmd_embed(ckpt, data, out, no_flip);
    if (*ev) return cmd_eval(query, gallery, max_rank, cosine);
    if (*gc) return cmd_gradcheck(module);
    if (*hm) return cmd_heatmap(ckpt, image, ref, out, site);
    if (*bn) return cmd_bench(config, trials);
    if (*run) return cmd_run(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
