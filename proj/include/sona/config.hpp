#pragma once

// Run configuration as flat `key = value` text. Keys are grouped by dotted
// prefixes (data., model., sona., dropblock., train., augment., eval.,
// bench.). Unknown keys and malformed values are errors.

#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sona/data.hpp"
#include "sona/model.hpp"
#include "sona/reid_eval.hpp"
#include "sona/text.hpp"
#include "sona/train.hpp"

namespace sona {

struct EvalConfig {
  bool flip_average = true;
  DistanceMetric metric = DistanceMetric::euclidean;
  std::size_t max_rank = 10;
};

struct BenchConfig {
  std::size_t trials = 50;
  std::size_t warmup = 5;
};

struct RunConfig {
  SyntheticConfig data;
  std::size_t train_ids = 8;
  std::string backbone = "desk";
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  BenchConfig bench;

  // Derives the model's input size, class count and backbone from the other
  // sections, then validates everything.
  void finalize() {
    if (backbone == "desk")
      model.backbone = BackboneConfig::desk();
    else if (backbone == "full")
      model.backbone = BackboneConfig::full_scale();
    else
      throw format_error("config: model.backbone must be 'desk' or 'full', got '" + backbone + "'");
    model.input_height = data.height;
    model.input_width = data.width;
    model.input_channels = 3;
    model.num_classes = train_ids;
    data.validate();
    if (train_ids < 2 || train_ids >= data.num_ids)
      throw contract_error("config: data.train_ids must be in [2, data.ids)");
    if (train.p > train_ids) throw contract_error("config: train.P exceeds the number of training identities");
    train.validate();
    validate(model);
    if (eval.max_rank == 0) throw contract_error("config: eval.max_rank must be positive");
    if (bench.trials < 10) throw contract_error("config: bench.trials must be at least 10");
  }
};

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<std::string()> get;
  std::function<void(std::string_view)> set;
};

inline bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw format_error("invalid boolean '" + std::string(v) + "'");
}

template <class T>
ConfigKey bind_key(std::string name, T& field) {
  ConfigKey k{std::move(name), {}, {}};
  if constexpr (std::is_same_v<T, bool>) {
    k.get = [&field] { return std::string(field ? "true" : "false"); };
    k.set = [&field](std::string_view v) { field = parse_bool(v); };
  } else if constexpr (std::is_same_v<T, double>) {
    k.get = [&field] { return format_real(field); };
    k.set = [&field](std::string_view v) { field = parse_real(v); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    k.get = [&field] { return field; };
    k.set = [&field](std::string_view v) { field = std::string(v); };
  } else if constexpr (std::is_same_v<T, std::array<double, 3>>) {
    k.get = [&field] { return format_real(field[0]) + "," + format_real(field[1]) + "," + format_real(field[2]); };
    k.set = [&field](std::string_view v) {
      const auto parts = split(v, ',');
      if (parts.size() != 3) throw format_error("expected 3 comma-separated reals, got '" + std::string(v) + "'");
      for (std::size_t i = 0; i < 3; ++i) field[i] = parse_real(trim(parts[i]));
    };
  } else {
    static_assert(std::is_integral_v<T>);
    k.get = [&field] { return std::to_string(field); };
    k.set = [&field](std::string_view v) { field = parse_int<T>(v); };
  }
  return k;
}

inline std::vector<ConfigKey> config_keys(RunConfig& c) {
  std::vector<ConfigKey> keys{
      bind_key("data.ids", c.data.num_ids),
      bind_key("data.images_per_id", c.data.images_per_id),
      bind_key("data.height", c.data.height),
      bind_key("data.width", c.data.width),
      bind_key("data.cameras", c.data.cameras),
      bind_key("data.noise", c.data.noise),
      bind_key("data.camera_strength", c.data.camera_strength),
      bind_key("data.max_shift", c.data.max_shift),
      bind_key("data.seed", c.data.seed),
      bind_key("data.train_ids", c.train_ids),
      bind_key("model.backbone", c.backbone),
      bind_key("model.global_dim", c.model.global_dim),
      bind_key("model.local_dim", c.model.local_dim),
      bind_key("model.bn_momentum", c.model.bn_momentum),
      bind_key("model.bn_epsilon", c.model.bn_epsilon),
      bind_key("model.seed", c.model.seed),
      bind_key("sona.r", c.model.sona_reduction),
      bind_key("sona.leaky_slope", c.model.sona_leaky_slope),
      bind_key("dropblock.enabled", c.model.dropblock.enabled),
      bind_key("dropblock.gamma", c.model.dropblock.gamma),
      bind_key("dropblock.height", c.model.dropblock.block_height),
      bind_key("dropblock.width", c.model.dropblock.block_width),
      bind_key("dropblock.random_size", c.model.dropblock.random_size),
      bind_key("train.P", c.train.p),
      bind_key("train.K", c.train.k),
      bind_key("train.margin", c.train.margin),
      bind_key("train.epsilon", c.train.epsilon),
      bind_key("train.epochs", c.train.epochs),
      bind_key("train.max_steps", c.train.max_steps),
      bind_key("train.lr", c.train.base_lr),
      bind_key("train.weight_decay", c.train.weight_decay),
      bind_key("train.seed", c.train.seed),
      bind_key("train.w_global_triplet", c.train.weights.global_triplet),
      bind_key("train.w_global_ce", c.train.weights.global_ce),
      bind_key("train.w_local_triplet", c.train.weights.local_triplet),
      bind_key("train.w_local_ce", c.train.weights.local_ce),
      bind_key("augment.flip", c.train.augment.flip),
      bind_key("augment.normalize", c.train.augment.normalize),
      bind_key("augment.mean", c.train.augment.mean),
      bind_key("augment.std", c.train.augment.stddev),
      bind_key("augment.cutout", c.train.augment.cutout),
      bind_key("eval.flip_average", c.eval.flip_average),
      bind_key("eval.max_rank", c.eval.max_rank),
      bind_key("bench.trials", c.bench.trials),
      bind_key("bench.warmup", c.bench.warmup),
  };
  auto& sites = c.model.sona_sites;
  keys.insert(keys.begin() + 16,
              ConfigKey{"sona.sites",
                        [&sites] {
                          if (sites.empty()) return std::string("none");
                          std::string s;
                          for (std::size_t i = 0; i < sites.size(); ++i) s += (i ? "," : "") + std::to_string(sites[i]);
                          return s;
                        },
                        [&sites](std::string_view v) {
                          sites.clear();
                          if (v == "none" || v.empty()) return;
                          for (auto part : split(v, ',')) sites.push_back(parse_int(trim(part)));
                        }});
  auto& metric = c.eval.metric;
  keys.push_back({"eval.metric", [&metric] { return std::string(metric == DistanceMetric::cosine ? "cosine" : "euclidean"); },
                  [&metric](std::string_view v) {
                    if (v == "euclidean")
                      metric = DistanceMetric::euclidean;
                    else if (v == "cosine")
                      metric = DistanceMetric::cosine;
                    else
                      throw format_error("eval.metric must be 'euclidean' or 'cosine'");
                  }});
  return keys;
}

}  // namespace detail

// Applies `key = value` lines on top of `base`.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  auto keys = detail::config_keys(base);
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    auto line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string_view::npos) throw format_error(where + "expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
    if (it == keys.end()) throw format_error(where + "unknown key '" + std::string(key) + "'");
    try {
      it->set(value);
    } catch (const format_error& e) {
      throw format_error(where + std::string(key) + ": " + e.what());
    }
  }
  base.finalize();
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw format_error("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// Every key with its current value; parse_config(to_text(c)) reproduces c.
inline std::string to_text(RunConfig c) {
  std::string out;
  for (const auto& k : detail::config_keys(c)) out += k.name + " = " + k.get() + "\n";
  return out;
}

}  // namespace sona
