#pragma once

// Synthetic identity dataset, identity-disjoint splits, P x K sampling and
// augmentation.
//
// Every identity owns a procedural "outfit": four horizontal bands with their
// own colors plus a striped texture on one channel. An image of that identity
// is the outfit seen through a camera (per-camera channel gain and bias),
// shifted by a few pixels, plus Gaussian pixel noise. Pixel values are
// quantized to 8 bits so a dataset written to disk reads back exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sona/image.hpp"
#include "sona/random.hpp"
#include "sona/text.hpp"

namespace sona {

struct SyntheticConfig {
  std::size_t num_ids = 16;
  std::size_t images_per_id = 8;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t cameras = 2;
  double noise = 0.03;
  double camera_strength = 0.1;
  int max_shift = 2;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_ids < 2) throw contract_error("synthetic: need at least 2 identities");
    if (images_per_id < 2) throw contract_error("synthetic: images_per_id must be at least 2");
    if (cameras < 2) throw contract_error("synthetic: cameras must be at least 2");
    if (height < 8 || width < 4) throw contract_error("synthetic: image too small");
    if (noise < 0.0 || camera_strength < 0.0 || camera_strength >= 1.0 || max_shift < 0)
      throw contract_error("synthetic: noise, camera_strength and max_shift must be nonnegative (strength < 1)");
  }
};

struct Sample {
  int person_id = 0;
  int camera_id = 0;
  Image image;
  std::string path;  // relative to the dataset root, when stored on disk
};

using Dataset = std::vector<Sample>;

namespace detail {

struct Outfit {
  std::array<double, 3> boundaries;  // band edges as fractions of the height
  std::array<std::array<double, 3>, 4> colors;
  std::size_t texture_channel;
  double texture_freq, texture_phase;
};

inline Outfit make_outfit(std::uint64_t seed, std::size_t id) {
  Rng rng = Rng::keyed(seed, "outfit" + std::to_string(id));
  Outfit o;
  o.boundaries = {rng.uniform(0.12, 0.2), rng.uniform(0.42, 0.55), rng.uniform(0.78, 0.88)};
  for (auto& band : o.colors)
    for (auto& v : band) v = rng.uniform(0.1, 0.9);
  o.texture_channel = static_cast<std::size_t>(rng.below(3));
  o.texture_freq = static_cast<double>(2 + rng.below(5));
  o.texture_phase = rng.uniform(0.0, 6.283185307179586);
  return o;
}

inline double outfit_value(const Outfit& o, std::size_t c, double fy, double fx) {
  std::size_t band = 0;
  while (band < 3 && fy >= o.boundaries[band]) ++band;
  double v = o.colors[band][c];
  if (c == o.texture_channel) v += 0.12 * std::sin(6.283185307179586 * o.texture_freq * fx + o.texture_phase);
  return v;
}

}  // namespace detail

inline Dataset gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::vector<std::array<double, 6>> cams;  // gain x3, bias x3
  for (std::size_t c = 0; c < cfg.cameras; ++c) {
    Rng rng = Rng::keyed(cfg.seed, "camera" + std::to_string(c));
    std::array<double, 6> t{};
    for (std::size_t k = 0; k < 3; ++k) t[k] = 1.0 + rng.uniform(-cfg.camera_strength, cfg.camera_strength);
    for (std::size_t k = 3; k < 6; ++k) t[k] = rng.uniform(-0.5, 0.5) * cfg.camera_strength;
    cams.push_back(t);
  }
  Dataset out;
  const auto h = cfg.height, w = cfg.width;
  for (std::size_t id = 0; id < cfg.num_ids; ++id) {
    const auto outfit = detail::make_outfit(cfg.seed, id);
    for (std::size_t n = 0; n < cfg.images_per_id; ++n) {
      Rng rng = Rng::keyed(cfg.seed, "image" + std::to_string(id) + "/" + std::to_string(n));
      const std::size_t cam = n % cfg.cameras;
      const int dy = cfg.max_shift ? rng.uniform_int(-cfg.max_shift, cfg.max_shift) : 0;
      const int dx = cfg.max_shift ? rng.uniform_int(-cfg.max_shift, cfg.max_shift) : 0;
      Image img = Image::blank(3, h, w);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const long sy = std::clamp<long>(static_cast<long>(y) - dy, 0, static_cast<long>(h) - 1);
            const long sx = std::clamp<long>(static_cast<long>(x) - dx, 0, static_cast<long>(w) - 1);
            const double base = detail::outfit_value(outfit, c, (static_cast<double>(sy) + 0.5) / static_cast<double>(h),
                                                     (static_cast<double>(sx) + 0.5) / static_cast<double>(w));
            double v = cams[cam][c] * base + cams[cam][3 + c];
            if (cfg.noise > 0.0) v += cfg.noise * rng.normal();
            img.at(c, y, x) = static_cast<double>(to_byte(v)) / 255.0;
          }
      char name[64];
      std::snprintf(name, sizeof name, "images/%04zu_c%zu_%03zu.ppm", id, cam, n);
      out.push_back({static_cast<int>(id), static_cast<int>(cam), std::move(img), name});
    }
  }
  return out;
}

struct Split {
  std::vector<std::size_t> train, query, gallery;
};

// Identities below `train_ids` train; the rest are held out. For each held-out
// identity the first image seen from each camera is a query and every other
// image goes to the gallery.
inline Split split_by_identity(const Dataset& data, std::size_t train_ids) {
  Split s;
  std::set<std::pair<int, int>> seen;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (static_cast<std::size_t>(r.person_id) < train_ids)
      s.train.push_back(i);
    else if (seen.insert({r.person_id, r.camera_id}).second)
      s.query.push_back(i);
    else
      s.gallery.push_back(i);
  }
  return s;
}

namespace detail {

inline void write_list(const std::filesystem::path& file, const Dataset& data, const std::vector<std::size_t>& idx) {
  std::ofstream os(file);
  if (!os) throw format_error("cannot write " + file.string());
  os << "# path\tperson_id\tcamera_id\n";
  for (std::size_t i : idx) os << data[i].path << '\t' << data[i].person_id << '\t' << data[i].camera_id << '\n';
}

}  // namespace detail

// Writes images plus manifest.tsv, train.tsv, query.tsv and gallery.tsv.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& data, const Split& split) {
  std::filesystem::create_directories(dir / "images");
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    all[i] = i;
    write_pnm((dir / data[i].path).string(), data[i].image);
  }
  detail::write_list(dir / "manifest.tsv", data, all);
  detail::write_list(dir / "train.tsv", data, split.train);
  detail::write_list(dir / "query.tsv", data, split.query);
  detail::write_list(dir / "gallery.tsv", data, split.gallery);
}

// Reads a (path, person_id, camera_id) list; paths are relative to the list's directory.
inline Dataset read_list(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw format_error("cannot open " + file.string());
  Dataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto fields = split(t, '\t');
    if (fields.size() != 3) throw format_error(file.string() + " line " + std::to_string(line_no) + ": expected 3 fields");
    Sample s;
    s.path = std::string(fields[0]);
    try {
      s.person_id = parse_int(fields[1]);
      s.camera_id = parse_int(fields[2]);
    } catch (const format_error& e) {
      throw format_error(file.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
    s.image = read_pnm((file.parent_path() / s.path).string());
    out.push_back(std::move(s));
  }
  return out;
}

// P distinct identities, K images each. Images are drawn without replacement
// when an identity has at least K of them, otherwise with replacement.
inline std::vector<std::size_t> pk_sample(const std::vector<int>& labels, std::size_t p, std::size_t k, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  if (by_id.size() < p)
    throw contract_error("pk_sample: need " + std::to_string(p) + " identities, have " + std::to_string(by_id.size()));
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  for (std::size_t i = 0; i < p; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
  std::vector<std::size_t> batch;
  batch.reserve(p * k);
  for (std::size_t i = 0; i < p; ++i) {
    auto pool = by_id[ids[i]];
    if (pool.size() >= k) {
      for (std::size_t j = 0; j < k; ++j) {
        std::swap(pool[j], pool[j + rng.below(pool.size() - j)]);
        batch.push_back(pool[j]);
      }
    } else {
      for (std::size_t j = 0; j < k; ++j) batch.push_back(pool[rng.below(pool.size())]);
    }
  }
  return batch;
}

struct AugmentConfig {
  bool flip = true;
  bool normalize = true;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> stddev{0.25, 0.25, 0.25};
  int cutout = -1;  // square side; -1 means height / 4, 0 disables

  std::size_t cutout_side(std::size_t height) const {
    return cutout < 0 ? height / 4 : static_cast<std::size_t>(cutout);
  }
};

inline Image normalize(Image img, const AugmentConfig& cfg) {
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double m = cfg.mean[c % 3], s = cfg.stddev[c % 3];
    if (!(s > 0.0)) throw contract_error("augment: normalization std must be positive");
    for (std::size_t q = 0; q < img.height * img.width; ++q) {
      auto& v = img.data[c * img.height * img.width + q];
      v = (v - m) / s;
    }
  }
  return img;
}

// Training: random flip (p = 0.5), normalization, one zeroed square. Eval:
// normalization only.
inline Image augment(const Image& img, const AugmentConfig& cfg, bool train, Rng& rng) {
  const std::size_t side = cfg.cutout_side(img.height);
  if (train && (side > img.height || side > img.width))
    throw contract_error("augment: cutout side " + std::to_string(side) + " exceeds the image");
  Image out = img;
  if (train && cfg.flip && rng.bernoulli(0.5)) out = flip_horizontal(out);
  if (cfg.normalize) out = normalize(std::move(out), cfg);
  if (train && side > 0) {
    const auto y0 = static_cast<std::size_t>(rng.below(img.height - side + 1));
    const auto x0 = static_cast<std::size_t>(rng.below(img.width - side + 1));
    for (std::size_t c = 0; c < out.channels; ++c)
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) out.at(c, y, x) = 0.0;
  }
  return out;
}

}  // namespace sona
