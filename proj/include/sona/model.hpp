#pragma once

// SONA-Net: a staged residual backbone with optional second-order attention
// after stages 2 and/or 3, followed by two heads:
//   global: GAP -> 1x1 reduce -> BN -> ReLU                  (global_dim)
//   local:  bottleneck -> DropBlock+ -> GMP -> 1x1 reduce -> BN -> ReLU (local_dim)
// Each head feeds a bias-free linear classifier. At test time the two
// reduced features are concatenated into the embedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sona/attention.hpp"
#include "sona/dropblock.hpp"
#include "sona/nn.hpp"
#include "sona/ops.hpp"
#include "sona/random.hpp"
#include "sona/tensor.hpp"

namespace sona {

struct StageSpec {
  int blocks = 1;
  std::size_t out_channels = 0;
  int stride = 1;
  int dilation = 1;
};

struct BackboneConfig {
  std::size_t stem_channels = 16;
  int stem_kernel = 3;
  int stem_stride = 2;
  std::vector<StageSpec> stages;

  // 64x32 input -> 8x4x128 map.
  static BackboneConfig desk() {
    return {16, 3, 2, {{1, 16, 2, 1}, {1, 32, 2, 1}, {1, 64, 1, 2}, {1, 128, 1, 2}}};
  }
  // ResNet50 stage layout; 384x128 input -> 48x16x2048 map.
  static BackboneConfig full_scale() {
    return {64, 7, 4, {{3, 256, 1, 1}, {4, 512, 2, 1}, {6, 1024, 1, 2}, {3, 2048, 1, 2}}};
  }
};

struct ModelConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 32;
  std::size_t input_channels = 3;
  BackboneConfig backbone = BackboneConfig::desk();
  // Stage numbers (1-based) after which a SONA block is inserted.
  std::vector<int> sona_sites{2};
  std::size_t sona_reduction = 2;
  double sona_leaky_slope = 0.01;
  DropBlockPlusConfig dropblock{0.1, 1, 2, true, false};
  std::size_t global_dim = 32;
  std::size_t local_dim = 64;
  std::size_t num_classes = 8;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 1;

  static ModelConfig full_scale(std::size_t classes) {
    ModelConfig cfg;
    cfg.input_height = 384;
    cfg.input_width = 128;
    cfg.backbone = BackboneConfig::full_scale();
    cfg.dropblock = {0.1, 5, 8, true, false};
    cfg.global_dim = 512;
    cfg.local_dim = 1024;
    cfg.num_classes = classes;
    return cfg;
  }

  std::size_t feature_channels() const { return backbone.stages.back().out_channels; }
};

struct MapShape {
  std::size_t channels = 0, height = 0, width = 0;
  bool operator==(const MapShape&) const = default;
};

// Shapes after the stem and after every stage, without running the network.
inline std::vector<MapShape> stage_shapes(const ModelConfig& cfg) {
  std::vector<MapShape> shapes;
  const auto& bb = cfg.backbone;
  const int pad = (bb.stem_kernel - 1) / 2;
  long h = conv_out_extent(static_cast<long>(cfg.input_height), bb.stem_kernel, bb.stem_stride, pad, 1);
  long w = conv_out_extent(static_cast<long>(cfg.input_width), bb.stem_kernel, bb.stem_stride, pad, 1);
  if (h < 1 || w < 1) throw dimension_error("model: stem produces an empty map");
  shapes.push_back({bb.stem_channels, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (const auto& st : bb.stages) {
    h = conv_out_extent(h, 3, st.stride, st.dilation, st.dilation);
    w = conv_out_extent(w, 3, st.stride, st.dilation, st.dilation);
    if (h < 1 || w < 1) throw dimension_error("model: a backbone stage produces an empty map");
    shapes.push_back({st.out_channels, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  }
  return shapes;
}

inline void validate(const ModelConfig& cfg) {
  const auto& bb = cfg.backbone;
  if (bb.stages.size() != 4) throw contract_error("model: backbone must have exactly 4 stages");
  for (const auto& st : bb.stages)
    if (st.blocks < 1 || st.out_channels < 4 || st.stride < 1 || st.dilation < 1)
      throw contract_error("model: invalid stage spec");
  const auto shapes = stage_shapes(cfg);
  for (int s : {3, 4}) {
    if (shapes[static_cast<std::size_t>(s)].height != shapes[2].height ||
        shapes[static_cast<std::size_t>(s)].width != shapes[2].width)
      throw contract_error("model: stage " + std::to_string(s) + " must keep the stage-2 spatial size");
  }
  std::set<int> seen;
  for (int site : cfg.sona_sites) {
    if (site < 1 || site > 4) throw contract_error("model: SONA site must be a stage number in 1..4");
    if (!seen.insert(site).second) throw contract_error("model: duplicate SONA site " + std::to_string(site));
    SonaConfig{bb.stages[static_cast<std::size_t>(site - 1)].out_channels, cfg.sona_reduction, cfg.sona_leaky_slope}
        .validate();
  }
  if (cfg.global_dim == 0 || cfg.global_dim >= cfg.feature_channels())
    throw contract_error("model: global_dim must be positive and below the backbone output channels");
  if (cfg.local_dim != 2 * cfg.global_dim) throw contract_error("model: local_dim must be twice global_dim");
  if (cfg.num_classes < 2) throw contract_error("model: need at least 2 classes");
  if (cfg.input_channels == 0) throw contract_error("model: input_channels must be positive");
  cfg.dropblock.validate(shapes.back().height, shapes.back().width);
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

class ParameterStore {
 public:
  Tensor add(std::string name, Tensor t, bool trainable) {
    if (index_.count(name)) throw contract_error("parameter store: duplicate name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), t, trainable});
    return t;
  }

  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }
  const std::vector<NamedTensor>& entries() const { return entries_; }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  // FNV-1a over names and raw value bytes.
  std::uint64_t checksum(bool include_buffers = true) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const void* p, std::size_t len) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < len; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& e : entries_) {
      if (!include_buffers && !e.trainable) continue;
      feed(e.name.data(), e.name.size());
      feed(e.tensor.data().data(), e.tensor.numel() * sizeof(double));
    }
    return h;
  }

 private:
  std::vector<NamedTensor> entries_;
  std::map<std::string, std::size_t> index_;
};

class ModelState {
 public:
  ModelConfig config;
  ParameterStore params;
  Conv2dParams stem;
  BatchNormState stem_bn;
  std::vector<std::vector<BottleneckParams>> stages;
  std::map<int, SonaParams> sona;
  std::map<int, SonaConfig> sona_config;
  Conv2dParams global_reduce;
  BatchNormState global_bn;
  BottleneckParams local_block;
  Conv2dParams local_reduce;
  BatchNormState local_bn;
  Tensor global_classifier;  // [global_dim x classes]
  Tensor local_classifier;   // [local_dim x classes]

  ModelState() = default;
  ModelState(const ModelState&) = delete;
  ModelState& operator=(const ModelState&) = delete;
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;

  Mode mode() const { return mode_; }

  void set_mode(Mode m) {
    mode_ = m;
    auto set = [m](BatchNormState& bn) { bn.mode = m; };
    set(stem_bn);
    for (auto& stage : stages)
      for (auto& block : stage) for_each_bn(block, set);
    for (auto& [site, p] : sona) set(p.theta_bn);
    set(global_bn);
    for_each_bn(local_block, set);
    set(local_bn);
  }

  std::size_t parameter_count() const { return params.parameter_count(); }
  std::size_t embedding_dim() const { return config.global_dim + config.local_dim; }

 private:
  template <class F>
  static void for_each_bn(BottleneckParams& b, F&& f) {
    f(b.reduce_bn);
    f(b.spatial_bn);
    f(b.expand_bn);
    if (b.projection_bn) f(*b.projection_bn);
  }

  Mode mode_ = Mode::train;
};

namespace detail {

class ModelBuilder {
 public:
  ModelBuilder(ModelState& state, std::uint64_t seed) : state_(state), seed_(seed) {}

  Conv2dParams conv(const std::string& name, std::size_t in, std::size_t out, int kernel, bool bias, int stride = 1,
                    int dilation = 1) {
    Rng rng = Rng::keyed(seed_, name);
    Conv2dParams p = make_conv(in, out, kernel, rng, bias, stride, dilation);
    p.weight = state_.params.add(name + ".weight", p.weight, true);
    if (p.bias) p.bias = state_.params.add(name + ".bias", *p.bias, true);
    return p;
  }

  BatchNormState bn(const std::string& name, std::size_t channels) {
    auto s = BatchNormState::create(channels, state_.config.bn_momentum, state_.config.bn_epsilon);
    register_bn(name, s);
    return s;
  }

  void register_bn(const std::string& name, BatchNormState& s) {
    s.scale = state_.params.add(name + ".scale", s.scale, true);
    s.shift = state_.params.add(name + ".shift", s.shift, true);
    s.running_mean = state_.params.add(name + ".running_mean", s.running_mean, false);
    s.running_var = state_.params.add(name + ".running_var", s.running_var, false);
  }

  // Standard 4x-expansion bottleneck; the 3x3 conv carries stride and dilation.
  BottleneckParams bottleneck(const std::string& name, std::size_t in, std::size_t out, int stride, int dilation) {
    const std::size_t mid = std::max<std::size_t>(1, out / 4);
    BottleneckParams b;
    b.reduce = conv(name + ".reduce", in, mid, 1, false);
    b.reduce_bn = bn(name + ".reduce_bn", mid);
    b.spatial = conv(name + ".spatial", mid, mid, 3, false, stride, dilation);
    b.spatial_bn = bn(name + ".spatial_bn", mid);
    b.expand = conv(name + ".expand", mid, out, 1, false);
    b.expand_bn = bn(name + ".expand_bn", out);
    if (in != out || stride != 1) {
      b.projection = conv(name + ".projection", in, out, 1, false, stride);
      b.projection_bn = bn(name + ".projection_bn", out);
    }
    return b;
  }

  SonaParams sona(const std::string& name, const SonaConfig& cfg) {
    Rng rng = Rng::keyed(seed_, name);
    SonaParams p = make_sona_params(cfg, rng, state_.config.bn_momentum, state_.config.bn_epsilon);
    p.theta.weight = state_.params.add(name + ".theta.weight", p.theta.weight, true);
    register_bn(name + ".theta_bn", p.theta_bn);
    p.g.weight = state_.params.add(name + ".g.weight", p.g.weight, true);
    p.g.bias = state_.params.add(name + ".g.bias", *p.g.bias, true);
    p.p.weight = state_.params.add(name + ".p.weight", p.p.weight, true);
    p.p.bias = state_.params.add(name + ".p.bias", *p.p.bias, true);
    return p;
  }

  Tensor linear(const std::string& name, std::size_t in, std::size_t out) {
    Rng rng = Rng::keyed(seed_, name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> v(in * out);
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return state_.params.add(name + ".weight", Tensor({in, out}, std::move(v)), true);
  }

 private:
  ModelState& state_;
  std::uint64_t seed_;
};

}  // namespace detail

// Initializes every parameter from a stream keyed by (seed, parameter name),
// so two configs that share a parameter name start from identical values.
inline ModelState build(const ModelConfig& cfg) {
  validate(cfg);
  ModelState m;
  m.config = cfg;
  detail::ModelBuilder b(m, cfg.seed);
  const auto& bb = cfg.backbone;
  m.stem = b.conv("stem", cfg.input_channels, bb.stem_channels, bb.stem_kernel, false, bb.stem_stride);
  m.stem_bn = b.bn("stem_bn", bb.stem_channels);
  std::size_t channels = bb.stem_channels;
  for (std::size_t s = 0; s < bb.stages.size(); ++s) {
    const auto& spec = bb.stages[s];
    std::vector<BottleneckParams> blocks;
    for (int k = 0; k < spec.blocks; ++k) {
      const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(k);
      blocks.push_back(b.bottleneck(name, channels, spec.out_channels, k == 0 ? spec.stride : 1, spec.dilation));
      channels = spec.out_channels;
    }
    m.stages.push_back(std::move(blocks));
    const int stage_no = static_cast<int>(s + 1);
    if (std::find(cfg.sona_sites.begin(), cfg.sona_sites.end(), stage_no) != cfg.sona_sites.end()) {
      if (stage_no == 4)
        std::cerr << "warning: SONA after stage 4 is deprecated; late placement degrades accuracy\n";
      const SonaConfig sc{channels, cfg.sona_reduction, cfg.sona_leaky_slope};
      m.sona_config[stage_no] = sc;
      m.sona[stage_no] = b.sona("sona" + std::to_string(stage_no), sc);
    }
  }
  m.global_reduce = b.conv("global.reduce", channels, cfg.global_dim, 1, false);
  m.global_bn = b.bn("global.bn", cfg.global_dim);
  m.local_block = b.bottleneck("local.block", channels, channels, 1, 1);
  m.local_reduce = b.conv("local.reduce", channels, cfg.local_dim, 1, false);
  m.local_bn = b.bn("local.bn", cfg.local_dim);
  m.global_classifier = b.linear("global.classifier", cfg.global_dim, cfg.num_classes);
  m.local_classifier = b.linear("local.classifier", cfg.local_dim, cfg.num_classes);
  return m;
}

struct ForwardTrace {
  std::vector<Shape> stage_shapes;  // stem then each stage (after SONA, if any)
  std::map<int, Tensor> attention;  // per SONA site, [n x hw x hw]
  Tensor backbone_output;
  Tensor local_map;  // local branch after DropBlock+
};

struct BranchFeatures {
  Tensor global;  // [n x global_dim]
  Tensor local;   // [n x local_dim]
};

// `masks` is consulted only in train mode with DropBlock+ enabled.
inline BranchFeatures forward_features(ModelState& m, const Tensor& images, const std::vector<Mask>* masks = nullptr,
                                       ForwardTrace* trace = nullptr) {
  const auto& cfg = m.config;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels || images.dim(2) != cfg.input_height ||
      images.dim(3) != cfg.input_width)
    throw dimension_error("model: expected images [n x " + std::to_string(cfg.input_channels) + " x " +
                          std::to_string(cfg.input_height) + " x " + std::to_string(cfg.input_width) + "], got " +
                          shape_str(images.shape()));
  Tensor x = relu(batch_norm(conv2d(images, m.stem), m.stem_bn));
  if (trace) trace->stage_shapes.push_back(x.shape());
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    for (auto& block : m.stages[s]) x = bottleneck(x, block);
    const int stage_no = static_cast<int>(s + 1);
    if (auto it = m.sona.find(stage_no); it != m.sona.end()) {
      auto out = sona_forward_with_attention(x, it->second, m.sona_config.at(stage_no));
      x = out.output;
      if (trace) trace->attention[stage_no] = out.attention;
    }
    if (trace) trace->stage_shapes.push_back(x.shape());
  }
  if (trace) trace->backbone_output = x;
  const std::size_t n = x.dim(0), c = x.dim(1);

  Tensor g = reshape(global_pool(x, PoolKind::avg), {n, c, 1, 1});
  g = relu(batch_norm(conv2d(g, m.global_reduce), m.global_bn));

  Tensor l = bottleneck(x, m.local_block);
  if (m.mode() == Mode::train && cfg.dropblock.enabled) {
    if (!masks) throw contract_error("model: train-mode forward with DropBlock+ needs masks");
    l = apply_mask(l, *masks, cfg.dropblock);
  }
  if (trace) trace->local_map = l;
  l = reshape(global_pool(l, PoolKind::max), {n, c, 1, 1});
  l = relu(batch_norm(conv2d(l, m.local_reduce), m.local_bn));

  return {reshape(g, {n, cfg.global_dim}), reshape(l, {n, cfg.local_dim})};
}

struct TrainOutputs {
  Tensor global_feat;
  Tensor local_feat;
  Tensor global_logits;
  Tensor local_logits;
};

inline TrainOutputs forward_train(ModelState& m, const Tensor& images, Rng& rng, ForwardTrace* trace = nullptr) {
  if (m.mode() != Mode::train) throw contract_error("forward_train: model is in eval mode");
  std::vector<Mask> masks;
  const auto shapes = stage_shapes(m.config);
  if (m.config.dropblock.enabled)
    masks = sample_masks(images.dim(0), shapes.back().height, shapes.back().width, m.config.dropblock, rng);
  auto f = forward_features(m, images, &masks, trace);
  return {f.global, f.local, matmul(f.global, m.global_classifier), matmul(f.local, m.local_classifier)};
}

// Mirror along the width axis of an NCHW tensor (no gradient).
inline Tensor flip_horizontal(const Tensor& images) {
  if (images.rank() != 4) throw dimension_error("flip_horizontal: expected NCHW, got " + shape_str(images.shape()));
  const std::size_t rows = images.dim(0) * images.dim(1) * images.dim(2), w = images.dim(3);
  std::vector<double> out(images.numel());
  auto d = images.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = d[r * w + (w - 1 - j)];
  return Tensor(images.shape(), std::move(out));
}

// Eval-mode embeddings [n x (global_dim + local_dim)], optionally averaged
// with the embedding of the mirrored images.
inline Tensor embed_batch(ModelState& m, const Tensor& images, bool flip_average) {
  if (m.mode() != Mode::eval) throw contract_error("embed: model is in train mode");
  NoGradGuard no_grad;
  auto feats = [&](const Tensor& imgs) {
    auto f = forward_features(m, imgs);
    return concat_cols(f.global, f.local).detach();
  };
  Tensor e = feats(images);
  if (!flip_average) return e;
  const Tensor ef = feats(flip_horizontal(images));
  std::vector<double> avg(e.numel());
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (e[i] + ef[i]);
  return Tensor(e.shape(), std::move(avg));
}

inline std::vector<double> embed(ModelState& m, const Tensor& image, bool flip_average) {
  Tensor batch = image.rank() == 3 ? reshape(image.detach(), {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (batch.dim(0) != 1) throw dimension_error("embed: expects a single image, got " + shape_str(image.shape()));
  auto e = embed_batch(m, batch, flip_average);
  return {e.data().begin(), e.data().end()};
}

}  // namespace sona
