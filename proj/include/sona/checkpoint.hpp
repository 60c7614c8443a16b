#pragma once

// Checkpoint layout (all integers little-endian):
//   "SONACKPT" | u32 version | u64 n + config text (n bytes)
//   | u64 entries | per entry: u32 n + name, u32 rank, u64 dims[rank], f64 values[]
//   | u64 FNV-1a of every preceding byte

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "sona/config.hpp"
#include "sona/model.hpp"

namespace sona {

inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'N', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void raw(std::string_view s) { buf_ += s; }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::string_view raw(std::size_t n) {
    if (n > data_.size() - pos_) throw format_error("checkpoint: truncated");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t le(int n) {
    auto s = raw(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str32() { return std::string(raw(u32())); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelState& model, const RunConfig& config) {
  detail::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  const std::string text = to_text(config);
  w.u64(text.size());
  w.raw(text);
  const auto& entries = model.params.entries();
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.str32(e.name);
    w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.u64(d);
    for (double v : e.tensor.data()) w.f64(v);
  }
  std::string out = w.bytes();
  detail::ByteWriter tail;
  tail.u64(detail::fnv1a(out));
  return out + tail.bytes();
}

inline void save_checkpoint(const std::string& path, const ModelState& model, const RunConfig& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot write checkpoint " + path);
  const auto bytes = serialize_checkpoint(model, config);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw format_error("failed writing checkpoint " + path);
}

struct Checkpoint {
  RunConfig config;
  ModelState model;
};

// Rebuilds the model from the stored config, then overwrites every parameter.
// Names, shapes and the full parameter set must match exactly.
inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 + 4 + 8) throw format_error("checkpoint: file too short");
  detail::ByteReader tail(bytes.substr(bytes.size() - 8));
  if (tail.u64() != detail::fnv1a(bytes.substr(0, bytes.size() - 8)))
    throw format_error("checkpoint: checksum mismatch (file corrupted)");
  detail::ByteReader r(bytes.substr(0, bytes.size() - 8));
  if (r.raw(8) != std::string_view(kCheckpointMagic, 8)) throw format_error("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw format_error("checkpoint: unsupported version " + std::to_string(v));
  const auto text_len = r.u64();
  Checkpoint ck{parse_config(r.raw(text_len)), {}};
  ck.model = build(ck.config.model);
  const auto count = r.u64();
  if (count != ck.model.params.entries().size())
    throw format_error("checkpoint: holds " + std::to_string(count) + " tensors, model expects " +
                       std::to_string(ck.model.params.entries().size()));
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str32();
    if (!seen.insert(name).second) throw format_error("checkpoint: duplicate parameter '" + name + "'");
    const Tensor* target = ck.model.params.find(name);
    if (!target) throw format_error("checkpoint: unknown parameter '" + name + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    if (shape != target->shape())
      throw format_error("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                         shape_str(target->shape()));
    Tensor t = *target;
    for (auto& v : t.mutable_data()) v = r.f64();
  }
  if (r.remaining() != 0) throw format_error("checkpoint: trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace sona
