#pragma once

// Portable anymap I/O (P2/P3/P5/P6) with images held as CHW doubles in [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sona/tensor.hpp"
#include "sona/text.hpp"

namespace sona {

struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> data;  // [c][h][w]

  static Image blank(std::size_t c, std::size_t h, std::size_t w) { return {c, h, w, std::vector<double>(c * h * w)}; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline std::string pnm_token(std::istream& is) {
  std::string tok;
  while (is) {
    const int ch = is.peek();
    if (ch == '#') {
      std::string comment;
      std::getline(is, comment);
    } else if (std::isspace(ch)) {
      is.get();
    } else {
      break;
    }
  }
  while (is && !std::isspace(is.peek()) && is.peek() != EOF) tok.push_back(static_cast<char>(is.get()));
  return tok;
}

}  // namespace detail

inline Image read_pnm(std::istream& is, const std::string& name = "image") {
  const std::string magic = detail::pnm_token(is);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw format_error(name + ": unsupported image format '" + magic + "'");
  const bool color = magic == "P3" || magic == "P6";
  const bool binary = magic == "P5" || magic == "P6";
  std::size_t w, h, maxval;
  try {
    w = parse_int<std::size_t>(detail::pnm_token(is));
    h = parse_int<std::size_t>(detail::pnm_token(is));
    maxval = parse_int<std::size_t>(detail::pnm_token(is));
  } catch (const format_error& e) {
    throw format_error(name + ": bad header: " + e.what());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw format_error(name + ": unsupported dimensions or depth");
  const std::size_t c = color ? 3 : 1;
  Image img = Image::blank(c, h, w);
  std::vector<std::size_t> raw(c * h * w);
  if (binary) {
    is.get();  // single whitespace after maxval
    std::vector<char> bytes(raw.size());
    if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
      throw format_error(name + ": truncated pixel data");
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<unsigned char>(bytes[i]);
  } else {
    for (auto& v : raw) {
      const auto tok = detail::pnm_token(is);
      if (tok.empty()) throw format_error(name + ": truncated pixel data");
      v = parse_int<std::size_t>(tok);
    }
  }
  // File order is interleaved [h][w][c].
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        img.at(ch, y, x) = static_cast<double>(raw[(y * w + x) * c + ch]) / static_cast<double>(maxval);
  return img;
}

inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open image " + path);
  return read_pnm(is, path);
}

// Binary P6 for 3 channels, P5 for 1.
inline void write_pnm(std::ostream& os, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw dimension_error("write_pnm: need 1 or 3 channels");
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::string bytes;
  bytes.reserve(img.data.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) bytes.push_back(static_cast<char>(to_byte(img.at(c, y, x))));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void write_pnm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw format_error("cannot write image " + path);
  write_pnm(os, img);
}

// Graymap of a real-valued map, linearly scaled so the maximum is white.
inline Image heat_to_gray(const std::vector<double>& values, std::size_t h, std::size_t w) {
  Image img = Image::blank(1, h, w);
  const double hi = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  for (std::size_t i = 0; i < h * w; ++i) img.data[i] = hi > 0.0 ? values[i] / hi : 0.0;
  return img;
}

// Stacks same-sized images into an [n x c x h x w] tensor.
inline Tensor stack(const std::vector<Image>& images) {
  if (images.empty()) throw dimension_error("stack: no images");
  const auto& f = images.front();
  std::vector<double> data;
  data.reserve(images.size() * f.data.size());
  for (const auto& img : images) {
    if (img.channels != f.channels || img.height != f.height || img.width != f.width)
      throw dimension_error("stack: images differ in size");
    data.insert(data.end(), img.data.begin(), img.data.end());
  }
  return Tensor({images.size(), f.channels, f.height, f.width}, std::move(data));
}

}  // namespace sona
