#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "tal/binio.hpp"
#include "tal/error.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

namespace tal {

/// Labelled image set. Images are (C, H, W) tensors in [0, 1].
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t classes = 0;
  std::uint32_t seed = 0;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return images.size(); }
  Shape image_shape() const { return {channels, height, width}; }
};

namespace glyph {

/// Rendering ranges: paper level, ink contrast above paper, stroke width,
/// pixel noise std.
struct Style {
  double paper_lo = 0.0, paper_hi = 0.2;
  double contrast_lo = 0.22, contrast_hi = 0.48;
  double width_lo = 1.2, width_hi = 2.4;
  double noise = 0.05;
  double rotation = 0.26;  // max |angle| in radians
  double shift = 1.5;      // max centre offset in pixels
  double scale_lo = 0.7, scale_hi = 0.95;
};

}  // namespace glyph

struct DatasetParams {
  std::uint32_t seed = 1;
  std::size_t count = 4000;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t classes = 8;
  glyph::Style style;
};

namespace glyph {

struct Stroke {
  // Segment endpoints in template coordinates ([-1, 1] square), or a ring
  // (radius > 0) centred at (x0, y0).
  double x0, y0, x1, y1;
  double radius = 0.0;
};

inline const std::vector<std::vector<Stroke>>& templates() {
  static const std::vector<std::vector<Stroke>> t = {
      {{-0.8, 0.0, 0.8, 0.0}},                                                  // horizontal bar
      {{0.0, -0.8, 0.0, 0.8}},                                                  // vertical bar
      {{-0.7, -0.7, 0.7, 0.7}},                                                 // diagonal
      {{-0.7, 0.7, 0.7, -0.7}},                                                 // anti-diagonal
      {{0.0, 0.0, 0.0, 0.0, 0.65}},                                             // ring
      {{-0.75, 0.0, 0.75, 0.0}, {0.0, -0.75, 0.0, 0.75}},                       // plus
      {{-0.65, -0.65, 0.65, 0.65}, {-0.65, 0.65, 0.65, -0.65}},                 // cross
      {{-0.6, -0.6, 0.6, -0.6}, {0.6, -0.6, 0.6, 0.6}, {0.6, 0.6, -0.6, 0.6}, {-0.6, 0.6, -0.6, -0.6}},  // square
      {{-0.7, -0.7, 0.7, -0.7}, {0.0, -0.7, 0.0, 0.75}},                        // T
      {{-0.5, -0.75, -0.5, 0.7}, {-0.5, 0.7, 0.6, 0.7}},                        // L
  };
  return t;
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px, qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

/// Renders one jittered, noisy instance of a class template.
inline Tensor render(std::size_t cls, std::size_t channels, std::size_t h, std::size_t w, Rng& rng,
                     const Style& style = {}) {
  const auto& strokes = templates()[cls];
  const double half = 0.5 * static_cast<double>(std::min(h, w));
  const double scale = half * rng.uniform(style.scale_lo, style.scale_hi);
  const double angle = rng.uniform(-style.rotation, style.rotation);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0 + rng.uniform(-style.shift, style.shift);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0 + rng.uniform(-style.shift, style.shift);
  const double width = rng.uniform(style.width_lo, style.width_hi);
  const double paper = rng.uniform(style.paper_lo, style.paper_hi);
  const double ink = paper + rng.uniform(style.contrast_lo, style.contrast_hi);
  const double cs = std::cos(angle), sn = std::sin(angle);
  auto place = [&](double x, double y, double& ox, double& oy) {
    ox = cx + scale * (cs * x - sn * y);
    oy = cy + scale * (sn * x + cs * y);
  };
  Tensor img({channels, h, w});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double px = static_cast<double>(c), py = static_cast<double>(r);
      double d = 1e9;
      for (const Stroke& s : strokes) {
        double ax, ay, bx, by;
        place(s.x0, s.y0, ax, ay);
        if (s.radius > 0.0) {
          d = std::min(d, std::abs(std::hypot(px - ax, py - ay) - s.radius * scale));
        } else {
          place(s.x1, s.y1, bx, by);
          d = std::min(d, segment_distance(px, py, ax, ay, bx, by));
        }
      }
      const double coverage = std::clamp(width / 2.0 + 0.5 - d, 0.0, 1.0);
      const double base = paper + (ink - paper) * coverage;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        img.at(ch, r, c) = std::clamp(base + style.noise * rng.normal(), 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace glyph

/// Procedural glyph dataset: label i mod classes for image i, so class
/// counts differ by at most one. Deterministic in the seed.
inline Dataset generate_dataset(const DatasetParams& p) {
  if (p.count == 0 || p.height == 0 || p.width == 0 || p.channels == 0) {
    throw ConfigError("dataset extents must be positive");
  }
  if (p.classes < 2 || p.classes > glyph::templates().size()) {
    throw ConfigError("dataset classes must be in [2, " + std::to_string(glyph::templates().size()) + "]");
  }
  Dataset d;
  d.height = p.height;
  d.width = p.width;
  d.channels = p.channels;
  d.classes = p.classes;
  d.seed = p.seed;
  d.images.reserve(p.count);
  d.labels.reserve(p.count);
  for (std::size_t i = 0; i < p.count; ++i) {
    Rng rng(derive_seed(p.seed, 0xda7a, i));
    const std::size_t cls = i % p.classes;
    d.images.push_back(glyph::render(cls, p.channels, p.height, p.width, rng, p.style));
    d.labels.push_back(cls);
  }
  return d;
}

// Dataset file: "TADS1" | version u8 | n, H, W, C, classes, seed (u32 LE)
//   | n*H*W*C f64 LE in (n, H, W, C) order | n u32 labels.

inline constexpr char kDatasetMagic[] = "TADS1";
inline constexpr std::uint8_t kDatasetVersion = 1;

inline std::vector<unsigned char> serialize_dataset(const Dataset& d) {
  binio::Writer w;
  w.bytes(kDatasetMagic, 5);
  w.u8(kDatasetVersion);
  for (std::size_t v : {d.size(), d.height, d.width, d.channels, d.classes}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(d.seed);
  for (const Tensor& img : d.images)
    for (std::size_t r = 0; r < d.height; ++r)
      for (std::size_t c = 0; c < d.width; ++c)
        for (std::size_t ch = 0; ch < d.channels; ++ch) w.f64(img.at(ch, r, c));
  for (std::size_t l : d.labels) w.u32(static_cast<std::uint32_t>(l));
  return w.buffer();
}

inline void save_dataset(const Dataset& d, const std::string& path) {
  binio::Writer w;
  const auto bytes = serialize_dataset(d);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Dataset deserialize_dataset(binio::Reader& r) {
  if (r.fixed(5, "magic") != std::string(kDatasetMagic, 5)) throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = r.offset();
  if (r.u8("version") != kDatasetVersion) throw FormatError("unsupported dataset version", version_at);
  const std::size_t header_at = r.offset();
  Dataset d;
  const std::size_t n = r.u32("count");
  d.height = r.u32("height");
  d.width = r.u32("width");
  d.channels = r.u32("channels");
  d.classes = r.u32("classes");
  d.seed = r.u32("seed");
  if (d.height == 0 || d.width == 0 || d.channels == 0 || d.classes < 2) {
    throw FormatError("invalid dataset header", header_at);
  }
  const std::size_t per = d.height * d.width * d.channels;
  r.need(n * per * 8 + n * 4, "dataset body");
  d.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img(d.image_shape());
    for (std::size_t row = 0; row < d.height; ++row)
      for (std::size_t c = 0; c < d.width; ++c)
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
          const std::size_t at = r.offset();
          const double v = r.f64("pixel");
          if (!(v >= 0.0 && v <= 1.0)) throw FormatError("pixel outside [0,1]", at);
          img.at(ch, row, c) = v;
        }
    d.images.push_back(std::move(img));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t l = r.u32("label");
    if (l >= d.classes) throw FormatError("label out of range", at);
    d.labels.push_back(l);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after labels", r.offset());
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  auto r = binio::Reader::from_file(path);
  return deserialize_dataset(r);
}

}  // namespace tal
