#pragma once

// Image algorithms for locating the freshly extruded line next to the nozzle
// tip and cutting it out as a fixed-size patch, plus the randomized
// augmentations applied to classifier training images.
//
// Coordinates are (x, y) pixels with x to the right and y pointing down.
// Sweep angles are in degrees; a ray at angle a runs from the center along
// (cos a, sin a) in these coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flowrl/error.hpp"
#include "flowrl/rng.hpp"

namespace flowrl::vision {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double k, Point a) { return {k * a.x, k * a.y}; }
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Row-major 8-bit grayscale image.
class IntensityGrid {
 public:
  IntensityGrid(std::size_t width, std::size_t height, std::uint8_t fill = 0)
      : IntensityGrid(width, height, std::vector<std::uint8_t>(width * height, fill)) {}

  IntensityGrid(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width_ == 0 || height_ == 0) throw DimensionError("IntensityGrid: empty dimensions");
    if (pixels_.size() != width_ * height_)
      throw DimensionError("IntensityGrid: pixel count " + std::to_string(pixels_.size()) +
                           " != " + std::to_string(width_) + "x" + std::to_string(height_));
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return pixels_.size(); }

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels_[y * width_ + x]; }

  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }
  std::span<std::uint8_t> pixels() noexcept { return pixels_; }

  bool contains(Point p) const {
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= static_cast<double>(width_ - 1) &&
           p.y <= static_cast<double>(height_ - 1);
  }

  double mean() const {
    double s = 0.0;
    for (auto v : pixels_) s += v;
    return s / static_cast<double>(pixels_.size());
  }

  friend bool operator==(const IntensityGrid&, const IntensityGrid&) = default;

 private:
  std::size_t width_;
  std::size_t height_;
  std::vector<std::uint8_t> pixels_;
};

struct LineSegment {
  Point s;
  Point e;

  double length() const { return distance(s, e); }
};

// Rectangle around a midline s->e: v1/v2 flank s, v3/v4 flank e.
struct KeyRectangle {
  Point v1, v2, v3, v4;
  double h = 0.0;
};

struct SweepResult {
  int angle_deg = 0;
  LineSegment segment;
  double mean_intensity = 0.0;
};

struct AdrConfig {
  double crop_fraction_min = 0.10;
  double crop_fraction_max = 0.30;
  double flip_probability = 0.5;
  double brightness_range = 0.10;
  double contrast_range = 0.10;
  double per_op_probability = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!(crop_fraction_min >= 0.10 && crop_fraction_min <= crop_fraction_max && crop_fraction_max <= 0.30))
      throw ConfigError("AdrConfig: crop fractions must satisfy 0.10 <= min <= max <= 0.30");
    if (!prob(flip_probability) || !prob(per_op_probability))
      throw ConfigError("AdrConfig: probabilities must lie in [0, 1]");
    if (!(brightness_range >= 0.0 && brightness_range <= 0.10) ||
        !(contrast_range >= 0.0 && contrast_range <= 0.10))
      throw ConfigError("AdrConfig: brightness/contrast ranges must lie in [0, 0.10]");
  }
};

namespace detail {

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

// Bilinear interpolation written as nested lerps so that equal neighbors
// reproduce their value exactly. Neighbors outside the grid read as 0.
inline double bilinear(const IntensityGrid& g, Point p) {
  const double fx0 = std::floor(p.x);
  const double fy0 = std::floor(p.y);
  const auto w = static_cast<long long>(g.width());
  const auto h = static_cast<long long>(g.height());
  const auto x0 = static_cast<long long>(fx0);
  const auto y0 = static_cast<long long>(fy0);
  auto px = [&](long long x, long long y) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return g.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  const double tx = p.x - fx0;
  const double ty = p.y - fy0;
  const double a = px(x0, y0), b = px(x0 + 1, y0);
  const double c = px(x0, y0 + 1), d = px(x0 + 1, y0 + 1);
  const double top = tx == 0.0 ? a : a + (b - a) * tx;
  const double bottom = tx == 0.0 ? c : c + (d - c) * tx;
  return ty == 0.0 ? top : top + (bottom - top) * ty;
}

inline IntensityGrid resize_bilinear(const IntensityGrid& g, std::size_t out_w, std::size_t out_h) {
  IntensityGrid out(out_w, out_h);
  const double sx = static_cast<double>(g.width()) / static_cast<double>(out_w);
  const double sy = static_cast<double>(g.height()) / static_cast<double>(out_h);
  const double max_x = static_cast<double>(g.width() - 1);
  const double max_y = static_cast<double>(g.height() - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      // Pixel-center alignment, clamped to the source so edges do not darken.
      const double src_x = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const double src_y = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
      out.at(x, y) = clamp_u8(bilinear(g, {src_x, src_y}));
    }
  }
  return out;
}

}  // namespace detail

// Luma conversion of three equally sized channels.
inline IntensityGrid to_grayscale(const IntensityGrid& r, const IntensityGrid& g, const IntensityGrid& b) {
  if (r.width() != g.width() || r.width() != b.width() || r.height() != g.height() ||
      r.height() != b.height())
    throw DimensionError("to_grayscale: channel dimensions differ");
  IntensityGrid out(r.width(), r.height());
  const auto rp = r.pixels(), gp = g.pixels(), bp = b.pixels();
  auto op = out.pixels();
  for (std::size_t i = 0; i < op.size(); ++i)
    op[i] = detail::clamp_u8(0.299 * rp[i] + 0.587 * gp[i] + 0.114 * bp[i]);
  return out;
}

// Global histogram equalization with the usual min-CDF offset:
//   v -> round((cdf(v) - cdf_min) / (N - cdf_min) * 255).
// A single-valued image has no spread to redistribute and is returned as is.
inline IntensityGrid equalize(const IntensityGrid& g) {
  std::array<std::size_t, 256> hist{};
  for (auto v : g.pixels()) ++hist[v];
  std::array<std::size_t, 256> cdf{};
  std::size_t run = 0;
  std::size_t cdf_min = 0;
  for (std::size_t v = 0; v < 256; ++v) {
    run += hist[v];
    cdf[v] = run;
    if (cdf_min == 0 && run > 0) cdf_min = run;
  }
  const std::size_t n = g.size();
  if (n == cdf_min) return g;
  std::array<std::uint8_t, 256> lut{};
  const double denom = static_cast<double>(n - cdf_min);
  for (std::size_t v = 0; v < 256; ++v) {
    const double c = cdf[v] < cdf_min ? 0.0 : static_cast<double>(cdf[v] - cdf_min);
    lut[v] = detail::clamp_u8(c / denom * 255.0);
  }
  IntensityGrid out = g;
  for (auto& v : out.pixels()) v = lut[v];
  return out;
}

// Mean bilinear intensity along the ray from `center` at `angle_deg`, sampled
// every pixel of arc length from 0 to `radius`. Samples outside the grid are
// dropped; returns -inf when none remain.
inline double ray_mean_intensity(const IntensityGrid& g, Point center, double radius, double angle_deg) {
  const double rad = angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(rad), dy = std::sin(rad);
  const auto samples = static_cast<int>(std::floor(radius));
  double sum = 0.0;
  int count = 0;
  for (int k = 0; k <= samples; ++k) {
    const Point p{center.x + k * dx, center.y + k * dy};
    if (!g.contains(p)) continue;
    sum += detail::bilinear(g, p);
    ++count;
  }
  if (count == 0) return -std::numeric_limits<double>::infinity();
  return sum / count;
}

// Rotates a segment of length `radius` around `center` in `step_deg`
// increments and returns the brightest direction. Ties go to the smallest
// angle.
inline SweepResult sweep_max_intensity(const IntensityGrid& g, Point center, double radius = 87.0,
                                       int step_deg = 1) {
  if (!g.contains(center)) throw GeometryError("sweep_max_intensity: center outside the image");
  if (radius < 2.0) throw GeometryError("sweep_max_intensity: radius must be >= 2");
  if (step_deg < 1 || 360 % step_deg != 0) throw ContractError("sweep_max_intensity: step must divide 360");

  SweepResult best;
  best.mean_intensity = -std::numeric_limits<double>::infinity();
  bool found = false;
  for (int a = 0; a < 360; a += step_deg) {
    const double m = ray_mean_intensity(g, center, radius, a);
    if (!std::isfinite(m)) continue;
    if (!found || m > best.mean_intensity) {
      found = true;
      best.angle_deg = a;
      best.mean_intensity = m;
    }
  }
  if (!found) throw GeometryError("sweep_max_intensity: every angle fell outside the image");
  const double rad = best.angle_deg * std::numbers::pi / 180.0;
  best.segment = {center, {center.x + radius * std::cos(rad), center.y + radius * std::sin(rad)}};
  return best;
}

// Unit vector perpendicular to s->e: normalize([s_y - e_y, e_x - s_x]).
inline Point unit_normal(const LineSegment& seg) {
  const Point g{seg.s.y - seg.e.y, seg.e.x - seg.s.x};
  const double n = std::hypot(g.x, g.y);
  if (n == 0.0) throw GeometryError("degenerate segment: s == e");
  return {g.x / n, g.y / n};
}

inline KeyRectangle rect_vertices(const LineSegment& seg, double h) {
  if (!(h > 0.0)) throw GeometryError("rect_vertices: half-height must be positive");
  const Point n = unit_normal(seg);
  return {
      {seg.s.x - n.x * h, seg.s.y - n.y * h},
      {seg.s.x + n.x * h, seg.s.y + n.y * h},
      {seg.e.x - n.x * h, seg.e.y - n.y * h},
      {seg.e.x + n.x * h, seg.e.y + n.y * h},
      h,
  };
}

// Resamples the rectangle interior onto an out_w x out_h grid. Columns run
// along s->e, rows run from the v1 side (row 0) to the v2 side.
inline IntensityGrid extract_patch(const IntensityGrid& g, const KeyRectangle& rect, std::size_t out_w = 48,
                                   std::size_t out_h = 16) {
  if (out_w == 0 || out_h == 0) throw DimensionError("extract_patch: empty output size");
  const Point along = rect.v3 - rect.v1;
  const Point across = rect.v2 - rect.v1;
  IntensityGrid out(out_w, out_h);
  bool any_inside = false;
  for (std::size_t j = 0; j < out_h; ++j) {
    const double v = (static_cast<double>(j) + 0.5) / static_cast<double>(out_h);
    for (std::size_t i = 0; i < out_w; ++i) {
      const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(out_w);
      const Point p = rect.v1 + u * along + v * across;
      if (p.x > -1.0 && p.y > -1.0 && p.x < static_cast<double>(g.width()) &&
          p.y < static_cast<double>(g.height()))
        any_inside = true;
      out.at(i, j) = detail::clamp_u8(detail::bilinear(g, p));
    }
  }
  if (!any_inside) throw GeometryError("extract_patch: rectangle lies entirely outside the image");
  return out;
}

// ---- augmentation primitives --------------------------------------------

// Removes `fraction` of the pixel area symmetrically from all four edges and
// resizes the remaining center back to the original size.
inline IntensityGrid crop_edges(const IntensityGrid& g, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ContractError("crop_edges: fraction must be in [0, 1)");
  const double keep = std::sqrt(1.0 - fraction);
  const auto kw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(g.width() * keep)));
  const auto kh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(g.height() * keep)));
  const std::size_t x0 = (g.width() - kw) / 2;
  const std::size_t y0 = (g.height() - kh) / 2;
  IntensityGrid inner(kw, kh);
  for (std::size_t y = 0; y < kh; ++y)
    for (std::size_t x = 0; x < kw; ++x) inner.at(x, y) = g.at(x0 + x, y0 + y);
  return detail::resize_bilinear(inner, g.width(), g.height());
}

inline IntensityGrid flip_horizontal(const IntensityGrid& g) {
  IntensityGrid out(g.width(), g.height());
  for (std::size_t y = 0; y < g.height(); ++y)
    for (std::size_t x = 0; x < g.width(); ++x) out.at(g.width() - 1 - x, y) = g.at(x, y);
  return out;
}

// Multiplies every pixel by (1 + delta), clamped.
inline IntensityGrid adjust_brightness(const IntensityGrid& g, double delta) {
  IntensityGrid out = g;
  for (auto& v : out.pixels()) v = detail::clamp_u8(v * (1.0 + delta));
  return out;
}

// Scales deviations from the image mean by (1 + delta), clamped.
inline IntensityGrid adjust_contrast(const IntensityGrid& g, double delta) {
  const double m = g.mean();
  IntensityGrid out = g;
  for (auto& v : out.pixels()) v = detail::clamp_u8(m + (v - m) * (1.0 + delta));
  return out;
}

struct AugmentTrace {
  bool cropped = false;
  double crop_fraction = 0.0;
  bool flipped = false;
  bool brightened = false;
  double brightness = 0.0;
  bool contrasted = false;
  double contrast = 0.0;
};

// Applies crop, flip, brightness and contrast, each independently: the flip
// with flip_probability, the others with per_op_probability. All draws come
// from a generator seeded with cfg.rng_seed.
inline IntensityGrid augment(const IntensityGrid& g, const AdrConfig& cfg, AugmentTrace* trace = nullptr) {
  cfg.validate();
  Rng rng(cfg.rng_seed);
  AugmentTrace t;
  IntensityGrid out = g;
  if (rng.bernoulli(cfg.per_op_probability)) {
    t.cropped = true;
    t.crop_fraction = rng.uniform(cfg.crop_fraction_min, cfg.crop_fraction_max);
    out = crop_edges(out, t.crop_fraction);
  }
  if (rng.bernoulli(cfg.flip_probability)) {
    t.flipped = true;
    out = flip_horizontal(out);
  }
  if (rng.bernoulli(cfg.per_op_probability)) {
    t.brightened = true;
    t.brightness = rng.uniform(-cfg.brightness_range, cfg.brightness_range);
    out = adjust_brightness(out, t.brightness);
  }
  if (rng.bernoulli(cfg.per_op_probability)) {
    t.contrasted = true;
    t.contrast = rng.uniform(-cfg.contrast_range, cfg.contrast_range);
    out = adjust_contrast(out, t.contrast);
  }
  if (trace) *trace = t;
  return out;
}

}  // namespace flowrl::vision
