#include "flowrl/vision_geometry.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "test_images.hpp"

namespace flowrl::vision {
namespace {

TEST(ToGrayscale, LumaOfPrimaries) {
  auto px = [](std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    return to_grayscale(IntensityGrid(1, 1, r), IntensityGrid(1, 1, g), IntensityGrid(1, 1, b)).at(0, 0);
  };
  EXPECT_EQ(px(255, 255, 255), 255);
  EXPECT_EQ(px(0, 0, 0), 0);
  EXPECT_EQ(px(255, 0, 0), 76);  // round(0.299 * 255) = round(76.245)
  EXPECT_EQ(px(0, 255, 0), 150);  // round(149.685)
  EXPECT_EQ(px(0, 0, 255), 29);   // round(29.07)
}

TEST(ToGrayscale, MismatchedChannelsThrow) {
  EXPECT_THROW(to_grayscale(IntensityGrid(2, 2), IntensityGrid(2, 2), IntensityGrid(3, 2)), DimensionError);
}

TEST(IntensityGrid, RejectsBadGeometry) {
  EXPECT_THROW(IntensityGrid(0, 3), DimensionError);
  EXPECT_THROW(IntensityGrid(2, 2, std::vector<std::uint8_t>(3)), DimensionError);
}

// Independent CDF evaluation: counts of pixels <= v, offset by the count of
// the darkest level.
std::vector<std::uint8_t> equalize_oracle(const std::vector<std::uint8_t>& px) {
  const std::size_t n = px.size();
  const auto lowest = *std::min_element(px.begin(), px.end());
  const auto cdf = [&](std::uint8_t v) {
    return static_cast<double>(std::count_if(px.begin(), px.end(), [&](auto p) { return p <= v; }));
  };
  const double cmin = cdf(lowest);
  std::vector<std::uint8_t> out;
  for (auto v : px) out.push_back(static_cast<std::uint8_t>(std::lround((cdf(v) - cmin) / (n - cmin) * 255.0)));
  return out;
}

TEST(Equalize, ConstantGridStaysConstant) {
  const auto out = equalize(IntensityGrid(5, 4, 128));
  std::set<std::uint8_t> values(out.pixels().begin(), out.pixels().end());
  EXPECT_EQ(values.size(), 1u);
}

TEST(Equalize, TwoPixelExtremes) {
  const auto out = equalize(IntensityGrid(2, 1, {0, 255}));
  EXPECT_LT(out.at(0, 0), 255);
  EXPECT_EQ(out.at(1, 0), 255);
}

TEST(Equalize, MatchesBruteForceCdf) {
  const std::vector<std::uint8_t> px{10, 10, 20, 20};
  const auto out = equalize(IntensityGrid(4, 1, px));
  const auto expected = equalize_oracle(px);
  ASSERT_EQ(std::vector<std::uint8_t>(out.pixels().begin(), out.pixels().end()), expected);
  EXPECT_LT(out.at(0, 0), out.at(2, 0));

  const auto img = test::random_grid(23, 17, 5);
  const auto big = equalize(img);
  const std::vector<std::uint8_t> src(img.pixels().begin(), img.pixels().end());
  EXPECT_EQ(std::vector<std::uint8_t>(big.pixels().begin(), big.pixels().end()), equalize_oracle(src));
}

TEST(Equalize, MonotoneAndNearlyIdempotent) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = test::random_grid(31, 29, seed, 40, 180);
    const auto once = equalize(g);
    std::map<std::uint8_t, std::uint8_t> lut;
    for (std::size_t i = 0; i < g.size(); ++i) lut[g.pixels()[i]] = once.pixels()[i];
    std::uint8_t prev = 0;
    for (auto [in, out] : lut) {
      EXPECT_GE(out, prev) << "input " << int(in);
      prev = out;
    }
    const auto twice = equalize(once);
    for (std::size_t i = 0; i < g.size(); ++i)
      EXPECT_LE(std::abs(int(twice.pixels()[i]) - int(once.pixels()[i])), 1);
  }
}

TEST(Sweep, FindsSyntheticRay) {
  const auto img = test::ray_image(201, 201, {100, 100}, 37.0, 80.0);
  const auto r = sweep_max_intensity(img, {100, 100}, 80.0);
  EXPECT_LE(std::abs(r.angle_deg - 37), 2);
  EXPECT_NEAR(r.segment.length(), 80.0, 1e-9);
}

TEST(Sweep, UniformGridTiesToZero) {
  const auto r = sweep_max_intensity(IntensityGrid(60, 60, 100), {30, 30}, 20.0);
  EXPECT_EQ(r.angle_deg, 0);
  EXPECT_EQ(r.mean_intensity, 100.0);
}

TEST(Sweep, RayAtZeroBeatsBackground) {
  IntensityGrid img = test::ray_image(101, 101, {50, 50}, 0.0, 40.0, 1.5, 30);
  const auto r = sweep_max_intensity(img, {50, 50}, 40.0);
  EXPECT_EQ(r.angle_deg, 0);
  EXPECT_GT(r.mean_intensity, img.mean());
}

TEST(Sweep, RotationConsistent) {
  for (double angle : {0.0, 23.0, 95.0, 181.0, 300.0}) {
    const auto img = test::ray_image(161, 161, {80, 80}, angle, 60.0);
    const auto rotated = test::rotate90(img);
    const int a = sweep_max_intensity(img, {80, 80}, 60.0).angle_deg;
    const int b = sweep_max_intensity(rotated, {80, 80}, 60.0).angle_deg;
    const int diff = ((b - a - 90) % 360 + 360) % 360;
    EXPECT_TRUE(diff <= 1 || diff >= 359) << "angle " << angle << ": " << a << " -> " << b;
  }
}

TEST(Sweep, ErrorPaths) {
  const IntensityGrid g(20, 20, 5);
  EXPECT_THROW(sweep_max_intensity(g, {25, 5}, 10.0), GeometryError);
  EXPECT_THROW(sweep_max_intensity(g, {5, 5}, 1.0), GeometryError);
}

void expect_point(Point p, double x, double y) {
  EXPECT_DOUBLE_EQ(p.x, x);
  EXPECT_DOUBLE_EQ(p.y, y);
}

TEST(RectVertices, AxisAlignedFixtures) {
  const auto r = rect_vertices({{10, 0}, {0, 0}}, 5);
  expect_point(r.v1, 10, 5);
  expect_point(r.v2, 10, -5);
  expect_point(r.v3, 0, 5);
  expect_point(r.v4, 0, -5);

  // g = (-10, 0), unit normal (-1, 0): v1 = s - n h lies on the +x side.
  const auto v = rect_vertices({{0, 0}, {0, 10}}, 2);
  expect_point(v.v1, 2, 0);
  expect_point(v.v2, -2, 0);
  expect_point(v.v3, 2, 10);
  expect_point(v.v4, -2, 10);
}

TEST(RectVertices, GeometricInvariants) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const LineSegment seg{{rng.uniform(-50, 50), rng.uniform(-50, 50)}, {rng.uniform(-50, 50), rng.uniform(-50, 50)}};
    const double h = rng.uniform(0.5, 20);
    const auto r = rect_vertices(seg, h);
    const Point n = unit_normal(seg);
    EXPECT_NEAR(std::hypot(n.x, n.y), 1.0, 1e-9);

    const Point mid_s = 0.5 * (r.v1 + r.v2), mid_e = 0.5 * (r.v3 + r.v4);
    EXPECT_NEAR(distance(mid_s, seg.s), 0.0, 1e-9);
    EXPECT_NEAR(distance(mid_e, seg.e), 0.0, 1e-9);
    EXPECT_NEAR(distance(r.v1, r.v2), 2 * h, 1e-6);
    EXPECT_NEAR(distance(r.v3, r.v4), 2 * h, 1e-6);
    // v1v3 and v2v4 are parallel to s->e.
    const Point d13 = r.v3 - r.v1, d24 = r.v4 - r.v2;
    EXPECT_NEAR(d13.x * n.x + d13.y * n.y, 0.0, 1e-6);
    EXPECT_NEAR(d24.x * n.x + d24.y * n.y, 0.0, 1e-6);

    // Reversing the segment flips the normal: the same four corners come
    // back with v1<->v4 and v2<->v3 exchanged.
    const auto sw = rect_vertices({seg.e, seg.s}, h);
    EXPECT_NEAR(distance(sw.v1, r.v4), 0.0, 1e-9);
    EXPECT_NEAR(distance(sw.v2, r.v3), 0.0, 1e-9);
    EXPECT_NEAR(distance(sw.v3, r.v2), 0.0, 1e-9);
    EXPECT_NEAR(distance(sw.v4, r.v1), 0.0, 1e-9);
  }
}

TEST(RectVertices, ErrorPaths) {
  EXPECT_THROW(rect_vertices({{1, 1}, {1, 1}}, 3), GeometryError);
  EXPECT_THROW(rect_vertices({{0, 0}, {1, 1}}, 0), GeometryError);
}

TEST(ExtractPatch, ConstantRegion) {
  const IntensityGrid g(200, 100, 200);
  const auto patch = extract_patch(g, rect_vertices({{20, 50}, {107, 50}}, 10));
  ASSERT_EQ(patch.width(), 48u);
  ASSERT_EQ(patch.height(), 16u);
  for (auto v : patch.pixels()) EXPECT_EQ(v, 200);
}

TEST(ExtractPatch, HalfFieldSplitsAtMidline) {
  IntensityGrid g(200, 100);
  for (std::size_t y = 0; y < 100; ++y)
    for (std::size_t x = 0; x < 200; ++x) g.at(x, y) = y < 50 ? 255 : 0;
  // s->e along +x: the v1 side (row 0) is toward smaller y.
  const auto patch = extract_patch(g, rect_vertices({{20, 49.5}, {107, 49.5}}, 10));
  for (std::size_t x = 0; x < patch.width(); ++x) {
    for (std::size_t y = 0; y < 7; ++y) EXPECT_EQ(patch.at(x, y), 255);
    for (std::size_t y = 9; y < 16; ++y) EXPECT_EQ(patch.at(x, y), 0);
  }
}

TEST(ExtractPatch, RotatedRectTurnsHorizontalGradientVertical) {
  IntensityGrid g(120, 140);
  for (std::size_t y = 0; y < g.height(); ++y)
    for (std::size_t x = 0; x < g.width(); ++x) g.at(x, y) = static_cast<std::uint8_t>(x);
  const LineSegment seg{{50, 20}, {50, 107}};
  const double h = 8;
  const auto patch = extract_patch(g, rect_vertices(seg, h));
  // normal = (-1, 0): row j samples x = s.x + h - 2h (j + 0.5) / 16.
  for (std::size_t j = 0; j < 16; ++j) {
    const double x = seg.s.x + h - 2 * h * (j + 0.5) / 16.0;
    const auto expected = static_cast<std::uint8_t>(std::round(x));
    for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(patch.at(i, j), expected) << i << "," << j;
  }
}

TEST(ExtractPatch, RectOutsideThrows) {
  const IntensityGrid g(50, 50, 9);
  EXPECT_THROW(extract_patch(g, rect_vertices({{200, 200}, {287, 200}}, 10)), GeometryError);
  EXPECT_NO_THROW(extract_patch(g, rect_vertices({{40, 25}, {127, 25}}, 10)));
}

TEST(Augment, AllSkippedIsIdentity) {
  const auto g = test::random_grid(40, 30, 11);
  AdrConfig cfg;
  bool found = false;
  for (std::uint64_t seed = 0; seed < 1000 && !found; ++seed) {
    cfg.rng_seed = seed;
    AugmentTrace t;
    const auto out = augment(g, cfg, &t);
    if (!t.cropped && !t.flipped && !t.brightened && !t.contrasted) {
      found = true;
      EXPECT_EQ(out, g);
    }
  }
  EXPECT_TRUE(found);
}

TEST(Augment, SeedDeterminism) {
  const auto g = test::random_grid(40, 30, 12);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    AdrConfig cfg;
    cfg.rng_seed = seed;
    EXPECT_EQ(augment(g, cfg), augment(g, cfg));
  }
}

TEST(Augment, AlwaysOnOpsStayInRange) {
  AdrConfig cfg;
  cfg.per_op_probability = 1.0;
  cfg.flip_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    cfg.rng_seed = seed;
    AugmentTrace t;
    const auto out = augment(test::random_grid(32, 24, seed), cfg, &t);
    EXPECT_TRUE(t.cropped && t.flipped && t.brightened && t.contrasted);
    EXPECT_GE(t.crop_fraction, 0.10);
    EXPECT_LE(t.crop_fraction, 0.30);
    EXPECT_LE(std::abs(t.brightness), 0.10);
    EXPECT_LE(std::abs(t.contrast), 0.10);
    EXPECT_EQ(out.width(), 32u);
    EXPECT_EQ(out.height(), 24u);
  }
}

TEST(Augment, Primitives) {
  const auto g = test::random_grid(17, 9, 4);
  EXPECT_EQ(flip_horizontal(flip_horizontal(g)), g);
  EXPECT_EQ(flip_horizontal(g).at(0, 3), g.at(16, 3));

  const auto bright = adjust_brightness(IntensityGrid(6, 6, 100), 0.10);
  for (auto v : bright.pixels()) EXPECT_EQ(v, 110);
  const auto saturated = adjust_brightness(IntensityGrid(3, 3, 250), 0.10);
  for (auto v : saturated.pixels()) EXPECT_EQ(v, 255);

  const auto flat = adjust_contrast(IntensityGrid(4, 4, 77), 0.1);
  for (auto v : flat.pixels()) EXPECT_EQ(v, 77);
  const auto cropped = crop_edges(IntensityGrid(30, 20, 42), 0.25);
  for (auto v : cropped.pixels()) EXPECT_EQ(v, 42);
}

TEST(Augment, ConfigValidation) {
  AdrConfig cfg;
  cfg.crop_fraction_max = 0.5;
  EXPECT_THROW(augment(IntensityGrid(4, 4), cfg), ConfigError);
  cfg = {};
  cfg.per_op_probability = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.brightness_range = 0.2;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace flowrl::vision
