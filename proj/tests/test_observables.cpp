#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "loopsoup/brownian.hpp"
#include "loopsoup/observables.hpp"
#include "loopsoup/raster.hpp"

using namespace loopsoup;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<Point> polygon(int n, double r, Point c = {}, int turns = 1) {
  std::vector<Point> p;
  for (int i = 0; i < n * turns; ++i) p.push_back(c + std::polar(r, 2.0 * kPi * i / n));
  p.push_back(p.front());
  return p;
}

std::vector<Point> square_ccw() { return {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}, {-1, -1}}; }

std::vector<Point> figure_eight(int n) {
  std::vector<Point> p;
  for (int i = 0; i <= n; ++i) {
    const double s = 2.0 * kPi * i / n;
    p.emplace_back(std::sin(s), std::sin(s) * std::cos(s));
  }
  p.back() = p.front();
  return p;
}

std::vector<Point> reversed(std::vector<Point> p) {
  std::reverse(p.begin(), p.end());
  return p;
}

// Small soup settings for statistical checks that must stay fast.
SoupParams small_params() {
  SoupParams p;
  p.domain = ContinuumDomain::plane_window(-1, -1, 1, 1);
  p.lambda = 1.0;
  p.window = CutoffWindow(0.05, 0.4);
  p.steps = 256;
  p.refine_levels = 0;
  p.seed = 77;
  return p;
}

}  // namespace

TEST(WindingNumber, SquareExamples) {
  const auto sq = square_ccw();
  EXPECT_EQ(winding_number(sq, {0, 0}), 1);
  EXPECT_EQ(winding_number(sq, {3, 0}), 0);
  EXPECT_EQ(winding_number(reversed(sq), {0, 0}), -1);
  auto twice = sq;
  twice.insert(twice.end(), sq.begin() + 1, sq.end());
  EXPECT_EQ(winding_number(twice, {0.2, -0.3}), 2);
}

TEST(WindingNumber, PointOnCurveIsResolved) {
  const auto sq = square_ccw();
  const int w = winding_number(sq, {1, 0});
  EXPECT_TRUE(w == 0 || w == 1);
  EXPECT_EQ(winding_number(std::vector<Point>{{0, 0}}, {0, 0}), 0);
}

TEST(WindingNumber, AdditiveOverConcatenationAndOddUnderReversal) {
  RngStream rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = sample_bridge({}, 1.0, 128, rng), b = sample_bridge({}, 1.0, 128, rng);
    std::vector<Point> ab = a.samples;
    ab.insert(ab.end(), b.samples.begin() + 1, b.samples.end());
    const Point z{rng.gaussian() * 0.3, rng.gaussian() * 0.3};
    EXPECT_EQ(winding_number(ab, z), winding_number(a, z) + winding_number(b, z));
    EXPECT_EQ(winding_number(reversed(a.samples), z), -winding_number(a, z));
  }
}

TEST(FillRaster, ConvexPolygonArea) {
  const auto c = polygon(400, 1.0);
  const double exact = 0.5 * 400 * std::sin(2.0 * kPi / 400);
  for (double pitch : {0.02, 0.01, 0.005}) {
    const auto f = fill_raster(c, pitch);
    EXPECT_NEAR(f.area(), exact, 8.0 * pitch) << pitch;
  }
  const auto f = fill_raster(c, 0.01);
  EXPECT_TRUE(f.covered({0, 0}));
  EXPECT_TRUE(f.covered({0.9, 0}));
  EXPECT_FALSE(f.covered({1.1, 0}));
  EXPECT_FALSE(f.covered({5, 5}));
  EXPECT_NEAR(f.winding_area(1), f.area(), 1e-12);
}

TEST(FillRaster, LatticeAlignedPolygon) {
  // Every vertex sits on a cell center and every edge runs through cell centers.
  const std::vector<Point> diamond{{1, 0}, {0, 1}, {-1, 0}, {0, -1}, {1, 0}};
  for (double pitch : {0.1, 0.05, 0.02}) {
    const auto f = fill_raster(diamond, pitch);
    EXPECT_NEAR(f.area(), 2.0, 4.0 * pitch) << pitch;
    EXPECT_TRUE(f.covered({0, 0}));
  }
  EXPECT_NEAR(fill_raster(square_ccw(), 0.25).area(), 4.0, 1.0);
}

TEST(FillRaster, FigureEightCoversBothLobes) {
  const auto e = figure_eight(2000);
  const auto f = fill_raster(e, 0.005);
  EXPECT_TRUE(f.covered({0.5, 0.0}));
  EXPECT_TRUE(f.covered({-0.5, 0.0}));
  EXPECT_EQ(f.winding_at({0.5, 0.0}) * f.winding_at({-0.5, 0.0}), -1);
  EXPECT_EQ(f.winding_at({0.5, 0.0}), winding_number(e, {0.5, 0.0}));
  // |y| = |x| sqrt(1 - x^2), enclosing 4/3 in total.
  EXPECT_NEAR(f.area(), 4.0 / 3.0, 0.02);
}

TEST(FillRaster, WindingZeroPocketIsCovered) {
  // An outer counterclockwise circle and an inner clockwise one joined by a slit.
  std::vector<Point> c = polygon(400, 1.0);
  const auto inner = reversed(polygon(400, 0.4));
  c.push_back(inner.front());
  c.insert(c.end(), inner.begin(), inner.end());
  c.push_back(c.front());
  const auto f = fill_raster(c, 0.01);
  EXPECT_TRUE(f.covered({0, 0}));
  EXPECT_EQ(f.winding_at({0, 0}), 0);
  EXPECT_EQ(winding_number(c, {0.01, 0.02}), 0);
  EXPECT_NEAR(f.winding_area(0), kPi * 0.16, 0.03);
}

TEST(FillRaster, AreaSettlesAsPitchHalves) {
  const auto c = polygon(2000, 1.0, {0.3, 0.1});
  const double a1 = fill_raster(c, 0.01).area(), a2 = fill_raster(c, 0.005).area();
  EXPECT_LT(std::abs(a1 - a2) / a2, 0.02);
}

TEST(FillRaster, UnionOfDisjointCurves) {
  const auto a = polygon(300, 0.5, {-2, 0}), b = polygon(300, 0.5, {2, 0});
  const std::span<const Point> both[2] = {a, b};
  const auto f = fill_raster(std::span<const std::span<const Point>>(both), 0.01);
  EXPECT_NEAR(f.area(), 2 * kPi * 0.25, 0.05);
  EXPECT_TRUE(f.covered({-2, 0}));
  EXPECT_TRUE(f.covered({2, 0}));
  EXPECT_FALSE(f.covered({0, 0}));
}

TEST(FillRaster, EmptyInputAndBadPitch) {
  const std::vector<Point> none;
  const auto f = fill_raster(none, 0.1);
  EXPECT_EQ(f.area(), 0.0);
  EXPECT_FALSE(f.covered({0, 0}));
  EXPECT_THROW(fill_raster(square_ccw(), 0.0), std::invalid_argument);
}

TEST(FillRaster, CoveredContainsNonzeroWinding) {
  RngStream rng(12);
  for (int rep = 0; rep < 30; ++rep) {
    const auto b = sample_bridge({}, 1.0, 512, rng);
    const double pitch = b.diameter / 128.0;
    const auto f = fill_raster(b, pitch, {rng.uniform() * pitch, rng.uniform() * pitch});
    for (const auto& r : f.runs) {
      if (r.winding != 0) {
        ASSERT_TRUE(r.covered);
      }
      if (r.row == 0 || r.begin == 0) {
        ASSERT_FALSE(r.covered);
      }
    }
  }
}

TEST(FillRaster, RunWindingMatchesCellCenterWinding) {
  RngStream rng(13);
  const auto b = sample_bridge({}, 1.0, 256, rng);
  const double pitch = b.diameter / 64.0;
  const auto f = fill_raster(b, pitch);
  int checked = 0;
  for (int j = 0; j < f.ny; j += 3)
    for (int i = 0; i < f.nx; i += 3) {
      const Point z = f.origin + pitch * Point(i, j);
      EXPECT_EQ(f.winding_at(z), winding_number(b, z));
      ++checked;
    }
  EXPECT_GT(checked, 100);
}

TEST(FillRaster, MaskAgreesWithRuns) {
  const auto f = fill_raster(polygon(100, 1.0), 0.1);
  const auto m = f.mask();
  std::size_t n = 0;
  for (auto v : m) n += v;
  EXPECT_EQ(n, f.covered_cells());
}

TEST(Exponents, ClosedForms) {
  EXPECT_DOUBLE_EQ(delta_layering(kPi, 1.0), 0.2);
  EXPECT_DOUBLE_EQ(delta_layering(0.0, 1.0), 0.0);
  EXPECT_NEAR(delta_winding(kPi, 1.0), 0.125, 1e-15);
  EXPECT_NEAR(delta_winding(kPi + 2 * kPi, 1.0), 0.125, 1e-12);
  EXPECT_NEAR(delta_winding(-kPi / 2, 1.0), delta_winding(3 * kPi / 2, 1.0), 1e-15);
  EXPECT_THROW(delta_layering(1.0, 0.0), std::invalid_argument);
  EXPECT_DOUBLE_EQ(one_point_layering(1.0, kPi, 0.1, 0.1 * std::exp(5.0)), std::exp(-2.0));
  EXPECT_NEAR(one_point_winding(1.0, kPi, 0.1, 0.1 * std::exp(4.0)), std::exp(-1.0), 1e-14);
}

TEST(Exponents, WindingSeriesIdentity) {
  for (double b : {0.3, 1.0, kPi, 5.0}) {
    const auto s = winding_sum_identity(b, 4000);
    EXPECT_LE(std::abs(s.partial - s.limit), s.bound);
  }
}

TEST(Charges, Neutrality) {
  const std::vector<double> ok{kPi, -kPi / 2, -kPi / 2}, wrapped{kPi, kPi}, bad{1.0, 1.0};
  EXPECT_TRUE(charge_conservation_check(ok));
  EXPECT_TRUE(charge_conservation_check(wrapped));
  EXPECT_FALSE(charge_conservation_check(bad));
}

TEST(Charges, MergeRepeatedPoints) {
  ChargeVector c{{{0, 0}, {0.5, 0}, {0, 0}}, {1.0, 2.0, 0.5}};
  const auto m = merge_repeated_points(c);
  ASSERT_EQ(m.points.size(), 2u);
  EXPECT_DOUBLE_EQ(m.charges[0], 1.5);
  EXPECT_NO_THROW(m.validate());
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Correlator, RepeatedPointEqualsSummedCharge) {
  const auto p = small_params();
  const ChargeVector rep{{{0, 0}, {0, 0}}, {1.0, 1.0}}, sum{{{0, 0}}, {2.0}};
  const auto a = estimate_correlator_mc(rep, Model::Layering, p, 200);
  const auto b = estimate_correlator_mc(sum, Model::Layering, p, 200);
  EXPECT_DOUBLE_EQ(a.value, b.value);
  ASSERT_TRUE(b.oracle.has_value());
}

TEST(Correlator, OnePointMatchesOracleAndImagVanishes) {
  // Covers at coarse resolutions are biased low, so this runs at the default extrapolation.
  auto p = small_params();
  p.window = CutoffWindow(0.1, 0.4);
  p.steps = 2048;
  p.refine_levels = 2;
  const ChargeVector one{{{0, 0}}, {kPi / 2}};
  const auto e = estimate_correlator_mc(one, Model::Layering, p, 1000);
  ASSERT_TRUE(e.oracle.has_value());
  EXPECT_LT(std::abs(e.zscore()), 4.0) << e.value << " vs " << *e.oracle;
  EXPECT_LT(std::abs(e.imag), 4.0 * e.imag_std_error + 1e-12);
  const auto w = estimate_correlator_mc(one, Model::Winding, p, 1000);
  EXPECT_LT(std::abs(w.imag), 4.0 * w.imag_std_error + 1e-12);
}

TEST(Correlator, DirectAndPluginAgreeForFewPoints) {
  auto p = small_params();
  const std::vector<Point> pts{{0, 0}, {0.1, 0}, {0.05, 0.08}};
  const auto data = sample_observations(pts, p, 3000, "agree");
  const std::vector<ChargeVector> specs{
      {{pts[0]}, {kPi / 2}}, {{pts[0], pts[1]}, {kPi / 2, -kPi / 2}}, {{pts[0], pts[1], pts[2]}, {1.0, 1.0, -2.0}}};
  for (const auto& s : specs) {
    const auto d = correlator_from_observations(s, Model::Layering, data, p.lambda, p.window);
    const auto g = estimate_correlator_plugin(s, data, p.lambda, p.window);
    EXPECT_EQ(g.estimator, "plugin");
    EXPECT_LT(std::abs(d.value - g.value), 4.0 * std::hypot(d.std_error, g.std_error)) << s.points.size();
  }
}

TEST(Correlator, OnePointDecreasesWithCutoff) {
  auto p = small_params();
  p.window = CutoffWindow(0.05, 1.0);
  const std::vector<Point> pts{{0, 0}};
  const auto data = sample_observations(pts, p, 2000, "mono");
  const ChargeVector one{pts, {kPi}};
  double prev = 1.0;
  for (double R : {0.1, 0.3, 1.0}) {
    const auto e = correlator_from_observations(one, Model::Layering, data, p.lambda, CutoffWindow(0.05, R));
    EXPECT_LT(e.value, prev);
    prev = e.value;
  }
}

TEST(Correlator, RejectsBadRequests) {
  auto p = small_params();
  const ChargeVector one{{{0, 0}}, {1.0}};
  EXPECT_THROW(estimate_correlator_mc(one, Model::Layering, p, 10), std::invalid_argument);
  const ChargeVector outside{{{3, 3}}, {1.0}};
  EXPECT_THROW(estimate_correlator_mc(outside, Model::Layering, p, 200), std::invalid_argument);
}

TEST(Correlator, CsvRowShape) {
  CorrelatorEstimate e;
  e.spec = {{{0, 0}, {0.5, 0.25}}, {1.0, -1.0}};
  e.window = CutoffWindow(0.1, 1.0);
  e.lambda = 1.0;
  e.replicas = 100;
  const std::string row = correlator_csv_row(e);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(kCorrelatorCsvHeader, kCorrelatorCsvHeader + std::strlen(kCorrelatorCsvHeader), ','));
  EXPECT_NE(row.find("0:0|0.5:0.25"), std::string::npos);
  EXPECT_EQ(row.substr(row.size() - 6), "direct");
}

TEST(Extrapolation, WeightAndCombination) {
  EXPECT_EQ(extrapolation_weight(0), 0.0);
  EXPECT_NEAR(extrapolation_weight(3), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(extrapolate(1.0, 2.0, 0.5), 2.5);
  // An error of c n^{-1/3} is removed exactly.
  const double w = extrapolation_weight(2);
  const double base = 1.0 + 0.4 * std::pow(4096.0, -1.0 / 3.0), fine = 1.0 + 0.4 * std::pow(16384.0, -1.0 / 3.0);
  EXPECT_NEAR(extrapolate(base, fine, w), 1.0, 1e-12);
}

TEST(BridgeArea, StudyStructure) {
  const auto s = bridge_area_study(1.0, 256, 1000, 1.0 / 64.0, 5, 0, 2, 2);
  ASSERT_EQ(s.winding.size(), 2u);
  EXPECT_GT(s.filled_refined.mean, s.filled_base.mean);
  EXPECT_GT(s.filled.mean, s.filled_refined.mean);
  EXPECT_GT(s.winding[0].mean, s.winding[1].mean);
  EXPECT_GT(s.filled_base.mean, 2.0 * (s.winding[0].mean + s.winding[1].mean));
  EXPECT_NEAR(s.filled.mean, kPi / 5.0, 0.1 * kPi / 5.0);
  EXPECT_THROW(bridge_area_study(1.0, 256, 10, 0.01, 5), std::invalid_argument);
}
