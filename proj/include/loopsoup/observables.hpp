#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "brownian.hpp"
#include "engine.hpp"
#include "raster.hpp"
#include "stats.hpp"

namespace loopsoup {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// beta reduced to [0, 2 pi).
inline double reduce_angle(double beta) {
  double b = std::fmod(beta, kTwoPi);
  if (b < 0.0) b += kTwoPi;
  if (b >= kTwoPi) b = 0.0;
  return b;
}

inline double delta_layering(double beta, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("delta_layering: lambda must be positive");
  return lambda / 10.0 * (1.0 - std::cos(beta));
}

inline double delta_winding(double beta, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("delta_winding: lambda must be positive");
  const double b = reduce_angle(beta);
  return lambda * b * (kTwoPi - b) / (8.0 * std::numbers::pi * std::numbers::pi);
}

struct WindingSumIdentity {
  double partial = 0.0, limit = 0.0, bound = 0.0;
};

/// sum_{m<=M} (1 - cos m beta) / m^2 against beta (2 pi - beta) / 4.
inline WindingSumIdentity winding_sum_identity(double beta, std::size_t M) {
  if (M < 1) throw std::invalid_argument("winding_sum_identity: M must be >= 1");
  const double b = reduce_angle(beta);
  CompensatedSum s;
  for (std::size_t m = M; m >= 1; --m) s.add((1.0 - std::cos(double(m) * b)) / (double(m) * double(m)));
  return {s.value(), b * (kTwoPi - b) / 4.0, 2.0 / double(M)};
}

inline double one_point_layering(double lambda, double beta, double delta, double R) {
  if (!(delta > 0.0 && delta < R)) throw std::invalid_argument("one_point_layering: need 0 < delta < R");
  return std::pow(R / delta, -lambda / 5.0 * (1.0 - std::cos(beta)));
}

inline double one_point_winding(double lambda, double beta, double delta, double R) {
  if (!(delta > 0.0 && delta < R)) throw std::invalid_argument("one_point_winding: need 0 < delta < R");
  const double b = reduce_angle(beta);
  return std::pow(R / delta, -lambda * b * (kTwoPi - b) / (4.0 * std::numbers::pi * std::numbers::pi));
}

inline bool charge_conservation_check(std::span<const double> charges) {
  CompensatedSum s;
  for (double b : charges) s.add(b);
  const double k = std::round(s.value() / kTwoPi);
  return std::abs(s.value() - k * kTwoPi) <= 1e-9;
}

/// Winding number of a closed polyline about z from summed angle increments.
///
/// Points within 1e-9 diameters of the path are moved by that distance first; a rounding
/// residual of 0.25 or more is reported as a degenerate winding.
inline int winding_number(std::span<const Point> curve, Point z) {
  if (curve.size() < 2) return 0;
  const Box b = bounding_box(curve);
  const double scale = std::max(std::hypot(b.width(), b.height()), std::numeric_limits<double>::min());
  const double eps = 1e-9 * scale;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const Point a = curve[i], ab = curve[i + 1] - curve[i];
    const double len2 = std::norm(ab);
    const double s = len2 > 0.0 ? std::clamp(((z - a) * std::conj(ab)).real() / len2, 0.0, 1.0) : 0.0;
    if (std::abs(z - (a + s * ab)) <= eps) {
      z += Point(0.6 * eps * 2.0, 0.8 * eps * 2.0);
      break;
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const Point u = curve[i] - z, v = curve[i + 1] - z;
    total += std::atan2(u.real() * v.imag() - u.imag() * v.real(), u.real() * v.real() + u.imag() * v.imag());
  }
  const double turns = total / kTwoPi;
  const double k = std::round(turns);
  if (std::abs(turns - k) >= 0.25) throw std::runtime_error("degenerate winding");
  return static_cast<int>(k);
}

inline int winding_number(const BrownianLoop& loop, Point z) { return winding_number(std::span<const Point>(loop.samples), z); }

/// Weight w of the coupled extrapolation fine + w (fine - base), where fine has 2^levels
/// times the steps of base. The filled hull of an n-step polygon misses area of order
/// n^{-1/3} along its frontier.
inline double extrapolation_weight(int refine_levels) { return refine_levels > 0 ? 1.0 / (std::exp2(refine_levels / 3.0) - 1.0) : 0.0; }

inline double extrapolate(double base, double fine, double weight) { return fine + weight * (fine - base); }

// Filled and winding areas of single bridges.

struct BridgeAreaStudy {
  double t = 1.0;
  std::size_t steps = 0;
  double pitch = 0.0;
  int refine_levels = 0;
  /// Filled area at `steps`, after refinement, and extrapolated from the two.
  AggregateResult filled_base, filled_refined, filled;
  /// Entry k-1 is the mean of the areas with winding +k and -k, at `steps`.
  std::vector<AggregateResult> winding;
  AggregateResult zero_in_filling;
};

/// Winding areas stay at the base resolution: their error sits next to the whole path and
/// shrinks far slower than any power of n, so no extrapolation applies to them.
inline BridgeAreaStudy bridge_area_study(double t, std::size_t steps, std::size_t replicas, double pitch, std::uint64_t seed, unsigned workers = 0,
                                         int kmax = 3, int refine_levels = 2) {
  if (replicas < 1000) throw std::invalid_argument("bridge area estimates need at least 1000 replicas");
  if (!(pitch > 0.0)) throw std::invalid_argument("pitch must be positive");
  if (refine_levels < 0) throw std::invalid_argument("refine_levels must be non-negative");
  const double w = extrapolation_weight(refine_levels);
  ExperimentPlan plan{"bridge-area", seed, replicas, 0, workers, {}};
  const auto rows = run_indexed(plan, [&](std::uint64_t, RngStream& rng) {
    const BrownianLoop b = sample_bridge({0.0, 0.0}, t, steps, rng);
    const Point anchor(rng.uniform() * pitch, rng.uniform() * pitch);
    const FilledRaster f = fill_raster(b, pitch, anchor);
    const double fine = refine_levels > 0 ? fill_raster(refine_loop(b, refine_levels, rng), pitch, anchor).area() : f.area();
    std::vector<double> row{f.area(), fine, extrapolate(f.area(), fine, w)};
    for (int k = 1; k <= kmax; ++k) row.push_back(0.5 * (f.winding_area(k) + f.winding_area(-k)));
    row.push_back(f.winding_area(0));
    return row;
  });
  auto cols = aggregate_columns(rows);
  BridgeAreaStudy s;
  s.t = t;
  s.steps = steps;
  s.pitch = pitch;
  s.refine_levels = refine_levels;
  s.filled_base = cols[0];
  s.filled_refined = cols[1];
  s.filled = cols[2];
  for (int k = 1; k <= kmax; ++k) s.winding.push_back(cols[static_cast<std::size_t>(k) + 2]);
  s.zero_in_filling = cols.back();
  return s;
}

struct RefinementLevel {
  std::size_t steps = 0;
  AggregateResult filled, winding_one;
};

/// Filled area and winding-one area of the same bridges sampled at base_steps and refined
/// level by level, each polygon rasterized with a shared anchor.
inline std::vector<RefinementLevel> refinement_study(double t, std::size_t base_steps, int levels, std::size_t replicas, double pitch,
                                                     std::uint64_t seed, unsigned workers = 0) {
  if (levels < 0) throw std::invalid_argument("refinement_study: levels must be non-negative");
  if (!(pitch > 0.0)) throw std::invalid_argument("pitch must be positive");
  ExperimentPlan plan{"refinement", seed, replicas, 0, workers, {}};
  const auto rows = run_indexed(plan, [&](std::uint64_t, RngStream& rng) {
    BrownianLoop b = sample_bridge({0.0, 0.0}, t, base_steps, rng);
    const Point anchor(rng.uniform() * pitch, rng.uniform() * pitch);
    std::vector<double> row;
    for (int l = 0; l <= levels; ++l) {
      if (l > 0) b = refine_loop(b, 1, rng);
      const FilledRaster f = fill_raster(b, pitch, anchor);
      row.push_back(f.area());
      row.push_back(0.5 * (f.winding_area(1) + f.winding_area(-1)));
    }
    return row;
  });
  const auto cols = aggregate_columns(rows);
  std::vector<RefinementLevel> out;
  for (int l = 0; l <= levels; ++l)
    out.push_back({base_steps << l, cols[2 * static_cast<std::size_t>(l)], cols[2 * static_cast<std::size_t>(l) + 1]});
  return out;
}

/// Mean filled area of duration-t bridges; the replica seed is drawn from rng.
inline AggregateResult filled_area_bridge_mc(double t, std::size_t steps, std::size_t replicas, RngStream& rng, double pitch = 0.0) {
  if (pitch <= 0.0) pitch = std::sqrt(t) / 256.0;
  return bridge_area_study(t, steps, replicas, pitch, rng.engine()(), 0, 1).filled;
}

/// Mean area with winding k (k = 0 restricted to the filling).
inline AggregateResult winding_area_mc(int k, double t, std::size_t steps, std::size_t replicas, RngStream& rng, double pitch = 0.0) {
  if (pitch <= 0.0) pitch = std::sqrt(t) / 256.0;
  const int kk = std::abs(k);
  auto s = bridge_area_study(t, steps, replicas, pitch, rng.engine()(), 0, std::max(kk, 1));
  return kk == 0 ? s.zero_in_filling : s.winding[static_cast<std::size_t>(kk - 1)];
}

// Soup observables at a finite set of points.

inline constexpr std::size_t kMaxObservedPoints = 16;

struct ChargeVector {
  std::vector<Point> points;
  std::vector<double> charges;

  void validate() const {
    if (points.empty() || points.size() != charges.size()) throw std::invalid_argument("charge vector needs one charge per point");
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = i + 1; j < points.size(); ++j)
        if (points[i] == points[j]) throw std::invalid_argument("charge vector points must be distinct");
  }
  double min_separation() const {
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = i + 1; j < points.size(); ++j) d = std::min(d, std::abs(points[i] - points[j]));
    return d;
  }
};

/// Coincident points merged, their charges added.
inline ChargeVector merge_repeated_points(const ChargeVector& c) {
  ChargeVector out;
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    auto it = std::find(out.points.begin(), out.points.end(), c.points[i]);
    if (it == out.points.end()) {
      out.points.push_back(c.points[i]);
      out.charges.push_back(c.charges[i]);
    } else {
      out.charges[static_cast<std::size_t>(it - out.points.begin())] += c.charges[i];
    }
  }
  return out;
}

enum class Model { Layering, Winding };

inline const char* model_name(Model m) { return m == Model::Layering ? "layering" : "winding"; }

struct SoupParams {
  ContinuumDomain domain = ContinuumDomain::plane_window(-1.0, -1.0, 1.0, 1.0);
  double lambda = 1.0;
  CutoffWindow window{0.05, 1.0};
  std::size_t steps = 4096;
  /// Raster pitch per loop: diameter * pitch_diameter_fraction, capped at
  /// delta * pitch_delta_fraction when that is positive.
  double pitch_diameter_fraction = 1.0 / 256.0;
  double pitch_delta_fraction = 0.0;

  double pitch_for(double diameter) const {
    const double p = diameter * pitch_diameter_fraction;
    return pitch_delta_fraction > 0.0 ? std::min(p, window.delta * pitch_delta_fraction) : p;
  }
  LocalSoupOptions sampler{};
  /// Cover tests are repeated on each nearby loop refined this many times; cover-based
  /// statistics are extrapolated from the two resolutions. 0 disables it.
  int refine_levels = 2;
  std::uint64_t seed = 1;
  /// Replica indices used are [first_replica, first_replica + replicas).
  std::uint64_t first_replica = 0;
  unsigned workers = 0;

  double extrapolation() const { return extrapolation_weight(refine_levels); }
};

/// What one loop does at the observed points. Only loops covering at least one point are kept.
struct LoopObservation {
  double diameter = 0.0;
  int type_flag = 1;
  std::uint32_t cover_mask = 0;
  std::uint32_t fine_cover_mask = 0;  ///< cover after refinement
  std::array<int, kMaxObservedPoints> winding{};

  std::uint32_t mask(bool fine) const { return fine ? fine_cover_mask : cover_mask; }
};

using ReplicaObservations = std::vector<LoopObservation>;

namespace detail {

inline std::uint32_t cover_mask(const BrownianLoop& l, std::span<const Point> points, double pitch, std::array<int, kMaxObservedPoints>* winding) {
  const Box b = bounding_box(l.samples);
  std::uint32_t mask = 0;
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Point z = points[j];
    if (!b.contains(z)) continue;
    const int w = winding_number(l, z);
    if (winding) (*winding)[j] = w;
    if (w != 0 || fill_raster(l, pitch, z).covered(z)) mask |= std::uint32_t{1} << j;
  }
  return mask;
}

}  // namespace detail

/// Refinement draws come from rng, and only loops passing within a few step lengths of a
/// point are refined.
inline ReplicaObservations observe_soup(const ContinuumSoupRealization& soup, std::span<const Point> points, const SoupParams& p, RngStream& rng) {
  ReplicaObservations out;
  for (const SoupLoop& s : soup.loops) {
    const BrownianLoop& l = s.loop;
    LoopObservation o;
    o.diameter = l.diameter;
    o.type_flag = s.type_flag;
    const double pitch = p.pitch_for(l.diameter);
    o.cover_mask = detail::cover_mask(l, points, pitch, &o.winding);
    o.fine_cover_mask = o.cover_mask;
    if (p.refine_levels > 0) {
      const Box b = bounding_box(l.samples);
      const double m = 6.0 * std::sqrt(l.duration / double(l.steps()));
      const bool near = std::any_of(points.begin(), points.end(), [&](Point z) {
        return z.real() >= b.x0 - m && z.real() <= b.x1 + m && z.imag() >= b.y0 - m && z.imag() <= b.y1 + m;
      });
      o.fine_cover_mask = near ? detail::cover_mask(refine_loop(l, p.refine_levels, rng), points, pitch, nullptr) : 0;
    }
    if (o.cover_mask | o.fine_cover_mask) out.push_back(o);
  }
  return out;
}

inline void check_points_in_region(const ContinuumDomain& d, std::span<const Point> points) {
  if (points.size() > kMaxObservedPoints) throw std::invalid_argument("too many observation points");
  for (const Point& z : points) {
    const bool inside = d.bounded() ? d.contains(z) : (d.box().contains(z) && d.contains(z));
    if (!inside) throw std::invalid_argument("observation point outside the observation region");
  }
}

/// Per-replica observations of a soup around the points.
inline std::vector<ReplicaObservations> sample_observations(std::span<const Point> points, const SoupParams& p, std::size_t replicas,
                                                            std::string_view experiment, std::uint64_t channel = 0) {
  check_points_in_region(p.domain, points);
  const std::vector<Point> pts(points.begin(), points.end());
  ExperimentPlan plan{std::string(experiment), p.seed, replicas, p.first_replica, p.workers, {}};
  return run_indexed(plan, [&](std::uint64_t i, RngStream&) {
    RngStream rng = derive_stream(p.seed, i, channel);
    const auto soup = sample_local_soup(p.domain, p.lambda, p.window, pts, p.steps, rng, p.sampler);
    return observe_soup(soup, pts, p, rng);
  });
}

/// Field value N(z_j) for one replica, over loops with diameter < R. `fine` selects the
/// refined covers; windings are always those of the sampled polygon.
inline double field_value(const ReplicaObservations& obs, std::size_t j, Model model, double R, bool fine = false) {
  double n = 0.0;
  for (const auto& o : obs) {
    if (o.diameter >= R || !(o.mask(fine && model == Model::Layering) >> j & 1u)) continue;
    n += model == Model::Layering ? double(o.type_flag) : double(o.winding[j]);
  }
  return n;
}

struct CorrelatorEstimate {
  Model model = Model::Layering;
  /// "direct" (mean of cosines) or "plugin" (exp of minus the mean statistic).
  std::string estimator = "direct";
  ChargeVector spec;
  double value = 0.0;
  double std_error = 0.0;
  std::size_t replicas = 0;
  std::optional<double> oracle;
  CutoffWindow window;
  double lambda = 0.0;
  /// Average of the sines, expected to vanish.
  double imag = 0.0, imag_std_error = 0.0;

  double zscore() const { return oracle ? loopsoup::zscore(value, *oracle, std_error) : std::numeric_limits<double>::quiet_NaN(); }
};

/// Direct estimator: average of cos(sum_j beta_j N(z_j)) over replicas, using loops of
/// diameter < R. For the layering model each replica contributes the extrapolated
/// combination of its base and refined values.
inline CorrelatorEstimate correlator_from_observations(const ChargeVector& spec, Model model, const std::vector<ReplicaObservations>& data,
                                                       double lambda, const CutoffWindow& window, double extrapolation = 0.0,
                                                       std::size_t point_offset = 0) {
  std::vector<double> re(data.size()), im(data.size());
  const bool both = model == Model::Layering && extrapolation != 0.0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    double phase = 0.0, phase_fine = 0.0;
    for (std::size_t j = 0; j < spec.points.size(); ++j) {
      if (spec.charges[j] == 0.0) continue;
      phase += spec.charges[j] * field_value(data[r], point_offset + j, model, window.R);
      if (both) phase_fine += spec.charges[j] * field_value(data[r], point_offset + j, model, window.R, true);
    }
    re[r] = both ? extrapolate(std::cos(phase), std::cos(phase_fine), extrapolation) : std::cos(phase);
    im[r] = both ? extrapolate(std::sin(phase), std::sin(phase_fine), extrapolation) : std::sin(phase);
  }
  const auto a = aggregate(re), b = aggregate(im);
  CorrelatorEstimate e;
  e.model = model;
  e.spec = spec;
  e.value = a.mean;
  e.std_error = a.std_error;
  e.replicas = data.size();
  e.window = window;
  e.lambda = lambda;
  e.imag = b.mean;
  e.imag_std_error = b.std_error;
  return e;
}

inline std::optional<double> one_point_oracle(const ChargeVector& spec, Model model, double lambda, const CutoffWindow& w, const ContinuumDomain& d) {
  if (spec.points.size() != 1 || d.bounded() || !w.finite()) return std::nullopt;
  return model == Model::Layering ? one_point_layering(lambda, spec.charges[0], w.delta, w.R) : one_point_winding(lambda, spec.charges[0], w.delta, w.R);
}

inline CorrelatorEstimate estimate_correlator_mc(const ChargeVector& spec_in, Model model, const SoupParams& p, std::size_t replicas) {
  if (replicas < 100) throw std::invalid_argument("correlator estimates need at least 100 replicas");
  const ChargeVector spec = merge_repeated_points(spec_in);
  spec.validate();
  const auto data = sample_observations(spec.points, p, replicas, "correlator");
  auto e = correlator_from_observations(spec, model, data, p.lambda, p.window, p.extrapolation());
  e.oracle = one_point_oracle(spec, model, p.lambda, p.window, p.domain);
  return e;
}

/// Per-replica value of sum_S count_S (1 - cos sum_{k in S} beta_k), S over subsets of
/// `subset`, extrapolated from the base and refined covers.
inline double plugin_statistic(const ReplicaObservations& obs, std::span<const std::size_t> subset, std::span<const double> charges, double R,
                               double extrapolation = 0.0) {
  double x[2] = {0.0, 0.0};
  for (const auto& o : obs) {
    if (o.diameter >= R) continue;
    for (int f = 0; f < 2; ++f) {
      const std::uint32_t mask = o.mask(f == 1);
      double b = 0.0;
      bool any = false;
      for (std::size_t k = 0; k < subset.size(); ++k)
        if (mask >> subset[k] & 1u) {
          b += charges[k];
          any = true;
        }
      if (any) x[f] += 1.0 - std::cos(b);
    }
  }
  return extrapolation != 0.0 ? extrapolate(x[0], x[1], extrapolation) : x[0];
}

/// Plug-in estimator: prod_S exp(-lambda alpha(S) (1 - cos sum beta)) with alpha(S) from
/// mean counts of loops covering exactly S. Layering model only.
inline CorrelatorEstimate estimate_correlator_plugin(const ChargeVector& spec, const std::vector<ReplicaObservations>& data, double lambda,
                                                     const CutoffWindow& window, double extrapolation = 0.0, std::span<const std::size_t> subset = {}) {
  std::vector<std::size_t> idx(subset.begin(), subset.end());
  if (idx.empty())
    for (std::size_t j = 0; j < spec.points.size(); ++j) idx.push_back(j);
  std::vector<double> x(data.size());
  for (std::size_t r = 0; r < data.size(); ++r) x[r] = plugin_statistic(data[r], idx, spec.charges, window.R, extrapolation);
  const auto a = aggregate(x);
  CorrelatorEstimate e;
  e.model = Model::Layering;
  e.estimator = "plugin";
  e.spec = spec;
  e.value = std::exp(-a.mean);
  e.std_error = e.value * a.std_error;
  e.replicas = data.size();
  e.window = window;
  e.lambda = lambda;
  return e;
}

// Points are x:y pairs and charges plain numbers, both joined by '|'.

inline constexpr const char* kCorrelatorCsvHeader = "model,n,points,charges,delta,R,lambda,replicas,value,stderr,oracle,zscore,estimator";

inline std::string correlator_csv_row(const CorrelatorEstimate& e) {
  std::string pts, chs;
  for (std::size_t j = 0; j < e.spec.points.size(); ++j) {
    if (j) {
      pts += '|';
      chs += '|';
    }
    pts += format17(e.spec.points[j].real()) + ":" + format17(e.spec.points[j].imag());
    chs += format17(e.spec.charges[j]);
  }
  std::string row = std::string(model_name(e.model)) + "," + std::to_string(e.spec.points.size()) + "," + pts + "," + chs + "," +
                    format17(e.window.delta) + "," + (e.window.finite() ? format17(e.window.R) : std::string("inf")) + "," + format17(e.lambda) + "," +
                    std::to_string(e.replicas) + "," + format17(e.value) + "," + format17(e.std_error) + ",";
  if (e.oracle) row += format17(*e.oracle) + "," + format17(e.zscore());
  else row += ",";
  return row + "," + e.estimator;
}

// Slopes across levels measured on the same replicas.

struct SlopeEstimate {
  double slope = 0.0, std_error = 0.0, intercept = 0.0, r_squared = 0.0;
};

namespace detail {

inline std::vector<double> slope_weights(std::span<const double> x) {
  double mx = 0.0;
  for (double v : x) mx += v;
  mx /= double(x.size());
  double sxx = 0.0;
  for (double v : x) sxx += (v - mx) * (v - mx);
  std::vector<double> w;
  for (double v : x) w.push_back((v - mx) / sxx);
  return w;
}

inline double level_mean(const std::vector<double>& v) { return aggregate(v).mean; }

}  // namespace detail

/// Least-squares slope of the level means against x. The slope is a fixed linear
/// combination of the means, so its error is that of the per-replica combination.
inline SlopeEstimate linear_slope(std::span<const double> x, const std::vector<std::vector<double>>& levels) {
  if (x.size() != levels.size() || x.size() < 2) throw std::invalid_argument("slope needs matching levels");
  const auto w = detail::slope_weights(x);
  std::vector<double> y;
  for (const auto& l : levels) y.push_back(detail::level_mean(l));
  const std::size_t n = levels[0].size();
  std::vector<double> comb(n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t l = 0; l < levels.size(); ++l) comb[r] += w[l] * levels[l][r];
  const LinearFit f = fit_line(x, y);
  return {f.slope, aggregate(comb).std_error, f.intercept, f.r_squared};
}

/// Slope of log(level mean) against x, with a delta-method error.
inline SlopeEstimate log_slope(std::span<const double> x, const std::vector<std::vector<double>>& levels) {
  if (x.size() != levels.size() || x.size() < 2) throw std::invalid_argument("slope needs matching levels");
  const auto w = detail::slope_weights(x);
  std::vector<double> m, y;
  for (const auto& l : levels) {
    m.push_back(detail::level_mean(l));
    y.push_back(m.back() > 0.0 ? std::log(m.back()) : std::numeric_limits<double>::quiet_NaN());
  }
  const std::size_t n = levels[0].size();
  std::vector<double> comb(n, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t l = 0; l < levels.size(); ++l) comb[r] += w[l] * levels[l][r] / m[l];
  const LinearFit f = fit_line(x, y);
  return {f.slope, aggregate(comb).std_error, f.intercept, f.r_squared};
}

// Cover and winding statistics with nested IR cutoffs.

struct NestedCutoffStudy {
  double lambda = 1.0;
  double delta = 0.0;
  std::vector<double> R;  ///< increasing
  std::size_t replicas = 0;
  double beta_layering = 0.0, beta_winding = 0.0;
  double leak_bound = 0.0;
  /// Per level, per replica: covering loops / lambda, extrapolated, and at the base resolution.
  std::vector<std::vector<double>> cover, cover_base;
  /// [k-1][level][replica]: loops with |winding| = k, divided by lambda.
  std::vector<std::vector<std::vector<double>>> winding_mass;
  /// cos(beta N) for the layering (extrapolated) and winding fields.
  std::vector<std::vector<double>> layering, winding_field;

  std::vector<double> log_ratio() const {
    std::vector<double> x;
    for (double r : R) x.push_back(std::log(r / delta));
    return x;
  }
};

/// One soup at the largest cutoff serves every smaller one: its loops with diameter < R'
/// form a soup with cutoff R'.
inline NestedCutoffStudy nested_cutoff_study(Point z, SoupParams p, std::vector<double> R_levels, std::size_t replicas, int kmax, double beta_l,
                                             double beta_w, std::uint64_t channel = 0) {
  if (R_levels.empty()) throw std::invalid_argument("nested study needs at least one cutoff");
  if (kmax < 1) kmax = 1;
  std::sort(R_levels.begin(), R_levels.end());
  p.window = CutoffWindow(p.window.delta, R_levels.back());
  const Point pts[1] = {z};
  const auto data = sample_observations(pts, p, replicas, "nested-cutoff", channel);
  NestedCutoffStudy s;
  s.lambda = p.lambda;
  s.delta = p.window.delta;
  s.R = R_levels;
  s.replicas = replicas;
  s.beta_layering = beta_l;
  s.beta_winding = beta_w;
  {
    const double Rm = R_levels.back();
    const double t_lo = p.sampler.c_lo * s.delta * s.delta, t_hi = p.sampler.c_hi * Rm * Rm;
    s.leak_bound = local_leak_bound(p.lambda, s.delta, Rm, t_lo, t_hi, p.sampler.kappa).total();
  }
  const std::size_t L = R_levels.size(), K = static_cast<std::size_t>(kmax);
  s.cover.assign(L, std::vector<double>(replicas));
  s.cover_base = s.cover;
  const double w = p.extrapolation();
  s.layering.assign(L, std::vector<double>(replicas));
  s.winding_field.assign(L, std::vector<double>(replicas));
  s.winding_mass.assign(K, std::vector<std::vector<double>>(L, std::vector<double>(replicas)));
  for (std::size_t l = 0; l < L; ++l) {
    const double R = R_levels[l];
    for (std::size_t r = 0; r < replicas; ++r) {
      double c = 0.0, cf = 0.0, nl = 0.0, nlf = 0.0, nw = 0.0;
      for (const auto& o : data[r]) {
        if (o.diameter >= R) continue;
        if (o.cover_mask & 1u) {
          c += 1.0;
          nl += o.type_flag;
        }
        if (o.fine_cover_mask & 1u) {
          cf += 1.0;
          nlf += o.type_flag;
        }
        nw += o.winding[0];
        const int a = std::abs(o.winding[0]);
        if (a >= 1 && a <= kmax) s.winding_mass[static_cast<std::size_t>(a - 1)][l][r] += 1.0 / p.lambda;
      }
      s.cover_base[l][r] = c / p.lambda;
      s.cover[l][r] = w != 0.0 ? extrapolate(c, cf, w) / p.lambda : c / p.lambda;
      s.layering[l][r] = w != 0.0 ? extrapolate(std::cos(beta_l * nl), std::cos(beta_l * nlf), w) : std::cos(beta_l * nl);
      s.winding_field[l][r] = std::cos(beta_w * nw);
    }
  }
  return s;
}

inline AggregateResult cover_mass_estimate(Point z, const CutoffWindow& window, SoupParams p, std::size_t replicas) {
  p.window = window;
  return aggregate(nested_cutoff_study(z, p, {window.R}, replicas, 1, 0.0, 0.0).cover[0]);
}

inline AggregateResult winding_mass_estimate(Point z, int k, const CutoffWindow& window, SoupParams p, std::size_t replicas) {
  if (k == 0) throw std::invalid_argument("winding_mass_estimate: k must be nonzero");
  p.window = window;
  const int a = std::abs(k);
  return aggregate(nested_cutoff_study(z, p, {window.R}, replicas, a, 0.0, 0.0).winding_mass[static_cast<std::size_t>(a - 1)][0]);
}

inline double cover_mass_target(double delta, double R) { return std::log(R / delta) / 5.0; }

inline double winding_mass_target(int k, double delta, double R) {
  return std::log(R / delta) / (std::numbers::pi * std::numbers::pi * double(k) * double(k));
}

// Plane 2- and 3-point checks through the plug-in estimator.

struct PowerLawFit {
  std::vector<double> separations, log_x, log_value;
  SlopeEstimate fit;
  SlopeEstimate fit_half_R;  ///< same fit with cutoff R/2, a probe of the IR truncation
  double target = 0.0;
  double R = 0.0, delta = 0.0;
  std::size_t replicas = 0;
  double zscore() const { return loopsoup::zscore(fit.slope, target, fit.std_error); }
  /// The fitted prefactor exp(intercept).
  double prefactor() const { return std::exp(fit.intercept); }
  double ir_shift() const { return fit.slope - fit_half_R.slope; }
};

namespace detail {

inline SlopeEstimate plugin_log_slope(std::span<const double> x, const std::vector<std::vector<double>>& stats) {
  // log estimate_l = -mean(X_l): a linear combination of means.
  std::vector<std::vector<double>> neg = stats;
  for (auto& v : neg)
    for (double& e : v) e = -e;
  return linear_slope(x, neg);
}

inline Point window_center(const ContinuumDomain& d) {
  const Box& b = d.box();
  return {0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1)};
}

}  // namespace detail

inline PowerLawFit two_point_exponent_fit(double beta1, double lambda, std::vector<double> separations, SoupParams p, std::size_t replicas) {
  const double beta2 = kTwoPi - beta1;
  const double ch[2] = {beta1, beta2};
  if (!charge_conservation_check(ch)) throw std::invalid_argument("two-point fit needs conserved charges");
  if (separations.size() < 2) throw std::invalid_argument("two-point fit needs at least two separations");
  std::sort(separations.begin(), separations.end());
  if (separations.back() < 10.0 * separations.front() * (1.0 - 1e-12)) throw std::invalid_argument("separations must span at least one decade");
  if (separations.size() + 1 > kMaxObservedPoints) throw std::invalid_argument("too many separations");
  p.lambda = lambda;
  const Point c = detail::window_center(p.domain);
  std::vector<Point> pts{c};
  for (double d : separations) pts.push_back(c + d);
  const auto data = sample_observations(pts, p, replicas, "two-point");
  PowerLawFit out;
  out.separations = separations;
  out.R = p.window.R;
  out.delta = p.window.delta;
  out.replicas = replicas;
  out.target = -(lambda / 5.0) * (2.0 - std::cos(beta1) - std::cos(beta2));
  const std::size_t K = separations.size();
  std::vector<std::vector<double>> xs(K, std::vector<double>(replicas)), xs_half = xs;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t sub[2] = {0, k + 1};
    for (std::size_t r = 0; r < replicas; ++r) {
      xs[k][r] = plugin_statistic(data[r], sub, ch, p.window.R, p.extrapolation());
      xs_half[k][r] = plugin_statistic(data[r], sub, ch, p.window.R / 2.0, p.extrapolation());
    }
    out.log_x.push_back(std::log(separations[k] / p.window.delta));
    out.log_value.push_back(-aggregate(xs[k]).mean);
  }
  out.fit = detail::plugin_log_slope(out.log_x, xs);
  out.fit_half_R = detail::plugin_log_slope(out.log_x, xs_half);
  return out;
}

struct TriangleCheck {
  std::string name;
  double ratio = 0.0, std_error = 0.0, target = 0.0;
  double zscore() const { return loopsoup::zscore(ratio, target, std_error); }
};

struct ThreePointReport {
  double base_value = 0.0, base_std_error = 0.0;
  std::vector<TriangleCheck> checks;
  std::size_t replicas = 0;
  double max_abs_z() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, std::abs(c.zscore()));
    return m;
  }
};

/// prod over pairs |z_i - z_j|^{-2 (D_i + D_j - D_k)} for the layering dimensions.
inline double three_point_structure(const std::array<Point, 3>& z, const std::array<double, 3>& beta, double lambda) {
  std::array<double, 3> D{};
  for (int i = 0; i < 3; ++i) D[i] = delta_layering(beta[i], lambda);
  const double d01 = std::abs(z[0] - z[1]), d02 = std::abs(z[0] - z[2]), d12 = std::abs(z[1] - z[2]);
  return std::pow(d01, -2.0 * (D[0] + D[1] - D[2])) * std::pow(d02, -2.0 * (D[0] + D[2] - D[1])) * std::pow(d12, -2.0 * (D[1] + D[2] - D[0]));
}

/// Compares a base equilateral triangle with scaled, rotated and stretched copies. The
/// unknown constant cancels in each ratio.
inline ThreePointReport three_point_structure_check(const std::array<double, 3>& beta, double side, const std::vector<double>& scales, double rotation_angle,
                                                    SoupParams p, std::size_t replicas) {
  if (!charge_conservation_check(beta)) throw std::invalid_argument("three-point check needs conserved charges");
  if (!(side > 0.0)) throw std::invalid_argument("degenerate triangle");
  const Point c = detail::window_center(p.domain);
  std::array<Point, 3> base;
  for (int i = 0; i < 3; ++i) base[static_cast<std::size_t>(i)] = c + std::polar(side / std::sqrt(3.0), std::numbers::pi / 2.0 + kTwoPi * i / 3.0);
  struct Geometry {
    std::string name;
    std::array<Point, 3> z;
  };
  std::vector<Geometry> geos{{"base", base}};
  for (double s : scales) {
    Geometry g{"scale " + format17(s), {}};
    for (int i = 0; i < 3; ++i) g.z[static_cast<std::size_t>(i)] = c + s * (base[static_cast<std::size_t>(i)] - c);
    geos.push_back(g);
  }
  {
    Geometry g{"rotation " + format17(rotation_angle), {}};
    for (int i = 0; i < 3; ++i) g.z[static_cast<std::size_t>(i)] = c + std::polar(1.0, rotation_angle) * (base[static_cast<std::size_t>(i)] - c);
    geos.push_back(g);
  }
  {
    Geometry g{"stretched apex", base};
    const Point mid = 0.5 * (base[1] + base[2]);
    g.z[0] = mid + 2.0 * (base[0] - mid);
    geos.push_back(g);
  }
  std::vector<Point> pts;
  for (const auto& g : geos) {
    const double area = std::abs(((g.z[1] - g.z[0]) * std::conj(g.z[2] - g.z[0])).imag()) / 2.0;
    if (!(area > 1e-12 * side * side)) throw std::invalid_argument("degenerate triangle");
    for (const Point& z : g.z) pts.push_back(z);
  }
  if (pts.size() > kMaxObservedPoints) throw std::invalid_argument("too many triangle geometries");
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      if (std::abs(pts[i] - pts[j]) < 1e-12 * side) throw std::invalid_argument("triangle geometries share a point");
  const auto data = sample_observations(pts, p, replicas, "three-point");
  std::vector<std::vector<double>> xs(geos.size(), std::vector<double>(replicas));
  for (std::size_t g = 0; g < geos.size(); ++g) {
    const std::size_t sub[3] = {3 * g, 3 * g + 1, 3 * g + 2};
    for (std::size_t r = 0; r < replicas; ++r) xs[g][r] = plugin_statistic(data[r], sub, beta, p.window.R, p.extrapolation());
  }
  ThreePointReport rep;
  rep.replicas = replicas;
  const auto b = aggregate(xs[0]);
  rep.base_value = std::exp(-b.mean);
  rep.base_std_error = rep.base_value * b.std_error;
  const double sbase = three_point_structure(geos[0].z, beta, p.lambda);
  for (std::size_t g = 1; g < geos.size(); ++g) {
    std::vector<double> d(replicas);
    for (std::size_t r = 0; r < replicas; ++r) d[r] = xs[0][r] - xs[g][r];
    const auto a = aggregate(d);
    TriangleCheck ck;
    ck.name = geos[g].name;
    ck.ratio = std::exp(a.mean);
    ck.std_error = ck.ratio * a.std_error;
    ck.target = three_point_structure(geos[g].z, beta, p.lambda) / sbase;
    rep.checks.push_back(ck);
  }
  return rep;
}

// Conformal covariance on bounded domains.

struct CovarianceReport {
  std::vector<Point> points, mapped;
  std::vector<double> derivative_abs;
  CorrelatorEstimate in_domain, in_image;
  double ratio = 0.0, std_error = 0.0, target = 0.0;
  double zscore() const { return loopsoup::zscore(ratio, target, std_error); }
};

/// Ratio of the estimate in D' at f(z_j) to the estimate in D at z_j, against the
/// covariance factor prod_j |f'(z_j)|^{-2 Delta(beta_j)}.
inline CovarianceReport conformal_covariance_check(const ChargeVector& spec, Model model, const ConformalMap& f, const SoupParams& pD,
                                                   const ContinuumDomain& image, std::size_t replicas) {
  spec.validate();
  if (!pD.domain.bounded() || !image.bounded()) throw std::invalid_argument("conformal covariance check needs bounded domains");
  CovarianceReport rep;
  rep.points = spec.points;
  rep.target = 1.0;
  for (std::size_t j = 0; j < spec.points.size(); ++j) {
    const Point w = map_point(f, spec.points[j]);
    if (!image.contains(w)) throw std::domain_error("mapped point lies outside the image domain");
    rep.mapped.push_back(w);
    const double d = std::abs(map_derivative(f, spec.points[j]));
    rep.derivative_abs.push_back(d);
    const double two_delta = 2.0 * (model == Model::Layering ? delta_layering(spec.charges[j], pD.lambda) : delta_winding(spec.charges[j], pD.lambda));
    rep.target *= std::pow(d, -two_delta);
  }
  const auto a = sample_observations(spec.points, pD, replicas, "covariance-domain", 1);
  SoupParams pI = pD;
  pI.domain = image;
  const auto b = sample_observations(rep.mapped, pI, replicas, "covariance-image", 2);
  rep.in_domain = correlator_from_observations(spec, model, a, pD.lambda, pD.window, pD.extrapolation());
  ChargeVector mapped_spec{rep.mapped, spec.charges};
  rep.in_image = correlator_from_observations(mapped_spec, model, b, pD.lambda, pD.window, pD.extrapolation());
  rep.ratio = rep.in_image.value / rep.in_domain.value;
  const double ra = rep.in_domain.std_error / rep.in_domain.value, rb = rep.in_image.std_error / rep.in_image.value;
  rep.std_error = std::abs(rep.ratio) * std::sqrt(ra * ra + rb * rb);
  return rep;
}

}  // namespace loopsoup
