#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "brownian.hpp"
#include "raster.hpp"
#include "stats.hpp"

namespace loopsoup {

namespace detail {

inline constexpr double kOrientationEps = 1e-12;

/// Sign of the turn a->b->c; turns smaller than eps relative to the lengths count as straight.
inline int orientation(Point a, Point b, Point c) {
  const Point u = b - a, v = c - a;
  const double cr = u.real() * v.imag() - u.imag() * v.real();
  const double scale = std::abs(u) * std::abs(v);
  if (std::abs(cr) <= kOrientationEps * scale) return 0;
  return cr > 0.0 ? 1 : -1;
}

inline bool on_segment_box(Point a, Point b, Point c) {
  const double eps = kOrientationEps * (std::abs(b - a) + 1.0);
  return c.real() >= std::min(a.real(), b.real()) - eps && c.real() <= std::max(a.real(), b.real()) + eps &&
         c.imag() >= std::min(a.imag(), b.imag()) - eps && c.imag() <= std::max(a.imag(), b.imag()) + eps;
}

}  // namespace detail

/// Closed segments [a,b] and [c,d] share a point.
inline bool segments_intersect(Point a, Point b, Point c, Point d) {
  const int o1 = detail::orientation(a, b, c), o2 = detail::orientation(a, b, d);
  const int o3 = detail::orientation(c, d, a), o4 = detail::orientation(c, d, b);
  if (o1 * o2 < 0 && o3 * o4 < 0) return true;
  if (o1 == 0 && detail::on_segment_box(a, b, c)) return true;
  if (o2 == 0 && detail::on_segment_box(a, b, d)) return true;
  if (o3 == 0 && detail::on_segment_box(c, d, a)) return true;
  if (o4 == 0 && detail::on_segment_box(c, d, b)) return true;
  return false;
}

/// Whether two polylines cross or touch anywhere.
inline bool curves_intersect(std::span<const Point> p, std::span<const Point> q) {
  for (std::size_t i = 0; i + 1 < p.size(); ++i)
    for (std::size_t j = 0; j + 1 < q.size(); ++j)
      if (segments_intersect(p[i], p[i + 1], q[j], q[j + 1])) return true;
  return false;
}

/// Component label per loop of the graph in which intersecting loops are adjacent. Labels
/// are 0, 1, ... in order of each component's first loop.
inline std::vector<std::size_t> intersection_components(std::span<const std::span<const Point>> loops) {
  const std::size_t n = loops.size();
  detail::UnionFind uf(n);
  double total = 0.0;
  std::size_t segs = 0;
  for (auto l : loops)
    for (std::size_t i = 0; i + 1 < l.size(); ++i) {
      total += std::abs(l[i + 1] - l[i]);
      ++segs;
    }
  if (segs == 0) {
    std::vector<std::size_t> lab(n);
    for (std::size_t i = 0; i < n; ++i) lab[i] = i;
    return lab;
  }
  const double h = std::max(2.0 * total / double(segs), 1e-9);

  struct Seg {
    std::uint32_t loop, index;
  };
  std::unordered_map<std::uint64_t, std::vector<Seg>> grid;
  auto key = [](std::int64_t i, std::int64_t j) { return (static_cast<std::uint64_t>(i) << 32) ^ static_cast<std::uint64_t>(j & 0xffffffff); };
  for (std::size_t l = 0; l < n; ++l) {
    const auto c = loops[l];
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      const auto i0 = static_cast<std::int64_t>(std::floor(std::min(c[i].real(), c[i + 1].real()) / h));
      const auto i1 = static_cast<std::int64_t>(std::floor(std::max(c[i].real(), c[i + 1].real()) / h));
      const auto j0 = static_cast<std::int64_t>(std::floor(std::min(c[i].imag(), c[i + 1].imag()) / h));
      const auto j1 = static_cast<std::int64_t>(std::floor(std::max(c[i].imag(), c[i + 1].imag()) / h));
      for (auto a = i0; a <= i1; ++a)
        for (auto b = j0; b <= j1; ++b) grid[key(a, b)].push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(i)});
    }
  }
  // Iterate cells in key order so the result does not depend on hash layout.
  std::vector<std::uint64_t> keys;
  keys.reserve(grid.size());
  for (const auto& kv : grid) keys.push_back(kv.first);
  std::sort(keys.begin(), keys.end());
  for (auto k : keys) {
    const auto& cell = grid[k];
    for (std::size_t a = 0; a < cell.size(); ++a)
      for (std::size_t b = a + 1; b < cell.size(); ++b) {
        const Seg s = cell[a], t = cell[b];
        if (s.loop == t.loop || uf.find(s.loop) == uf.find(t.loop)) continue;
        const auto p = loops[s.loop], q = loops[t.loop];
        if (segments_intersect(p[s.index], p[s.index + 1], q[t.index], q[t.index + 1])) uf.unite(s.loop, t.loop);
      }
  }
  std::vector<std::size_t> lab(n);
  std::unordered_map<std::size_t, std::size_t> relabel;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [it, fresh] = relabel.try_emplace(uf.find(i), relabel.size());
    lab[i] = it->second;
  }
  return lab;
}

struct ClusterOptions {
  /// Points z at which the filled cluster containing z is measured. Empty: a 16 x 16 grid
  /// over the middle half of the soup's domain box.
  std::vector<Point> probes;
  /// Lengths L for the survival curve. Empty: 16 values up to half the smaller box side.
  std::vector<double> lengths;
};

struct ClusterStats {
  std::size_t cluster_count = 0;
  std::vector<std::size_t> label;  ///< cluster of each loop
  std::vector<double> diameters;   ///< per cluster
  std::vector<Point> probes;
  /// Diameter of the filled cluster containing each probe, 0 if none does.
  std::vector<double> probe_diameter;
  std::vector<double> lengths;
  std::vector<double> survival;  ///< fraction of probes with probe_diameter >= L
  double fitted_xi = std::numeric_limits<double>::infinity();
  double fit_slope = 0.0, fit_r_squared = 0.0;
};

namespace detail {

struct SurvivalFit {
  double slope = 0.0, r_squared = 0.0, xi = std::numeric_limits<double>::infinity();
};

/// log S(L) against L over the lengths where S > 0; xi = -1/slope.
inline SurvivalFit fit_survival(std::span<const double> L, std::span<const double> S) {
  std::vector<double> x, y;
  for (std::size_t i = 0; i < L.size(); ++i)
    if (S[i] > 0.0) {
      x.push_back(L[i]);
      y.push_back(std::log(S[i]));
    }
  SurvivalFit f;
  if (x.size() < 2) return f;
  const LinearFit lf = fit_line(x, y);
  f.slope = lf.slope;
  f.r_squared = lf.r_squared;
  if (lf.slope < 0.0) f.xi = -1.0 / lf.slope;
  return f;
}

inline std::vector<double> survival_curve(std::span<const double> diam, std::span<const double> L) {
  std::vector<double> s;
  for (double l : L) {
    std::size_t c = 0;
    for (double d : diam) c += d >= l;
    s.push_back(diam.empty() ? 0.0 : double(c) / double(diam.size()));
  }
  return s;
}

}  // namespace detail

/// Loop clusters of a realization and the filled cluster around each probe, rasterized at
/// the given pitch.
inline ClusterStats clusters(const ContinuumSoupRealization& soup, double resolution, ClusterOptions opt = {}) {
  if (!(resolution > 0.0)) throw std::invalid_argument("clusters: resolution must be positive");
  const Box& box = soup.domain.box();
  if (opt.probes.empty()) {
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j)
        opt.probes.emplace_back(box.x0 + box.width() * (0.25 + 0.5 * (i + 0.5) / 16.0), box.y0 + box.height() * (0.25 + 0.5 * (j + 0.5) / 16.0));
  }
  if (opt.lengths.empty()) {
    const double top = 0.5 * std::min(box.width(), box.height());
    for (int i = 1; i <= 16; ++i) opt.lengths.push_back(top * i / 16.0);
  }
  if (!std::is_sorted(opt.lengths.begin(), opt.lengths.end())) throw std::invalid_argument("clusters: lengths must be increasing");

  std::vector<std::span<const Point>> curves;
  for (const auto& s : soup.loops) curves.emplace_back(s.loop.samples);
  ClusterStats st;
  st.label = intersection_components(curves);
  st.cluster_count = st.label.empty() ? 0 : *std::max_element(st.label.begin(), st.label.end()) + 1;
  std::vector<std::vector<std::span<const Point>>> members(st.cluster_count);
  for (std::size_t i = 0; i < curves.size(); ++i) members[st.label[i]].push_back(curves[i]);

  st.probes = opt.probes;
  st.probe_diameter.assign(st.probes.size(), 0.0);
  for (std::size_t c = 0; c < st.cluster_count; ++c) {
    std::vector<Point> all;
    for (auto m : members[c]) all.insert(all.end(), m.begin(), m.end());
    const double d = point_set_diameter(all);
    st.diameters.push_back(d);
    const Box b = bounding_box(all);
    std::vector<std::size_t> inside;
    for (std::size_t k = 0; k < st.probes.size(); ++k)
      if (b.contains(st.probes[k]) && d > st.probe_diameter[k]) inside.push_back(k);
    if (inside.empty()) continue;
    const FilledRaster f = fill_raster(std::span<const std::span<const Point>>(members[c]), resolution, st.probes[inside[0]]);
    for (std::size_t k : inside)
      if (f.covered(st.probes[k])) st.probe_diameter[k] = d;
  }
  st.lengths = opt.lengths;
  st.survival = detail::survival_curve(st.probe_diameter, st.lengths);
  const auto fit = detail::fit_survival(st.lengths, st.survival);
  st.fit_slope = fit.slope;
  st.fit_r_squared = fit.r_squared;
  st.fitted_xi = fit.xi;
  return st;
}

/// Survival curve and decay fit pooled over realizations sharing probes and lengths.
inline ClusterStats pool_cluster_stats(std::span<const ClusterStats> runs) {
  if (runs.empty()) throw std::invalid_argument("pool_cluster_stats: no runs");
  ClusterStats out;
  out.lengths = runs[0].lengths;
  for (const auto& r : runs) {
    if (r.lengths != out.lengths) throw std::invalid_argument("pool_cluster_stats: length grids differ");
    out.cluster_count += r.cluster_count;
    out.diameters.insert(out.diameters.end(), r.diameters.begin(), r.diameters.end());
    out.probes.insert(out.probes.end(), r.probes.begin(), r.probes.end());
    out.probe_diameter.insert(out.probe_diameter.end(), r.probe_diameter.begin(), r.probe_diameter.end());
  }
  out.survival = detail::survival_curve(out.probe_diameter, out.lengths);
  const auto fit = detail::fit_survival(out.lengths, out.survival);
  out.fit_slope = fit.slope;
  out.fit_r_squared = fit.r_squared;
  out.fitted_xi = fit.xi;
  return out;
}

}  // namespace loopsoup
