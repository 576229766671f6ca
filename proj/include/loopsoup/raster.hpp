#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "brownian.hpp"

namespace loopsoup {

/// A maximal horizontal stretch of cells in one row not separated by the curve.
struct RasterRun {
  int row = 0;
  int begin = 0;  ///< first column
  int end = 0;    ///< one past the last column
  int winding = 0;
  bool covered = false;
};

/// Filled loop on a square grid, stored as runs.
///
/// Cell (i,j) has its center at origin + pitch*(i, j). Two neighbouring cells are
/// joined unless the curve crosses the segment between their centers; cells not joined
/// to the grid border are covered.
class FilledRaster {
 public:
  Point origin{};
  double pitch = 0.0;
  int nx = 0, ny = 0;
  std::vector<RasterRun> runs;
  std::vector<std::size_t> row_start;

  const RasterRun* run_at(int i, int j) const {
    if (i < 0 || j < 0 || i >= nx || j >= ny) return nullptr;
    auto first = runs.begin() + static_cast<std::ptrdiff_t>(row_start[j]);
    auto last = runs.begin() + static_cast<std::ptrdiff_t>(row_start[j + 1]);
    auto it = std::upper_bound(first, last, i, [](int v, const RasterRun& r) { return v < r.begin; });
    if (it == first) return nullptr;
    --it;
    return i < it->end ? &*it : nullptr;
  }

  /// Cell containing z.
  std::pair<int, int> cell_of(Point z) const {
    return {static_cast<int>(std::lround((z.real() - origin.real()) / pitch)), static_cast<int>(std::lround((z.imag() - origin.imag()) / pitch))};
  }

  bool covered(Point z) const {
    const auto [i, j] = cell_of(z);
    const RasterRun* r = run_at(i, j);
    return r && r->covered;
  }

  int winding_at(Point z) const {
    const auto [i, j] = cell_of(z);
    const RasterRun* r = run_at(i, j);
    return r ? r->winding : 0;
  }

  std::size_t covered_cells() const {
    std::size_t n = 0;
    for (const auto& r : runs)
      if (r.covered) n += static_cast<std::size_t>(r.end - r.begin);
    return n;
  }

  double area() const { return double(covered_cells()) * pitch * pitch; }

  /// Area of cells with winding exactly k (k = 0 is restricted to covered cells).
  double winding_area(int k) const {
    std::size_t n = 0;
    for (const auto& r : runs)
      if (r.winding == k && (k != 0 || r.covered)) n += static_cast<std::size_t>(r.end - r.begin);
    return double(n) * pitch * pitch;
  }

  /// Row-major covered flags.
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny), 0);
    for (const auto& r : runs)
      if (r.covered) std::fill(m.begin() + static_cast<std::ptrdiff_t>(std::size_t(r.row) * nx + r.begin),
                               m.begin() + static_cast<std::ptrdiff_t>(std::size_t(r.row) * nx + r.end), std::uint8_t{1});
    return m;
  }
};

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

struct HorizontalCrossing {
  int row;
  int sign;
  double x;
};

}  // namespace detail

/// Fills the union of closed polylines. `anchor` is placed on a cell center.
inline FilledRaster fill_raster(std::span<const std::span<const Point>> curves, double pitch, Point anchor = {}) {
  if (!(pitch > 0.0)) throw std::invalid_argument("fill_raster: pitch must be positive");
  FilledRaster out;
  out.pitch = pitch;
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin, xmax = -xmin, ymax = -xmin;
  for (auto c : curves)
    for (const Point& p : c) {
      xmin = std::min(xmin, p.real());
      xmax = std::max(xmax, p.real());
      ymin = std::min(ymin, p.imag());
      ymax = std::max(ymax, p.imag());
    }
  if (!(xmin <= xmax)) {
    out.nx = out.ny = 0;
    out.row_start.assign(1, 0);
    return out;
  }
  const double lx0 = std::floor((xmin - anchor.real()) / pitch) - 1.0, lx1 = std::ceil((xmax - anchor.real()) / pitch) + 1.0;
  const double ly0 = std::floor((ymin - anchor.imag()) / pitch) - 1.0, ly1 = std::ceil((ymax - anchor.imag()) / pitch) + 1.0;
  if (lx1 - lx0 > 1e8 || ly1 - ly0 > 1e8) throw std::invalid_argument("fill_raster: grid too large for the pitch");
  out.nx = static_cast<int>(lx1 - lx0) + 1;
  out.ny = static_cast<int>(ly1 - ly0) + 1;
  out.origin = anchor + Point(lx0 * pitch, ly0 * pitch);
  const int nx = out.nx, ny = out.ny;

  // Curves through cell centers or along grid lines would make the crossing tests tie; a
  // fixed offset of about 1e-7 cells keeps exact polygons off the lattice.
  const double jx = 1e-7 * (std::numbers::sqrt2 - 1.0), jy = 1e-7 * (std::numbers::phi - 1.0);
  auto gx = [&](Point z) { return (z.real() - out.origin.real()) / pitch + jx; };
  auto gy = [&](Point z) { return (z.imag() - out.origin.imag()) / pitch + jy; };
  std::vector<detail::HorizontalCrossing> hc;
  std::vector<std::int64_t> vblock;  // gap * nx + column
  for (auto c : curves) {
    if (c.size() < 2) continue;
    double px = gx(c[0]), py = gy(c[0]);
    for (std::size_t s = 1; s < c.size(); ++s) {
      const double qx = gx(c[s]), qy = gy(c[s]);
      if (py != qy) {
        const double lo = std::min(py, qy), hi = std::max(py, qy);
        const int sign = qy > py ? 1 : -1;
        const double slope = (qx - px) / (qy - py);
        for (int J = static_cast<int>(std::floor(lo)) + 1; J <= static_cast<int>(std::floor(hi)); ++J)
          hc.push_back({J, sign, px + (J - py) * slope});
      }
      if (px != qx) {
        const double lo = std::min(px, qx), hi = std::max(px, qx);
        const double slope = (qy - py) / (qx - px);
        for (int I = static_cast<int>(std::floor(lo)) + 1; I <= static_cast<int>(std::floor(hi)); ++I) {
          const int gap = static_cast<int>(std::floor(py + (I - px) * slope));
          if (gap >= 0 && gap < ny - 1) vblock.push_back(std::int64_t(gap) * nx + I);
        }
      }
      px = qx;
      py = qy;
    }
  }
  std::sort(hc.begin(), hc.end(), [](const auto& a, const auto& b) { return a.row < b.row || (a.row == b.row && a.x < b.x); });
  std::sort(vblock.begin(), vblock.end());
  vblock.erase(std::unique(vblock.begin(), vblock.end()), vblock.end());

  out.row_start.assign(static_cast<std::size_t>(ny) + 1, 0);
  std::size_t h = 0;
  for (int J = 0; J < ny; ++J) {
    out.row_start[J] = out.runs.size();
    int begin = 0, w = 0;
    while (h < hc.size() && hc[h].row == J) {
      const int c = std::clamp(static_cast<int>(std::ceil(hc[h].x)), 0, nx);
      if (c > begin) {
        out.runs.push_back({J, begin, c, w, false});
        begin = c;
      }
      w -= hc[h].sign;
      ++h;
    }
    out.runs.push_back({J, begin, nx, w, false});
  }
  out.row_start[ny] = out.runs.size();

  const std::size_t ext = out.runs.size();
  detail::UnionFind uf(ext + 1);
  for (std::size_t r = 0; r < ext; ++r) {
    const auto& run = out.runs[r];
    if (run.row == 0 || run.row == ny - 1 || run.begin == 0 || run.end == nx) uf.unite(r, ext);
  }
  std::size_t vb = 0;
  for (int J = 0; J + 1 < ny; ++J) {
    while (vb < vblock.size() && vblock[vb] < std::int64_t(J) * nx) ++vb;
    const std::size_t vb_end = static_cast<std::size_t>(std::lower_bound(vblock.begin() + static_cast<std::ptrdiff_t>(vb), vblock.end(),
                                                                         std::int64_t(J + 1) * nx) - vblock.begin());
    std::size_t a = out.row_start[J], b = out.row_start[J + 1];
    const std::size_t a_end = out.row_start[J + 1], b_end = out.row_start[J + 2];
    while (a < a_end && b < b_end) {
      const int lo = std::max(out.runs[a].begin, out.runs[b].begin), hi = std::min(out.runs[a].end, out.runs[b].end);
      if (lo < hi) {
        const auto first = std::lower_bound(vblock.begin() + static_cast<std::ptrdiff_t>(vb), vblock.begin() + static_cast<std::ptrdiff_t>(vb_end),
                                            std::int64_t(J) * nx + lo);
        const auto last = std::lower_bound(first, vblock.begin() + static_cast<std::ptrdiff_t>(vb_end), std::int64_t(J) * nx + hi);
        if (last - first < hi - lo) uf.unite(a, b);
      }
      if (out.runs[a].end < out.runs[b].end) ++a;
      else ++b;
    }
    vb = vb_end;
  }
  const std::size_t root_ext = uf.find(ext);
  for (std::size_t r = 0; r < ext; ++r) out.runs[r].covered = uf.find(r) != root_ext;
  return out;
}

inline FilledRaster fill_raster(std::span<const Point> curve, double pitch, Point anchor = {}) {
  const std::span<const Point> one[1] = {curve};
  return fill_raster(std::span<const std::span<const Point>>(one), pitch, anchor);
}

inline FilledRaster fill_raster(const BrownianLoop& loop, double pitch, Point anchor = {}) {
  return fill_raster(std::span<const Point>(loop.samples), pitch, anchor);
}

}  // namespace loopsoup
