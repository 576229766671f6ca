#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "engine.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace loopsoup {

using Point = std::complex<double>;

/// Continuum mass m(z) (not squared).
using MassFunction = std::function<double(Point)>;

inline MassFunction constant_continuum_mass(double c) {
  return [c](Point) { return c; };
}

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool contains(Point z) const { return z.real() >= x0 && z.real() <= x1 && z.imag() >= y0 && z.imag() <= y1; }
};

inline Box bounding_box(std::span<const Point> pts) {
  Box b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
        -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const Point& p : pts) {
    b.x0 = std::min(b.x0, p.real());
    b.x1 = std::max(b.x1, p.real());
    b.y0 = std::min(b.y0, p.imag());
    b.y1 = std::max(b.y1, p.imag());
  }
  return b;
}

/// Largest pairwise distance, via the convex hull and rotating calipers.
inline double point_set_diameter(std::span<const Point> pts) {
  if (pts.size() < 2) return 0.0;
  std::vector<Point> p(pts.begin(), pts.end());
  auto less = [](const Point& a, const Point& b) { return a.real() < b.real() || (a.real() == b.real() && a.imag() < b.imag()); };
  std::sort(p.begin(), p.end(), less);
  p.erase(std::unique(p.begin(), p.end()), p.end());
  if (p.size() == 1) return 0.0;
  if (p.size() == 2) return std::abs(p[0] - p[1]);
  auto cross = [](const Point& o, const Point& a, const Point& b) {
    return (a.real() - o.real()) * (b.imag() - o.imag()) - (a.imag() - o.imag()) * (b.real() - o.real());
  };
  std::vector<Point> h(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  h.resize(k - 1);
  const std::size_t m = h.size();
  if (m == 2) return std::abs(h[0] - h[1]);
  double best = 0.0;
  std::size_t j = 1;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t ni = (i + 1) % m;
    while (std::abs(cross(h[i], h[ni], h[(j + 1) % m])) > std::abs(cross(h[i], h[ni], h[j]))) j = (j + 1) % m;
    best = std::max({best, std::abs(h[i] - h[j]), std::abs(h[ni] - h[j])});
  }
  return best;
}

// Range law of the standard Brownian bridge (the Kuiper distribution).

/// P(range <= a).
inline double bridge_range_cdf(double a) {
  if (a <= 0.0) return 0.0;
  if (a < 1.0) {
    const double pre = std::sqrt(2.0 * std::numbers::pi) * std::numbers::pi * std::numbers::pi / (a * a * a);
    double s = 0.0;
    for (int j = 1; j < 50; ++j) {
      const double term = double(j) * j * std::exp(-std::numbers::pi * std::numbers::pi * j * j / (2.0 * a * a));
      s += term;
      if (term < 1e-300) break;
    }
    return std::min(1.0, pre * s);
  }
  double s = 0.0;
  for (int k = 1; k < 100; ++k) {
    const double e = 2.0 * k * k * a * a;
    if (e > 700.0) break;
    s += (2.0 * e - 1.0) * std::exp(-e);
  }
  return std::clamp(1.0 - 2.0 * s, 0.0, 1.0);
}

/// P(range > a).
inline double bridge_range_tail(double a) {
  if (a <= 0.0) return 1.0;
  if (a < 1.0) return 1.0 - bridge_range_cdf(a);
  double s = 0.0;
  for (int k = 1; k < 100; ++k) {
    const double e = 2.0 * k * k * a * a;
    if (e > 700.0) break;
    s += (2.0 * e - 1.0) * std::exp(-e);
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

/// Bound on P(diam >= ell) for a bridge of duration t, from the range law of each coordinate.
inline double diameter_tail_bound(double t, double ell) {
  return std::min(1.0, 2.0 * bridge_range_tail(ell / std::sqrt(2.0 * t)));
}

/// The cruder Gaussian-tail bound 96 sqrt(t) / (sqrt(pi) ell) exp(-ell^2 / 576 t).
inline double gaussian_diameter_tail_bound(double t, double ell) {
  return std::min(1.0, 96.0 * std::sqrt(t) / (std::sqrt(std::numbers::pi) * ell) * std::exp(-ell * ell / (576.0 * t)));
}

/// Bound on P(diam < ell): the x-range alone must stay below ell.
inline double diameter_small_bound(double t, double ell) { return bridge_range_cdf(ell / std::sqrt(t)); }

namespace detail {

template <class F>
double simpson(F&& f, double a, double b, int n = 2000) {
  if (!(b > a)) return 0.0;
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline Point gaussian_point(RngStream& rng, double sd) {
  const double x = rng.gaussian();
  const double y = rng.gaussian();
  return {sd * x, sd * y};
}

/// Bridge at n intervals from Gaussian increments: B = W - s W_1, scaled by sqrt(t), shifted to z.
inline void bridge_by_increments(Point z, double t, std::size_t n, RngStream& rng, std::vector<Point>& out) {
  out.assign(n + 1, Point{});
  const double sd = std::sqrt(1.0 / double(n));
  Point w{};
  for (std::size_t k = 1; k <= n; ++k) {
    w += gaussian_point(rng, sd);
    out[k] = w;
  }
  const Point w1 = out[n];
  const double st = std::sqrt(t);
  for (std::size_t k = 0; k <= n; ++k) out[k] = z + st * (out[k] - (double(k) / double(n)) * w1);
  out[0] = z;
  out[n] = z;
}

/// One level of midpoint refinement; tau is the current interval duration.
inline void refine_midpoints(std::vector<Point>& pts, double tau, RngStream& rng, std::vector<Point>& buf) {
  const std::size_t n = pts.size() - 1;
  buf.resize(2 * n + 1);
  const double sd = std::sqrt(tau) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    buf[2 * i] = pts[i];
    buf[2 * i + 1] = 0.5 * (pts[i] + pts[i + 1]) + gaussian_point(rng, sd);
  }
  buf[2 * n] = pts[n];
  pts.swap(buf);
}

inline bool is_power_of_two(std::size_t n) { return n >= 1 && std::has_single_bit(n); }

}  // namespace detail

struct BrownianLoop {
  Point root{};
  double duration = 0.0;
  std::vector<Point> samples;
  /// Sample times; empty means uniform spacing duration/steps.
  std::vector<double> times;
  double diameter = 0.0;

  std::size_t steps() const { return samples.empty() ? 0 : samples.size() - 1; }
  double time(std::size_t i) const {
    return times.empty() ? duration * double(i) / double(steps()) : times[i];
  }
  bool closed() const { return !samples.empty() && samples.front() == samples.back(); }
};

inline BrownianLoop make_loop(Point root, double t, std::vector<Point> pts) {
  BrownianLoop l;
  l.root = root;
  l.duration = t;
  l.samples = std::move(pts);
  l.diameter = point_set_diameter(l.samples);
  return l;
}

inline BrownianLoop sample_bridge(Point z, double t, std::size_t steps, RngStream& rng) {
  if (!(t > 0.0) || !std::isfinite(t)) throw std::invalid_argument("sample_bridge: duration must be positive");
  if (steps < 2 || !detail::is_power_of_two(steps)) throw std::invalid_argument("sample_bridge: steps must be a power of two >= 2");
  std::vector<Point> pts;
  detail::bridge_by_increments(z, t, steps, rng, pts);
  return make_loop(z, t, std::move(pts));
}

/// Doubles the resolution `levels` times by conditional midpoints. Uniform-time loops only.
inline BrownianLoop refine_loop(const BrownianLoop& loop, int levels, RngStream& rng) {
  if (!loop.times.empty()) throw std::invalid_argument("refine_loop: loop has non-uniform sample times");
  std::vector<Point> pts = loop.samples, buf;
  double tau = loop.duration / double(loop.steps());
  for (int l = 0; l < levels; ++l, tau /= 2.0) detail::refine_midpoints(pts, tau, rng, buf);
  return make_loop(loop.root, loop.duration, std::move(pts));
}

struct CutoffWindow {
  double delta = 0.0;
  double R = std::numeric_limits<double>::infinity();

  CutoffWindow() = default;
  CutoffWindow(double d, double r) : delta(d), R(r) {
    if (!(d > 0.0)) throw std::invalid_argument("cutoff window: delta must be positive");
    if (!(d < r)) throw std::invalid_argument("cutoff window: delta must be below R");
  }
  bool finite() const { return std::isfinite(R); }
  bool admits(double diam) const { return diam >= delta && diam < R; }
};

class ContinuumDomain {
 public:
  enum class Shape { Disk, Rectangle, Annulus, HalfPlaneWindow, PlaneWindow };

  static ContinuumDomain disk(Point c, double r) {
    if (!(r > 0.0)) throw std::invalid_argument("disk radius must be positive");
    return ContinuumDomain(Shape::Disk, c, r, 0.0, {c.real() - r, c.imag() - r, c.real() + r, c.imag() + r});
  }
  static ContinuumDomain unit_disk() { return disk({0.0, 0.0}, 1.0); }
  static ContinuumDomain rectangle(double x0, double y0, double x1, double y1) {
    if (!(x1 > x0 && y1 > y0)) throw std::invalid_argument("rectangle must have positive extent");
    return ContinuumDomain(Shape::Rectangle, {}, 0.0, 0.0, {x0, y0, x1, y1});
  }
  static ContinuumDomain annulus(Point c, double r_in, double r_out) {
    if (!(r_in > 0.0 && r_out > r_in)) throw std::invalid_argument("annulus needs 0 < r_in < r_out");
    return ContinuumDomain(Shape::Annulus, c, r_out, r_in, {c.real() - r_out, c.imag() - r_out, c.real() + r_out, c.imag() + r_out});
  }
  /// Upper half-plane observed through [x0,x1] x (0,y1].
  static ContinuumDomain halfplane_window(double x0, double x1, double y1) {
    if (!(x1 > x0 && y1 > 0.0)) throw std::invalid_argument("half-plane window must have positive extent");
    return ContinuumDomain(Shape::HalfPlaneWindow, {}, 0.0, 0.0, {x0, 0.0, x1, y1});
  }
  /// Whole plane observed through a box.
  static ContinuumDomain plane_window(double x0, double y0, double x1, double y1) {
    if (!(x1 > x0 && y1 > y0)) throw std::invalid_argument("plane window must have positive extent");
    return ContinuumDomain(Shape::PlaneWindow, {}, 0.0, 0.0, {x0, y0, x1, y1});
  }

  Shape shape() const { return shape_; }
  bool bounded() const { return shape_ == Shape::Disk || shape_ == Shape::Rectangle || shape_ == Shape::Annulus; }
  /// Observation box: the domain's bounding box, or the window.
  const Box& box() const { return box_; }

  bool contains(Point z) const {
    switch (shape_) {
      case Shape::Disk: return std::norm(z - center_) < radius_ * radius_;
      case Shape::Rectangle: return z.real() > box_.x0 && z.real() < box_.x1 && z.imag() > box_.y0 && z.imag() < box_.y1;
      case Shape::Annulus: {
        const double r2 = std::norm(z - center_);
        return r2 > inner_ * inner_ && r2 < radius_ * radius_;
      }
      case Shape::HalfPlaneWindow: return z.imag() > 0.0;
      case Shape::PlaneWindow: return true;
    }
    return false;
  }

  /// Whether membership has to be checked along loops.
  bool constrains_loops() const { return shape_ != Shape::PlaneWindow; }

  double diameter() const {
    switch (shape_) {
      case Shape::Disk:
      case Shape::Annulus: return 2.0 * radius_;
      case Shape::Rectangle: return std::hypot(box_.width(), box_.height());
      default: return std::numeric_limits<double>::infinity();
    }
  }

  /// Roots of loops that can matter: the domain box, or the window dilated by R.
  Box root_box(double R) const {
    if (bounded()) return box_;
    Box b{box_.x0 - R, box_.y0 - R, box_.x1 + R, box_.y1 + R};
    if (shape_ == Shape::HalfPlaneWindow) b.y0 = 0.0;
    return b;
  }

  std::string describe() const {
    char buf[160];
    switch (shape_) {
      case Shape::Disk:
        std::snprintf(buf, sizeof buf, "disk(%.17g,%.17g;%.17g)", center_.real(), center_.imag(), radius_);
        break;
      case Shape::Annulus:
        std::snprintf(buf, sizeof buf, "annulus(%.17g,%.17g;%.17g,%.17g)", center_.real(), center_.imag(), inner_, radius_);
        break;
      case Shape::Rectangle:
        std::snprintf(buf, sizeof buf, "rectangle(%.17g,%.17g,%.17g,%.17g)", box_.x0, box_.y0, box_.x1, box_.y1);
        break;
      case Shape::HalfPlaneWindow:
        std::snprintf(buf, sizeof buf, "halfplane(%.17g,%.17g,%.17g)", box_.x0, box_.x1, box_.y1);
        break;
      case Shape::PlaneWindow:
        std::snprintf(buf, sizeof buf, "plane(%.17g,%.17g,%.17g,%.17g)", box_.x0, box_.y0, box_.x1, box_.y1);
        break;
    }
    return buf;
  }

 private:
  ContinuumDomain(Shape s, Point c, double r, double rin, Box b) : shape_(s), center_(c), radius_(r), inner_(rin), box_(b) {}
  Shape shape_;
  Point center_;
  double radius_, inner_;
  Box box_;
};

/// Domain from a shape name and its numeric arguments, in the order describe() prints them.
inline ContinuumDomain make_continuum_domain(std::string_view shape, std::span<const double> a) {
  auto need = [&](std::size_t n) {
    if (a.size() != n) throw std::invalid_argument("domain '" + std::string(shape) + "' takes " + std::to_string(n) + " arguments");
  };
  if (shape == "unit_disk") {
    need(0);
    return ContinuumDomain::unit_disk();
  }
  if (shape == "disk") {
    need(3);
    return ContinuumDomain::disk({a[0], a[1]}, a[2]);
  }
  if (shape == "annulus") {
    need(4);
    return ContinuumDomain::annulus({a[0], a[1]}, a[2], a[3]);
  }
  if (shape == "rectangle") {
    need(4);
    return ContinuumDomain::rectangle(a[0], a[1], a[2], a[3]);
  }
  if (shape == "halfplane") {
    need(3);
    return ContinuumDomain::halfplane_window(a[0], a[1], a[2]);
  }
  if (shape == "plane") {
    need(4);
    return ContinuumDomain::plane_window(a[0], a[1], a[2], a[3]);
  }
  throw std::invalid_argument("unknown domain shape '" + std::string(shape) + "'");
}

namespace detail {

/// Splits "name(a,b;c)" into the name and the raw argument strings.
inline std::pair<std::string, std::vector<std::string>> split_call(std::string_view text) {
  auto trim = [](std::string_view v) {
    while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.remove_prefix(1);
    while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.remove_suffix(1);
    return v;
  };
  text = trim(text);
  const auto open = text.find('(');
  if (open == std::string_view::npos) return {std::string(text), {}};
  if (text.back() != ')') throw std::invalid_argument("malformed shape '" + std::string(text) + "'");
  std::vector<std::string> args;
  std::string_view body = text.substr(open + 1, text.size() - open - 2);
  while (!trim(body).empty()) {
    const auto cut = body.find_first_of(",;");
    args.emplace_back(trim(body.substr(0, cut)));
    if (cut == std::string_view::npos) break;
    body.remove_prefix(cut + 1);
  }
  return {std::string(trim(text.substr(0, open))), args};
}

}  // namespace detail

/// Inverse of ContinuumDomain::describe().
inline ContinuumDomain parse_continuum_domain(std::string_view text) {
  const auto [name, raw] = detail::split_call(text);
  std::vector<double> a;
  for (const auto& r : raw) a.push_back(std::stod(r));
  return make_continuum_domain(name, a);
}

struct SoupLoop {
  BrownianLoop loop;
  int type_flag = 1;
  /// Unit exponential killing threshold.
  double threshold = std::numeric_limits<double>::infinity();
};

struct ContinuumSoupRealization {
  std::vector<SoupLoop> loops;
  double lambda = 0.0;
  CutoffWindow window;
  ContinuumDomain domain = ContinuumDomain::unit_disk();
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  double t_lo = 0.0, t_hi = 0.0;
  /// Expected number of in-window loops missed by the duration window (range-law bound).
  double leak_bound = 0.0;
  /// The same quantity for short durations under the cruder Gaussian-tail bound.
  double leak_bound_gaussian = 0.0;

  std::size_t size() const { return loops.size(); }
};

struct SoupOptions {
  double c_lo = 1.0 / 9.0;
  double c_hi = 4.0;
  /// The window is widened until the leak bound drops below this.
  double leak_tolerance = 1e-3;
  std::size_t coarse_steps = 64;
  /// Pruning margin in units of the sub-interval standard deviation.
  double margin_sigmas = 5.0;
};

namespace detail {

/// Effective IR cutoff: R, or slightly more than the domain diameter when R is infinite.
inline double effective_R(const ContinuumDomain& d, const CutoffWindow& w) {
  if (w.finite()) return w.R;
  return d.diameter() * (1.0 + 1e-12);
}

inline void check_soup_inputs(const ContinuumDomain& domain, double lambda, const CutoffWindow& window, std::size_t steps) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("intensity must be nonnegative");
  if (!(window.delta > 0.0) || !(window.delta < window.R)) throw std::invalid_argument("cutoff window needs 0 < delta < R");
  if (!domain.bounded() && !window.finite()) throw std::invalid_argument("an IR cutoff R is required off bounded domains");
  if (steps < 2 || !is_power_of_two(steps)) throw std::invalid_argument("steps must be a power of two >= 2");
}

/// Per unit root area: missed mass with short duration (t < t_lo, diam >= delta).
template <class Tail>
double short_leak_density(double lambda, double delta, double t_lo, Tail&& tail) {
  // Substituting u = 1/t: int_{1/t_lo}^inf tail(1/u, delta) du / (2 pi).
  const double u0 = 1.0 / t_lo;
  double total = 0.0;
  double a = u0;
  // The integrand decays at least like exp(-delta^2 u / 576); integrate in growing chunks until negligible.
  for (int chunk = 0; chunk < 60; ++chunk) {
    const double b = a + std::max(u0, 4.0 / (delta * delta)) * std::pow(2.0, chunk);
    const double piece = simpson([&](double u) { return tail(1.0 / u, delta); }, a, b, 400);
    total += piece;
    a = b;
    if (piece < 1e-16 * std::max(total, 1e-300) || piece < 1e-300) break;
  }
  return lambda * total / (2.0 * std::numbers::pi);
}

/// Per unit root area: missed mass with long duration (t > t_hi, diam < R).
inline double long_leak_density(double lambda, double R, double t_hi) {
  return lambda / (2.0 * std::numbers::pi) * simpson([&](double u) { return u > 0.0 ? diameter_small_bound(1.0 / u, R) : 0.0; }, 0.0, 1.0 / t_hi, 400);
}

struct LevyChecks {
  const ContinuumDomain* domain = nullptr;
  double delta = 0.0, R = 0.0, margin_sigmas = 5.0;
  std::span<const Point> targets{};
};

/// Builds one candidate loop coarse-to-fine, discarding it as soon as it provably
/// (up to a margin of margin_sigmas sub-interval deviations) fails the checks.
inline bool build_candidate(Point z, double t, std::size_t steps, std::size_t coarse, const LevyChecks& c, RngStream& rng,
                            std::vector<Point>& pts, std::vector<Point>& buf) {
  const std::size_t n0 = std::min(coarse, steps);
  bridge_by_increments(z, t, n0, rng, pts);
  double tau = t / double(n0);
  for (;;) {
    const bool final_level = pts.size() - 1 == steps;
    const double margin = final_level ? 0.0 : c.margin_sigmas * std::sqrt(tau);
    if (c.domain->constrains_loops())
      for (const Point& p : pts)
        if (!c.domain->contains(p)) return false;
    const Box b = bounding_box(pts);
    if (std::max(b.width(), b.height()) >= c.R) return false;
    if (std::hypot(b.width(), b.height()) + 2.0 * std::numbers::sqrt2 * margin < c.delta) return false;
    if (!c.targets.empty()) {
      bool reach = false;
      for (const Point& q : c.targets) {
        if (q.real() >= b.x0 - margin && q.real() <= b.x1 + margin && q.imag() >= b.y0 - margin && q.imag() <= b.y1 + margin) {
          reach = true;
          break;
        }
      }
      if (!reach) return false;
    }
    if (final_level) return true;
    refine_midpoints(pts, tau, rng, buf);
    tau /= 2.0;
  }
}

}  // namespace detail

/// Duration window plus leak accounting for a soup over a root box.
struct DurationWindow {
  double t_lo = 0.0, t_hi = 0.0, leak = 0.0, leak_gaussian = 0.0;
};

inline DurationWindow choose_duration_window(double lambda, double area, double delta, double R, const SoupOptions& opt) {
  DurationWindow w;
  double c_lo = opt.c_lo, c_hi = opt.c_hi;
  auto kuiper = [](double t, double ell) { return diameter_tail_bound(t, ell); };
  double lo = 0.0, hi = 0.0;
  for (int i = 0; i < 40; ++i) {
    lo = area * detail::short_leak_density(lambda, delta, c_lo * delta * delta, kuiper);
    if (lo <= opt.leak_tolerance / 2.0) break;
    c_lo /= 2.0;
  }
  for (int i = 0; i < 40; ++i) {
    hi = area * detail::long_leak_density(lambda, R, c_hi * R * R);
    if (hi <= opt.leak_tolerance / 2.0) break;
    c_hi *= 2.0;
  }
  w.t_lo = c_lo * delta * delta;
  w.t_hi = c_hi * R * R;
  w.leak = lo + hi;
  w.leak_gaussian = area * detail::short_leak_density(lambda, delta, w.t_lo, [](double t, double ell) { return gaussian_diameter_tail_bound(t, ell); });
  return w;
}

/// Poisson soup of loops with diameter in [delta,R) rooted in the domain's root box.
inline ContinuumSoupRealization sample_loop_soup(const ContinuumDomain& domain, double lambda, const CutoffWindow& window, std::size_t steps,
                                                 RngStream& rng, const SoupOptions& opt = {}) {
  detail::check_soup_inputs(domain, lambda, window, steps);
  ContinuumSoupRealization soup;
  soup.lambda = lambda;
  soup.window = window;
  soup.domain = domain;
  soup.steps = steps;
  const double R = detail::effective_R(domain, window);
  const Box box = domain.root_box(R);
  const DurationWindow dw = choose_duration_window(lambda, box.area(), window.delta, R, opt);
  soup.t_lo = dw.t_lo;
  soup.t_hi = dw.t_hi;
  soup.leak_bound = dw.leak;
  soup.leak_bound_gaussian = dw.leak_gaussian;
  if (lambda == 0.0) return soup;

  const double inv_lo = 1.0 / dw.t_lo, inv_hi = 1.0 / dw.t_hi;
  const std::uint64_t n = rng.poisson(lambda * box.area() * (inv_lo - inv_hi) / (2.0 * std::numbers::pi));
  detail::LevyChecks checks{&domain, window.delta, R, opt.margin_sigmas, {}};
  std::vector<Point> pts, buf;
  for (std::uint64_t i = 0; i < n; ++i) {
    const double x = rng.uniform(box.x0, box.x1);
    const double y = rng.uniform(box.y0, box.y1);
    const double t = 1.0 / (inv_lo - rng.uniform() * (inv_lo - inv_hi));
    const Point z{x, y};
    if (domain.constrains_loops() && !domain.contains(z)) continue;
    if (!detail::build_candidate(z, t, steps, opt.coarse_steps, checks, rng, pts, buf)) continue;
    BrownianLoop l = make_loop(z, t, pts);
    if (!window.admits(l.diameter) || l.diameter >= R) continue;
    SoupLoop s{std::move(l), rng.sign(), rng.exponential()};
    soup.loops.push_back(std::move(s));
  }
  return soup;
}

struct LocalSoupOptions {
  double c_lo = 1.0 / 25.0;
  double c_hi = 4.0;
  /// Root disks have radius min(R, kappa sqrt(t)).
  double kappa = 5.0;
  double margin_sigmas = 5.0;
  std::size_t coarse_steps = 64;
};

/// Leak accounting for a soup restricted to loops that can cover given points (per point).
struct LocalLeak {
  double short_duration = 0.0, long_duration = 0.0, far_root = 0.0;
  double total() const { return short_duration + long_duration + far_root; }
};

inline LocalLeak local_leak_bound(double lambda, double delta, double R, double t_lo, double t_hi, double kappa) {
  LocalLeak leak;
  auto b1 = [](double v) { return std::min(1.0, 2.0 * bridge_range_tail(v / std::numbers::sqrt2)); };
  auto tail_moment = [&](double v0) {
    // int_{v0}^inf v b1(v) dv
    return detail::simpson([&](double v) { return v * b1(v); }, v0, v0 + 12.0, 800);
  };
  // Covering loops must have diameter at least the root distance.
  leak.short_duration = lambda * detail::simpson(
                                     [&](double s) {
                                       const double t = std::exp(s);
                                       const double inner = delta * delta * b1(delta / std::sqrt(t)) / 2.0 + t * tail_moment(delta / std::sqrt(t));
                                       return inner / t;
                                     },
                                     std::log(t_lo) - 12.0, std::log(t_lo), 800);
  const double t1 = std::min(t_hi, (R / kappa) * (R / kappa));
  if (t1 > t_lo) leak.far_root = lambda * tail_moment(kappa) * std::log(t1 / t_lo);
  leak.long_duration = lambda * R * R / 2.0 * detail::simpson([&](double u) { return u > 0.0 ? diameter_small_bound(1.0 / u, R) : 0.0; }, 0.0, 1.0 / t_hi, 400);
  return leak;
}

/// The part of a soup that can reach the given points: every loop of the full soup whose
/// filling contains one of the points is present, except on an event of probability at
/// most the reported leak.
inline ContinuumSoupRealization sample_local_soup(const ContinuumDomain& domain, double lambda, const CutoffWindow& window,
                                                  std::span<const Point> points, std::size_t steps, RngStream& rng,
                                                  const LocalSoupOptions& opt = {}) {
  detail::check_soup_inputs(domain, lambda, window, steps);
  if (points.empty()) throw std::invalid_argument("local soup needs at least one target point");
  ContinuumSoupRealization soup;
  soup.lambda = lambda;
  soup.window = window;
  soup.domain = domain;
  soup.steps = steps;
  const double R = detail::effective_R(domain, window);
  const double t_lo = opt.c_lo * window.delta * window.delta;
  const double t_hi = opt.c_hi * R * R;
  const double t1 = std::clamp((R / opt.kappa) * (R / opt.kappa), t_lo, t_hi);
  soup.t_lo = t_lo;
  soup.t_hi = t_hi;
  soup.leak_bound = double(points.size()) * local_leak_bound(lambda, window.delta, R, t_lo, t_hi, opt.kappa).total();
  soup.leak_bound_gaussian = std::numeric_limits<double>::quiet_NaN();
  if (lambda == 0.0) return soup;

  const double massA = lambda * opt.kappa * opt.kappa / 2.0 * std::log(t1 / t_lo);
  const double massB = lambda * R * R / 2.0 * (1.0 / t1 - 1.0 / t_hi);
  detail::LevyChecks checks{&domain, window.delta, R, opt.margin_sigmas, points};
  std::vector<Point> pts, buf;
  for (std::size_t j = 0; j < points.size(); ++j) {
    const std::uint64_t n = rng.poisson(massA + massB);
    for (std::uint64_t i = 0; i < n; ++i) {
      double t, rho;
      if (rng.uniform() * (massA + massB) < massA) {
        t = t_lo * std::exp(rng.uniform() * std::log(t1 / t_lo));
        rho = opt.kappa * std::sqrt(t);
      } else {
        t = 1.0 / (1.0 / t1 - rng.uniform() * (1.0 / t1 - 1.0 / t_hi));
        rho = R;
      }
      const double r = rho * std::sqrt(rng.uniform());
      const double th = 2.0 * std::numbers::pi * rng.uniform();
      const Point z = points[j] + std::polar(r, th);
      bool owned = true;
      for (std::size_t k = 0; k < j && owned; ++k) owned = std::abs(z - points[k]) >= std::min(R, opt.kappa * std::sqrt(t));
      if (!owned) continue;
      if (domain.constrains_loops() && !domain.contains(z)) continue;
      if (!detail::build_candidate(z, t, steps, opt.coarse_steps, checks, rng, pts, buf)) continue;
      BrownianLoop l = make_loop(z, t, pts);
      if (!window.admits(l.diameter) || l.diameter >= R) continue;
      SoupLoop s{std::move(l), rng.sign(), rng.exponential()};
      soup.loops.push_back(std::move(s));
    }
  }
  return soup;
}

/// R_m = int m^2(gamma(t)) dt by the composite trapezoid over the sample points.
inline double time_integral_mass(const BrownianLoop& loop, const MassFunction& m) {
  const std::size_t n = loop.steps();
  if (n == 0) return 0.0;
  CompensatedSum s;
  if (loop.times.empty()) {
    // Closed loop with uniform spacing: the trapezoid is a plain cyclic sum.
    for (std::size_t i = 0; i < n; ++i) {
      const double v = m(loop.samples[i]);
      s.add(v * v);
    }
    return loop.duration * (s.value() / double(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double a = m(loop.samples[i]), b = m(loop.samples[i + 1]);
    s.add(0.5 * (a * a + b * b) * (loop.times[i + 1] - loop.times[i]));
  }
  return s.value();
}

/// Keeps a loop iff R_m <= T. Stored thresholds are used so runs at different masses
/// are paired; loops without a finite threshold draw one from rng.
inline ContinuumSoupRealization massive_thinning(const ContinuumSoupRealization& soup, const MassFunction& m, RngStream& rng) {
  ContinuumSoupRealization out = soup;
  out.loops.clear();
  for (const SoupLoop& s : soup.loops) {
    SoupLoop c = s;
    if (!std::isfinite(c.threshold)) c.threshold = rng.exponential();
    if (time_integral_mass(c.loop, m) <= c.threshold) out.loops.push_back(std::move(c));
  }
  return out;
}

// Conformal map descriptors.

/// f(z) = a z + b.
struct AffineMap {
  Point a{1.0, 0.0}, b{0.0, 0.0};
};

/// f(z) = (a z + b) / (c z + d).
struct MobiusMap {
  Point a{1.0, 0.0}, b{}, c{}, d{1.0, 0.0};
};

/// f(z) = z^alpha on the sector theta_lo < arg z < theta_hi.
struct PowerMap {
  double alpha = 1.0;
  double theta_lo = -std::numbers::pi / 2.0, theta_hi = std::numbers::pi / 2.0;
};

using ConformalMap = std::variant<AffineMap, MobiusMap, PowerMap>;

/// w = e^{i theta} (z - a) / (1 - conj(a) z), an automorphism of the unit disk.
inline ConformalMap disk_automorphism(Point a, double theta = 0.0) {
  if (!(std::abs(a) < 1.0)) throw std::invalid_argument("disk automorphism needs |a| < 1");
  const Point rot = std::polar(1.0, theta);
  return MobiusMap{rot, -rot * a, -std::conj(a), {1.0, 0.0}};
}

inline ConformalMap rotation(double theta) { return AffineMap{std::polar(1.0, theta), {}}; }

namespace detail {

inline double sector_arg(const PowerMap& p, Point z) {
  double th = std::arg(z);
  const double mid = 0.5 * (p.theta_lo + p.theta_hi);
  while (th < mid - std::numbers::pi) th += 2.0 * std::numbers::pi;
  while (th >= mid + std::numbers::pi) th -= 2.0 * std::numbers::pi;
  return th;
}

}  // namespace detail

inline bool map_invertible(const ConformalMap& f) {
  return std::visit(
      [](const auto& m) -> bool {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, AffineMap>) return m.a != Point{};
        else if constexpr (std::is_same_v<M, MobiusMap>) return m.a * m.d - m.b * m.c != Point{};
        else return m.alpha != 0.0 && m.theta_hi > m.theta_lo && m.theta_hi - m.theta_lo <= 2.0 * std::numbers::pi &&
                    std::abs(m.alpha) * (m.theta_hi - m.theta_lo) <= 2.0 * std::numbers::pi;
      },
      f);
}

/// Whether z lies where the descriptor is analytic and univalent.
inline bool map_defined_at(const ConformalMap& f, Point z) {
  return std::visit(
      [&](const auto& m) -> bool {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, AffineMap>) return true;
        else if constexpr (std::is_same_v<M, MobiusMap>) return std::abs(m.c * z + m.d) > 1e-12 * (std::abs(m.c) * std::abs(z) + std::abs(m.d));
        else {
          if (z == Point{}) return false;
          const double th = detail::sector_arg(m, z);
          return th > m.theta_lo && th < m.theta_hi;
        }
      },
      f);
}

inline Point map_point(const ConformalMap& f, Point z) {
  return std::visit(
      [&](const auto& m) -> Point {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, AffineMap>) return m.a * z + m.b;
        else if constexpr (std::is_same_v<M, MobiusMap>) return (m.a * z + m.b) / (m.c * z + m.d);
        else return std::polar(std::pow(std::abs(z), m.alpha), m.alpha * detail::sector_arg(m, z));
      },
      f);
}

inline Point map_derivative(const ConformalMap& f, Point z) {
  return std::visit(
      [&](const auto& m) -> Point {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, AffineMap>) return m.a;
        else if constexpr (std::is_same_v<M, MobiusMap>) {
          const Point q = m.c * z + m.d;
          return (m.a * m.d - m.b * m.c) / (q * q);
        } else return m.alpha * std::polar(std::pow(std::abs(z), m.alpha - 1.0), (m.alpha - 1.0) * detail::sector_arg(m, z));
      },
      f);
}

inline Point map_inverse(const ConformalMap& f, Point w) {
  if (!map_invertible(f)) throw std::invalid_argument("conformal map is not invertible");
  return std::visit(
      [&](const auto& m) -> Point {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, AffineMap>) return (w - m.b) / m.a;
        else if constexpr (std::is_same_v<M, MobiusMap>) return (m.d * w - m.b) / (-m.c * w + m.a);
        else {
          double th = std::arg(w);
          const double lo = m.alpha * m.theta_lo, hi = m.alpha * m.theta_hi;
          const double mid = 0.5 * (lo + hi);
          while (th < mid - std::numbers::pi) th += 2.0 * std::numbers::pi;
          while (th >= mid + std::numbers::pi) th -= 2.0 * std::numbers::pi;
          return std::polar(std::pow(std::abs(w), 1.0 / m.alpha), th / m.alpha);
        }
      },
      f);
}

/// Maps the vertices and reparametrizes time by s(t) = int |f'(gamma)|^2 dt (trapezoid).
inline BrownianLoop conformal_map_loop(const ConformalMap& f, const BrownianLoop& loop) {
  const std::size_t n = loop.steps();
  for (const Point& p : loop.samples)
    if (!map_defined_at(f, p)) throw std::domain_error("conformal_map_loop: loop leaves the map's domain");
  if (const auto* mb = std::get_if<MobiusMap>(&f); mb && mb->c != Point{}) {
    // A segment passing next to the pole is not resolved by its endpoints.
    const Point pole = -mb->d / mb->c;
    for (std::size_t i = 0; i < n; ++i) {
      const Point a = loop.samples[i], b = loop.samples[i + 1];
      const Point ab = b - a;
      const double len2 = std::norm(ab);
      const double s = len2 > 0.0 ? std::clamp(((pole - a) * std::conj(ab)).real() / len2, 0.0, 1.0) : 0.0;
      if (std::abs(pole - (a + s * ab)) <= std::sqrt(len2)) throw std::domain_error("conformal_map_loop: loop passes the pole");
    }
  }
  BrownianLoop out;
  out.samples.resize(n + 1);
  out.times.resize(n + 1);
  std::vector<double> j2(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    out.samples[i] = map_point(f, loop.samples[i]);
    j2[i] = std::norm(map_derivative(f, loop.samples[i]));
  }
  out.samples[n] = out.samples[0];
  out.times[0] = 0.0;
  CompensatedSum s;
  for (std::size_t i = 0; i < n; ++i) {
    s.add(0.5 * (j2[i] + j2[i + 1]) * (loop.time(i + 1) - loop.time(i)));
    out.times[i + 1] = s.value();
  }
  out.duration = out.times[n];
  out.root = out.samples[0];
  out.diameter = point_set_diameter(out.samples);
  return out;
}

/// m~(w) = m(f^{-1}(w)) / |f'(f^{-1}(w))|.
inline MassFunction mass_transform(const ConformalMap& f, MassFunction m) {
  if (!map_invertible(f)) throw std::invalid_argument("mass_transform: conformal map is not invertible");
  return [f, m = std::move(m)](Point w) {
    const Point z = map_inverse(f, w);
    return m(z) / std::abs(map_derivative(f, z));
  };
}

/// h(l) = (187 - 7 l + sqrt(25 + l^2 - 26 l)) / 96.
inline double carpet_dimension(double ell) {
  if (!(ell >= 0.0 && ell <= 1.0)) throw std::invalid_argument("carpet_dimension: argument must lie in [0,1]");
  const double disc = std::max(0.0, 25.0 + ell * ell - 26.0 * ell);
  return (187.0 - 7.0 * ell + std::sqrt(disc)) / 96.0;
}

// Text format: header lines, then one loop per line as
// t_gamma;steps;x0,y0;...;xN,yN;type;threshold

inline std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::ordered_json soup_manifest(const ContinuumSoupRealization& soup) {
  nlohmann::ordered_json j;
  j["lambda"] = soup.lambda;
  j["delta"] = soup.window.delta;
  j["R"] = soup.window.finite() ? nlohmann::ordered_json(soup.window.R) : nlohmann::ordered_json("inf");
  j["domain"] = soup.domain.describe();
  j["steps"] = soup.steps;
  j["seed"] = soup.seed;
  j["t_lo"] = soup.t_lo;
  j["t_hi"] = soup.t_hi;
  j["leak_bound"] = soup.leak_bound;
  j["leak_bound_gaussian"] = std::isfinite(soup.leak_bound_gaussian) ? nlohmann::ordered_json(soup.leak_bound_gaussian) : nlohmann::ordered_json(nullptr);
  j["loops"] = soup.loops.size();
  return j;
}

inline void write_continuum_soup(std::ostream& os, const ContinuumSoupRealization& soup) {
  os << "# lambda=" << format17(soup.lambda) << '\n';
  os << "# delta=" << format17(soup.window.delta) << '\n';
  os << "# R=" << (soup.window.finite() ? format17(soup.window.R) : std::string("inf")) << '\n';
  os << "# domain=" << soup.domain.describe() << '\n';
  os << "# steps=" << soup.steps << '\n';
  os << "# seed=" << soup.seed << '\n';
  os << "# leak_bound=" << format17(soup.leak_bound) << '\n';
  os << "# loops=" << soup.loops.size() << '\n';
  for (const SoupLoop& s : soup.loops) {
    os << format17(s.loop.duration) << ';' << s.loop.steps();
    for (const Point& p : s.loop.samples) os << ';' << format17(p.real()) << ',' << format17(p.imag());
    os << ';' << s.type_flag << ';' << format17(s.threshold) << '\n';
  }
}

/// Reads a soup file. Unknown header lines are skipped.
inline ContinuumSoupRealization read_continuum_soup(std::istream& is) {
  ContinuumSoupRealization soup;
  double delta = 0.0, R = std::numeric_limits<double>::infinity();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
      if (key == "lambda") soup.lambda = std::stod(val);
      else if (key == "delta") delta = std::stod(val);
      else if (key == "R") R = val == "inf" ? std::numeric_limits<double>::infinity() : std::stod(val);
      else if (key == "domain") soup.domain = parse_continuum_domain(val);
      else if (key == "steps") soup.steps = std::stoul(val);
      else if (key == "seed") soup.seed = std::stoull(val);
      else if (key == "leak_bound") soup.leak_bound = std::stod(val);
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ';')) f.push_back(tok);
    if (f.size() < 4) throw std::runtime_error("malformed loop line");
    const double t = std::stod(f[0]);
    const std::size_t steps = std::stoul(f[1]);
    if (f.size() != steps + 5) throw std::runtime_error("loop line has wrong vertex count");
    std::vector<Point> pts(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
      const auto c = f[2 + i].find(',');
      if (c == std::string::npos) throw std::runtime_error("malformed vertex");
      pts[i] = {std::stod(f[2 + i].substr(0, c)), std::stod(f[2 + i].substr(c + 1))};
    }
    const Point root = pts[0];
    SoupLoop s{make_loop(root, t, std::move(pts)), std::stoi(f[steps + 3]), std::stod(f[steps + 4])};
    soup.loops.push_back(std::move(s));
  }
  if (delta > 0.0) soup.window = CutoffWindow(delta, R);
  return soup;
}

}  // namespace loopsoup
