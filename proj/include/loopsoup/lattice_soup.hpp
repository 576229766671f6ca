#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lattice.hpp"
#include "rng.hpp"

namespace loopsoup {

/// Mass function on lattice sites, returned squared. +infinity is allowed and removes
/// every loop touching the site.
using LatticeMassSquared = std::function<double(const Site&)>;

inline LatticeMassSquared constant_mass(double m) {
  const double m2 = std::isinf(m) ? std::numeric_limits<double>::infinity() : m * m;
  return [m2](const Site&) { return m2; };
}

inline LatticeMassSquared infinite_mass() { return constant_mass(std::numeric_limits<double>::infinity()); }

/// m^2(x) = log(1 + k_x/4), the mass whose thinning reproduces killing rates k.
inline LatticeMassSquared mass_from_killing(const KillingField& k) {
  return [k](const Site& s) { return k.mass_squared(s); };
}

struct LatticeSoupRealization {
  std::vector<UnrootedLatticeLoop> loops;
  double lambda = 0.0;
  int scale = 1;  // loops live on (1/scale) Z^2
  std::uint64_t seed = 0;
  std::string killing = "default=0";
  std::size_t max_length = 0;
  double truncation_bound = 0.0;  // mass of loops longer than max_length (per unit intensity)

  std::size_t size() const noexcept { return loops.size(); }

  /// Rescaled duration |loop| / (2 N^2).
  double duration(std::size_t i) const {
    const double n = scale;
    return static_cast<double>(loops[i].length()) / (2.0 * n * n);
  }

  /// Vertices of loop i on (1/N) Z^2 as complex points (closed polyline).
  std::vector<std::complex<double>> polyline(std::size_t i) const {
    const auto& v = loops[i].canonical_representative().vertices();
    std::vector<std::complex<double>> out;
    out.reserve(v.size());
    const double inv = 1.0 / scale;
    for (const Site& s : v) out.emplace_back(s.x * inv, s.y * inv);
    return out;
  }

  /// Number of loops equal to `target`.
  std::size_t count(const UnrootedLatticeLoop& target) const {
    return static_cast<std::size_t>(std::count(loops.begin(), loops.end(), target));
  }
};

/// Poisson pmf and generating function of the number of loops from a class of mass nu.
inline double loop_count_pmf(double class_mass, double lambda, std::uint64_t l) {
  const double mu = lambda * class_mass;
  if (mu == 0.0) return l == 0 ? 1.0 : 0.0;
  const double lf = static_cast<double>(l);
  return std::exp(-mu + lf * std::log(mu) - std::lgamma(lf + 1.0));
}

inline double loop_count_pgf(double class_mass, double lambda, double x) { return std::exp(lambda * class_mass * (x - 1.0)); }

struct PoissonParameters {
  double q_tilde = 0.0;  // discrete mass of length-2n loops rooted at a site
  double q = 0.0;        // Brownian mass of loops rooted in a unit cell with duration in [n-3/8, n+5/8]
  double gap = 0.0;      // |q - q_tilde|
};

/// q~_n = (lambda/2n) [4^{-n} C(2n,n)]^2 and q_n = (lambda/2pi) / ((n-3/8)(n+5/8)).
///
/// Both are written as lambda/(2 pi n^2) times a correction factor so the gap,
/// which is four orders smaller than either term for large n, is formed without
/// cancellation. For n > 1000 the central-binomial log comes from its
/// asymptotic series (error below 1e-19 there).
inline PoissonParameters poisson_parameters(std::uint64_t n, double lambda) {
  if (n == 0) throw std::invalid_argument("poisson_parameters: n must be positive");
  const double nn = static_cast<double>(n);
  const double base = lambda / (2.0 * std::numbers::pi * nn * nn);
  // q_tilde = base * exp(b), b = 2 log(4^{-n} C(2n,n)) + log(pi n)
  double b;
  if (n <= 1000) {
    const double log_c = std::lgamma(2.0 * nn + 1.0) - 2.0 * std::lgamma(nn + 1.0) - 2.0 * nn * std::numbers::ln2;
    b = 2.0 * log_c + std::log(std::numbers::pi * nn);
  } else {
    const double i1 = 1.0 / nn, i3 = i1 * i1 * i1, i5 = i3 * i1 * i1;
    b = -i1 / 4.0 + i3 / 96.0 - i5 / 320.0;
  }
  // q = base / (1 + a), (n-3/8)(n+5/8) = n^2 (1 + a)
  const double a = 1.0 / (4.0 * nn) - 15.0 / (64.0 * nn * nn);
  PoissonParameters p;
  p.q_tilde = base * std::exp(b);
  p.q = base / (1.0 + a);
  p.gap = base * std::abs(-a / (1.0 + a) - std::expm1(b));
  return p;
}

enum class KillingMethod {
  Thinning,  // sample the critical soup, then thin with m^2 = log(1 + k/4)
  Direct,    // sample weight-proportional loops under the killed walk
};

/// Sampler for random walk loop soups truncated at `max_length`.
///
/// Finite domains: per-root masses (1/2n) P^{2n}(z,z) are tabulated once; a
/// realization draws one Poisson count per root and a length per loop, then
/// builds each loop backwards from h_r = P^r e_z. With k = 0 this is uniform
/// over the length-2n loops at z that stay in the domain.
///
/// The plane: loops are rooted in a finite window and unrestricted otherwise.
/// A uniform length-2n loop is two independent +-1 bridges in the rotated
/// coordinates u = x + y, v = x - y.
class LatticeSoupSampler {
 public:
  LatticeSoupSampler(const LatticeDomain& domain, const KillingField& killing, double lambda, std::size_t max_length,
                     std::optional<LatticeDomain> window = std::nullopt, KillingMethod method = KillingMethod::Thinning)
      : domain_(domain), killing_(killing), lambda_(lambda), max_length_(max_length), method_(method) {
    if (!(lambda > 0.0)) throw std::invalid_argument("sample_soup: intensity must be positive");
    if (max_length < 2 || max_length % 2 != 0) throw std::invalid_argument("sample_soup: maxLength must be even and >= 2");
    plane_ = !domain.is_finite();
    if (plane_) {
      if (!window || !window->is_finite()) throw std::invalid_argument("sample_soup: a plane soup needs a finite root window");
      if (method == KillingMethod::Direct && !killing.is_zero())
        throw std::invalid_argument("sample_soup: direct killed sampling needs a finite domain; use thinning");
      roots_ = window->sites();
      build_plane_tables();
    } else {
      idx_ = std::make_shared<SiteIndex>(domain);
      roots_ = idx_->sites();
      build_domain_tables();
    }
  }

  double lambda() const noexcept { return lambda_; }
  std::size_t max_length() const noexcept { return max_length_; }

  /// Expected number of loops per realization before any thinning.
  double expected_count() const {
    double s = 0.0;
    for (double m : root_mass_) s += m;
    return lambda_ * s;
  }

  /// Per-unit-intensity mass of the loops discarded by the length truncation.
  double truncation_bound() const noexcept { return truncation_bound_; }

  LatticeSoupRealization sample(RngStream& rng, std::uint64_t seed_record = 0) const {
    LatticeSoupRealization out;
    out.lambda = lambda_;
    out.seed = seed_record;
    out.killing = killing_.describe();
    out.max_length = max_length_;
    out.truncation_bound = truncation_bound_;
    std::vector<Site> cycle;
    for (std::size_t r = 0; r < roots_.size(); ++r) {
      const std::uint64_t count = rng.poisson(lambda_ * root_mass_[r]);
      for (std::uint64_t c = 0; c < count; ++c) {
        const auto& cdf = length_cdf_[r];
        const double u = rng.uniform() * cdf.back();
        const std::size_t k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        const std::size_t n = std::min(k, cdf.size() - 1) + 1;
        if (plane_)
          plane_loop(roots_[r], n, rng, cycle);
        else
          domain_loop(r, n, rng, cycle);
        if (thin_ && !survives_thinning(cycle, rng)) continue;
        out.loops.emplace_back(RootedLatticeLoop::from_cycle(cycle));
      }
    }
    return out;
  }

 private:
  void build_plane_tables() {
    const std::size_t nmax = max_length_ / 2;
    std::vector<double> per_n(nmax);
    for (std::size_t n = 1; n <= nmax; ++n) per_n[n - 1] = poisson_parameters(n, 1.0).q_tilde;
    std::vector<double> cdf(nmax);
    double acc = 0.0;
    for (std::size_t i = 0; i < nmax; ++i) cdf[i] = (acc += per_n[i]);
    root_mass_.assign(roots_.size(), acc);
    length_cdf_.assign(roots_.size(), cdf);
    // sum_{n > N} q~_n <= sum 1/(2 pi n^2) <= 1/(2 pi N)
    truncation_bound_ = static_cast<double>(roots_.size()) / (2.0 * std::numbers::pi * static_cast<double>(nmax));
    thin_ = !killing_.is_zero();
  }

  void build_domain_tables() {
    const std::size_t ns = idx_->size();
    const bool critical_walk = method_ == KillingMethod::Thinning;
    thin_ = critical_walk && !killing_.is_zero();
    step_.resize(ns);
    for (std::size_t i = 0; i < ns; ++i) step_[i] = critical_walk ? 0.25 : killing_.step_probability(idx_->site(i));
    root_mass_.assign(ns, 0.0);
    length_cdf_.assign(ns, {});
    const std::size_t nmax = max_length_ / 2;
    std::vector<double> h(ns), hn(ns);
    for (std::size_t z = 0; z < ns; ++z) {
      std::fill(h.begin(), h.end(), 0.0);
      h[z] = 1.0;
      auto& cdf = length_cdf_[z];
      cdf.assign(nmax, 0.0);
      double acc = 0.0;
      for (std::size_t r = 1; r <= max_length_; ++r) {
        apply(h, hn);
        std::swap(h, hn);
        if (r % 2 == 0) acc += h[z] / static_cast<double>(r);
        if (r % 2 == 0) cdf[r / 2 - 1] = acc;
      }
      root_mass_[z] = acc;
    }
    const KillingField sampled = critical_walk ? KillingField(0.0) : killing_;
    truncation_bound_ = WalkSpectrum(domain_, sampled).tail_bound(max_length_);
    // h tables per root are cached when they fit in a modest budget.
    if (ns * ns * (max_length_ + 1) <= (std::size_t{1} << 22)) {
      cache_.resize(ns);
      for (std::size_t z = 0; z < ns; ++z) cache_[z] = bridge_table(z);
    }
  }

  // hn = P h, P(x,y) = step_[x] for neighbours.
  void apply(const std::vector<double>& h, std::vector<double>& hn) const {
    for (std::size_t x = 0; x < h.size(); ++x) {
      double s = 0.0;
      for (int y : idx_->neighbors(x)) s += h[static_cast<std::size_t>(y)];
      hn[x] = step_[x] * s;
    }
  }

  // Row r holds P^r e_z (paths of length r ending at z).
  std::vector<std::vector<double>> bridge_table(std::size_t z) const {
    std::vector<std::vector<double>> t(max_length_ + 1, std::vector<double>(idx_->size(), 0.0));
    t[0][z] = 1.0;
    for (std::size_t r = 1; r <= max_length_; ++r) apply(t[r - 1], t[r]);
    return t;
  }

  void domain_loop(std::size_t z, std::size_t n, RngStream& rng, std::vector<Site>& cycle) const {
    std::vector<std::vector<double>> local;
    const std::vector<std::vector<double>>* table = nullptr;
    if (!cache_.empty()) {
      table = &cache_[z];
    } else {
      local = bridge_table(z);
      table = &local;
    }
    const std::size_t L = 2 * n;
    cycle.clear();
    std::size_t x = z;
    for (std::size_t r = L; r > 0; --r) {
      cycle.push_back(idx_->site(x));
      const auto& prev = (*table)[r - 1];
      const double total = (*table)[r][x] / step_[x];  // sum of prev over neighbours
      double u = rng.uniform() * total;
      std::size_t next = x;
      for (int y : idx_->neighbors(x)) {
        const auto cand = static_cast<std::size_t>(y);
        if (prev[cand] <= 0.0) continue;
        next = cand;
        u -= prev[cand];
        if (u < 0.0) break;
      }
      x = next;
    }
  }

  static void plane_loop(const Site& root, std::size_t n, RngStream& rng, std::vector<Site>& cycle) {
    const std::size_t L = 2 * n;
    std::vector<int> du(L), dv(L);
    for (std::size_t i = 0; i < L; ++i) du[i] = dv[i] = i < n ? 1 : -1;
    std::shuffle(du.begin(), du.end(), rng.engine());
    std::shuffle(dv.begin(), dv.end(), rng.engine());
    cycle.clear();
    int u = root.x + root.y, v = root.x - root.y;
    for (std::size_t i = 0; i < L; ++i) {
      cycle.push_back({(u + v) / 2, (u - v) / 2});
      u += du[i];
      v += dv[i];
    }
  }

  bool survives_thinning(const std::vector<Site>& cycle, RngStream& rng) const {
    double s = 0.0;
    for (const Site& x : cycle) s += killing_.mass_squared(x);
    return !(s > rng.exponential());
  }

  LatticeDomain domain_;
  KillingField killing_;
  double lambda_;
  std::size_t max_length_;
  KillingMethod method_;
  bool plane_ = false;
  bool thin_ = false;
  std::shared_ptr<SiteIndex> idx_;
  std::vector<Site> roots_;
  std::vector<double> step_;
  std::vector<double> root_mass_;
  std::vector<std::vector<double>> length_cdf_;
  std::vector<std::vector<std::vector<double>>> cache_;
  double truncation_bound_ = 0.0;
};

inline LatticeSoupRealization sample_soup(const LatticeDomain& domain, const KillingField& killing, double lambda,
                                          std::size_t max_length, RngStream& rng,
                                          std::optional<LatticeDomain> window = std::nullopt) {
  return LatticeSoupSampler(domain, killing, lambda, max_length, std::move(window)).sample(rng);
}

/// Each loop survives iff sum_i m^2(x_i) <= T with T ~ Exp(1).
inline LatticeSoupRealization thin_to_massive(const LatticeSoupRealization& soup, const LatticeMassSquared& m2, RngStream& rng) {
  LatticeSoupRealization out = soup;
  out.loops.clear();
  for (const auto& loop : soup.loops) {
    double s = 0.0;
    for (const Site& x : loop.canonical_representative().cycle()) {
      const double v = m2(x);
      if (v < 0.0 || std::isnan(v)) throw std::invalid_argument("thin_to_massive: negative squared mass");
      s += v;
    }
    const double t = rng.exponential();
    if (!(s > t)) out.loops.push_back(loop);
  }
  return out;
}

/// Thinning of a rescaled soup by a continuum mass m(z): each step of the
/// loop on (1/N) Z^2 carries time 1/(2 N^2), i.e. lattice mass m(x/N)/(sqrt2 N).
inline LatticeSoupRealization thin_to_massive_continuum(const LatticeSoupRealization& soup,
                                                        const std::function<double(std::complex<double>)>& m, RngStream& rng) {
  const double n = soup.scale;
  const double dt = 1.0 / (2.0 * n * n);
  return thin_to_massive(
      soup,
      [&](const Site& s) {
        const double v = m({s.x / n, s.y / n});
        return v * v * dt;
      },
      rng);
}

/// Moves a scale-1 soup to (1/N) Z^2. Vertices stay integral; `scale` records N.
inline LatticeSoupRealization rescale(const LatticeSoupRealization& soup, int N) {
  if (N <= 0) throw std::invalid_argument("rescale: N must be a positive integer");
  if (soup.scale != 1) throw std::invalid_argument("rescale: soup is already rescaled");
  LatticeSoupRealization out = soup;
  out.scale = N;
  return out;
}

inline void write_lattice_soup(std::ostream& os, const LatticeSoupRealization& soup) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", soup.lambda);
  os << "# lambda=" << buf << '\n';
  os << "# killing=" << soup.killing << '\n';
  os << "# seed=" << soup.seed << '\n';
  os << "# scale=" << soup.scale << '\n';
  os << "# max_length=" << soup.max_length << '\n';
  std::snprintf(buf, sizeof buf, "%.17g", soup.truncation_bound);
  os << "# truncation_bound=" << buf << '\n';
  os << "# loops=" << soup.loops.size() << '\n';
  for (const auto& loop : soup.loops) {
    const auto& v = loop.canonical_representative().vertices();
    os << loop.length();
    for (const Site& s : v) os << ';' << s.x << ',' << s.y;
    os << '\n';
  }
}

inline LatticeSoupRealization read_lattice_soup(std::istream& is) {
  LatticeSoupRealization soup;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      const std::string val = line.substr(eq + 1);
      if (key == "lambda") soup.lambda = std::stod(val);
      else if (key == "killing") soup.killing = val;
      else if (key == "seed") soup.seed = std::stoull(val);
      else if (key == "scale") soup.scale = std::stoi(val);
      else if (key == "max_length") soup.max_length = std::stoull(val);
      else if (key == "truncation_bound") soup.truncation_bound = std::stod(val);
      continue;
    }
    std::istringstream ls(line);
    std::string tok;
    if (!std::getline(ls, tok, ';')) continue;
    const std::size_t L = std::stoull(tok);
    std::vector<Site> v;
    while (std::getline(ls, tok, ';')) {
      const auto c = tok.find(',');
      if (c == std::string::npos) throw std::runtime_error("read_lattice_soup: malformed vertex '" + tok + "'");
      v.push_back({std::stoi(tok.substr(0, c)), std::stoi(tok.substr(c + 1))});
    }
    RootedLatticeLoop r(std::move(v));
    if (r.length() != L) throw std::runtime_error("read_lattice_soup: length does not match vertex count");
    soup.loops.emplace_back(r);
  }
  return soup;
}

}  // namespace loopsoup
