#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace loopsoup {

struct Site {
  int x = 0;
  int y = 0;
  friend auto operator<=>(const Site&, const Site&) = default;
  friend bool operator==(const Site&, const Site&) = default;
};

struct SiteHash {
  std::size_t operator()(const Site& s) const noexcept {
    const auto ux = static_cast<std::uint64_t>(static_cast<std::uint32_t>(s.x));
    const auto uy = static_cast<std::uint64_t>(static_cast<std::uint32_t>(s.y));
    std::uint64_t h = (ux << 32) ^ uy;
    h ^= h >> 33;
    h *= 0xFF51AFD7ED558CCDull;
    h ^= h >> 33;
    return static_cast<std::size_t>(h);
  }
};

inline constexpr Site kNeighborOffsets[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};

inline bool adjacent(const Site& a, const Site& b) noexcept { return std::abs(a.x - b.x) + std::abs(a.y - b.y) == 1; }

/// Site set of a lattice domain. Finite shapes enumerate their sites in
/// lexicographic order; `plane()` is the whole lattice.
class LatticeDomain {
 public:
  struct Rectangle {
    int x0, y0, x1, y1;  // inclusive corners
  };
  struct Disk {
    double cx, cy, r;  // open disk, D# = D cap Z^2
  };
  struct Explicit {
    std::vector<Site> sites;  // sorted, unique
  };
  struct Plane {};

  static LatticeDomain rectangle(int x0, int y0, int x1, int y1) {
    if (x1 < x0 || y1 < y0) throw std::invalid_argument("LatticeDomain::rectangle: empty rectangle");
    return LatticeDomain(Rectangle{x0, y0, x1, y1});
  }
  /// width x height block with lower-left corner at the origin.
  static LatticeDomain grid(int width, int height) { return rectangle(0, 0, width - 1, height - 1); }
  static LatticeDomain disk(double cx, double cy, double r) {
    if (!(r > 0.0)) throw std::invalid_argument("LatticeDomain::disk: radius must be positive");
    return LatticeDomain(Disk{cx, cy, r});
  }
  static LatticeDomain from_sites(std::vector<Site> sites) {
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
    return LatticeDomain(Explicit{std::move(sites)});
  }
  static LatticeDomain plane() { return LatticeDomain(Plane{}); }

  bool is_finite() const noexcept { return !std::holds_alternative<Plane>(shape_); }

  bool contains(const Site& s) const {
    return std::visit(
        [&](const auto& sh) -> bool {
          using T = std::decay_t<decltype(sh)>;
          if constexpr (std::is_same_v<T, Rectangle>) {
            return s.x >= sh.x0 && s.x <= sh.x1 && s.y >= sh.y0 && s.y <= sh.y1;
          } else if constexpr (std::is_same_v<T, Disk>) {
            const double dx = s.x - sh.cx, dy = s.y - sh.cy;
            return dx * dx + dy * dy < sh.r * sh.r;
          } else if constexpr (std::is_same_v<T, Explicit>) {
            return std::binary_search(sh.sites.begin(), sh.sites.end(), s);
          } else {
            return true;
          }
        },
        shape_);
  }

  /// Sites in lexicographic order. Throws for the plane.
  std::vector<Site> sites() const {
    return std::visit(
        [&](const auto& sh) -> std::vector<Site> {
          using T = std::decay_t<decltype(sh)>;
          std::vector<Site> out;
          if constexpr (std::is_same_v<T, Rectangle>) {
            for (int x = sh.x0; x <= sh.x1; ++x)
              for (int y = sh.y0; y <= sh.y1; ++y) out.push_back({x, y});
          } else if constexpr (std::is_same_v<T, Disk>) {
            const int x0 = static_cast<int>(std::floor(sh.cx - sh.r)), x1 = static_cast<int>(std::ceil(sh.cx + sh.r));
            const int y0 = static_cast<int>(std::floor(sh.cy - sh.r)), y1 = static_cast<int>(std::ceil(sh.cy + sh.r));
            for (int x = x0; x <= x1; ++x)
              for (int y = y0; y <= y1; ++y)
                if (contains({x, y})) out.push_back({x, y});
          } else if constexpr (std::is_same_v<T, Explicit>) {
            out = sh.sites;
          } else {
            throw std::logic_error("LatticeDomain::sites: the plane has no finite site list");
          }
          return out;
        },
        shape_);
  }

  /// Sites of D# with at least one lattice neighbour outside D#.
  std::vector<Site> boundary() const {
    std::vector<Site> out;
    for (const Site& s : sites()) {
      for (const Site& d : kNeighborOffsets)
        if (!contains({s.x + d.x, s.y + d.y})) {
          out.push_back(s);
          break;
        }
    }
    return out;
  }

  std::string describe() const {
    return std::visit(
        [](const auto& sh) -> std::string {
          using T = std::decay_t<decltype(sh)>;
          if constexpr (std::is_same_v<T, Rectangle>)
            return "rectangle(" + std::to_string(sh.x0) + "," + std::to_string(sh.y0) + "," + std::to_string(sh.x1) + "," +
                   std::to_string(sh.y1) + ")";
          else if constexpr (std::is_same_v<T, Disk>)
            return "disk(" + std::to_string(sh.cx) + "," + std::to_string(sh.cy) + "," + std::to_string(sh.r) + ")";
          else if constexpr (std::is_same_v<T, Explicit>)
            return "sites(" + std::to_string(sh.sites.size()) + ")";
          else
            return "plane";
        },
        shape_);
  }

 private:
  using Shape = std::variant<Rectangle, Disk, Explicit, Plane>;
  explicit LatticeDomain(Shape s) : shape_(std::move(s)) {}
  Shape shape_;
};

/// Per-site killing rates k_x >= 0 with a default for unlisted sites.
class KillingField {
 public:
  explicit KillingField(double default_rate = 0.0) : default_(default_rate) { check(default_rate); }

  static KillingField uniform(double k) { return KillingField(k); }

  /// k_x = 4 (exp(m^2) - 1) for a constant mass m.
  static KillingField from_mass(double m) { return KillingField(4.0 * std::expm1(m * m)); }

  KillingField& set(const Site& s, double k) {
    check(k);
    rates_[s] = k;
    return *this;
  }

  double rate(const Site& s) const {
    auto it = rates_.find(s);
    return it == rates_.end() ? default_ : it->second;
  }
  double default_rate() const noexcept { return default_; }
  const std::map<Site, double>& overrides() const noexcept { return rates_; }

  /// One-step probability 1/(k_x+4) towards each neighbour.
  double step_probability(const Site& s) const { return 1.0 / (rate(s) + 4.0); }

  /// Matching lattice mass: m^2(x) = log(1 + k_x/4).
  double mass_squared(const Site& s) const { return std::log1p(rate(s) / 4.0); }

  bool is_zero() const {
    if (default_ != 0.0) return false;
    return std::all_of(rates_.begin(), rates_.end(), [](const auto& kv) { return kv.second == 0.0; });
  }

  std::string describe() const {
    std::string s = "default=" + format(default_);
    for (const auto& [site, k] : rates_) s += ";" + std::to_string(site.x) + "," + std::to_string(site.y) + "=" + format(k);
    return s;
  }

 private:
  static void check(double k) {
    if (!(k >= 0.0) || !std::isfinite(k)) throw std::invalid_argument("KillingField: rates must be finite and nonnegative");
  }
  static std::string format(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  double default_;
  std::map<Site, double> rates_;
};

/// Closed nearest-neighbour path x_0, ..., x_L with x_L = x_0 and L even, L >= 2.
class RootedLatticeLoop {
 public:
  RootedLatticeLoop() = default;

  /// Accepts the closed vertex list (first == last). Throws on any violation.
  explicit RootedLatticeLoop(std::vector<Site> closed_vertices) : v_(std::move(closed_vertices)) {
    if (v_.size() < 3) throw std::invalid_argument("RootedLatticeLoop: need at least two steps");
    if (v_.front() != v_.back()) throw std::invalid_argument("RootedLatticeLoop: first and last vertices differ");
    for (std::size_t i = 1; i < v_.size(); ++i)
      if (!adjacent(v_[i - 1], v_[i])) throw std::invalid_argument("RootedLatticeLoop: consecutive vertices are not neighbours");
  }

  /// Builds from the open cyclic tuple (x_0, ..., x_{L-1}); the closing vertex is appended.
  static RootedLatticeLoop from_cycle(std::span<const Site> cycle) {
    std::vector<Site> v(cycle.begin(), cycle.end());
    if (!v.empty()) v.push_back(v.front());
    return RootedLatticeLoop(std::move(v));
  }

  std::size_t length() const noexcept { return v_.empty() ? 0 : v_.size() - 1; }
  const std::vector<Site>& vertices() const noexcept { return v_; }
  const Site& root() const { return v_.front(); }
  std::span<const Site> cycle() const noexcept { return {v_.data(), length()}; }

  /// n(x, loop): visits among indices 0..L-1.
  std::size_t visit_count(const Site& s) const {
    return static_cast<std::size_t>(std::count(v_.begin(), v_.end() - 1, s));
  }

  RootedLatticeLoop shifted(std::size_t k) const {
    const std::size_t L = length();
    std::vector<Site> c(L);
    for (std::size_t i = 0; i < L; ++i) c[i] = v_[(i + k) % L];
    return from_cycle(c);
  }

  friend bool operator==(const RootedLatticeLoop&, const RootedLatticeLoop&) = default;

 private:
  std::vector<Site> v_;
};

/// Index of the lexicographically least rotation of a cyclic sequence.
template <class T>
std::size_t least_rotation(std::span<const T> s) {
  const std::size_t n = s.size();
  std::size_t i = 0, j = 1, k = 0;
  while (i < n && j < n && k < n) {
    const T& a = s[(i + k) % n];
    const T& b = s[(j + k) % n];
    if (a == b) {
      ++k;
      continue;
    }
    if (b < a)
      i += k + 1;
    else
      j += k + 1;
    if (i == j) ++j;
    k = 0;
  }
  return std::min(i, j);
}

/// Smallest p > 0 with s rotated by p equal to s (p divides n).
template <class T>
std::size_t rotation_period(std::span<const T> s) {
  const std::size_t n = s.size();
  if (n == 0) return 0;
  std::vector<std::size_t> fail(n, 0);
  for (std::size_t i = 1, k = 0; i < n; ++i) {
    while (k > 0 && !(s[i] == s[k])) k = fail[k - 1];
    if (s[i] == s[k]) ++k;
    fail[i] = k;
  }
  const std::size_t p = n - fail[n - 1];
  return n % p == 0 ? p : n;
}

/// Shift class of a rooted loop, stored as its least rotation.
class UnrootedLatticeLoop {
 public:
  UnrootedLatticeLoop() = default;

  explicit UnrootedLatticeLoop(const RootedLatticeLoop& any) {
    auto c = any.cycle();
    const std::size_t k = least_rotation(c);
    rep_ = any.shifted(k);
    period_ = rotation_period(rep_.cycle());
  }

  const RootedLatticeLoop& canonical_representative() const noexcept { return rep_; }
  std::size_t length() const noexcept { return rep_.length(); }
  std::size_t period() const noexcept { return period_; }
  /// Number of distinct rooted loops in the class; equals the period.
  std::size_t representative_count() const noexcept { return period_; }
  std::size_t visit_count(const Site& s) const { return rep_.visit_count(s); }

  /// Distinct sites touched, with their visit counts, in lexicographic order.
  std::vector<std::pair<Site, std::size_t>> visits() const {
    std::vector<Site> c(rep_.cycle().begin(), rep_.cycle().end());
    std::sort(c.begin(), c.end());
    std::vector<std::pair<Site, std::size_t>> out;
    for (std::size_t i = 0; i < c.size();) {
      std::size_t j = i;
      while (j < c.size() && c[j] == c[i]) ++j;
      out.emplace_back(c[i], j - i);
      i = j;
    }
    return out;
  }

  friend bool operator==(const UnrootedLatticeLoop& a, const UnrootedLatticeLoop& b) { return a.rep_ == b.rep_; }
  friend bool operator<(const UnrootedLatticeLoop& a, const UnrootedLatticeLoop& b) {
    if (a.length() != b.length()) return a.length() < b.length();
    return a.rep_.vertices() < b.rep_.vertices();
  }

 private:
  RootedLatticeLoop rep_;
  std::size_t period_ = 0;
};

/// |loop|^{-1} prod_i (k_{x_i}+4)^{-1} over i = 0..L-1, or 0 if a vertex leaves the domain.
inline double rooted_weight(const RootedLatticeLoop& loop, const KillingField& killing, const LatticeDomain& domain) {
  const auto c = loop.cycle();
  if (c.empty()) return 0.0;
  double w = 1.0;
  for (const Site& s : c) {
    if (!domain.contains(s)) return 0.0;
    w *= killing.step_probability(s);
  }
  return w / static_cast<double>(c.size());
}

inline double unrooted_weight(const UnrootedLatticeLoop& loop, const KillingField& killing, const LatticeDomain& domain) {
  return static_cast<double>(loop.representative_count()) * rooted_weight(loop.canonical_representative(), killing, domain);
}

/// Dense indexing of a finite domain's sites plus in-domain adjacency.
class SiteIndex {
 public:
  explicit SiteIndex(const LatticeDomain& domain) : sites_(domain.sites()) {
    if (sites_.empty()) throw std::invalid_argument("SiteIndex: empty domain");
    index_.reserve(sites_.size() * 2);
    for (std::size_t i = 0; i < sites_.size(); ++i) index_.emplace(sites_[i], static_cast<int>(i));
    neighbors_.resize(sites_.size());
    for (std::size_t i = 0; i < sites_.size(); ++i)
      for (const Site& d : kNeighborOffsets) {
        const int j = find({sites_[i].x + d.x, sites_[i].y + d.y});
        if (j >= 0) neighbors_[i].push_back(j);
      }
  }

  std::size_t size() const noexcept { return sites_.size(); }
  const std::vector<Site>& sites() const noexcept { return sites_; }
  const Site& site(std::size_t i) const { return sites_[i]; }
  int find(const Site& s) const {
    auto it = index_.find(s);
    return it == index_.end() ? -1 : it->second;
  }
  const std::vector<int>& neighbors(std::size_t i) const { return neighbors_[i]; }

 private:
  std::vector<Site> sites_;
  std::unordered_map<Site, int, SiteHash> index_;
  std::vector<std::vector<int>> neighbors_;
};

/// P_D: P(x,y) = 1/(k_x+4) for in-domain neighbours x ~ y.
inline Eigen::MatrixXd transition_matrix(const SiteIndex& idx, const KillingField& killing) {
  const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double p = killing.step_probability(idx.site(i));
    for (int j : idx.neighbors(i)) P(static_cast<Eigen::Index>(i), j) = p;
  }
  return P;
}

/// log det of a square matrix via partial-pivot LU; throws if det <= 0.
inline double log_det_positive(const Eigen::MatrixXd& A, const char* what) {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(A);
  const Eigen::MatrixXd& U = lu.matrixLU();
  double logdet = 0.0;
  int sign = lu.permutationP().determinant();
  for (Eigen::Index i = 0; i < U.rows(); ++i) {
    const double d = U(i, i);
    if (d == 0.0) throw std::domain_error(what);
    if (d < 0.0) sign = -sign;
    logdet += std::log(std::abs(d));
  }
  if (sign <= 0) throw std::domain_error(what);
  return logdet;
}

/// Sum of the unrooted loop measure over all loops in a finite domain: -log det(I - P_D).
inline double total_loop_mass(const LatticeDomain& domain, const KillingField& killing) {
  if (!domain.is_finite()) throw std::invalid_argument("total_loop_mass: domain must be finite");
  const SiteIndex idx(domain);
  const Eigen::MatrixXd P = transition_matrix(idx, killing);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(P.rows(), P.cols());
  return -log_det_positive(I - P, "non-transient walk");
}

/// Eigenvalues of the symmetrized walk D^{1/2} A D^{1/2}, D = diag(1/(k+4)).
/// tr(P^l) = sum_i e_i^l, which is all the truncated masses need.
class WalkSpectrum {
 public:
  WalkSpectrum(const LatticeDomain& domain, const KillingField& killing) {
    const SiteIndex idx(domain);
    const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n, n);
    std::vector<double> sq(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) sq[i] = std::sqrt(killing.step_probability(idx.site(i)));
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j : idx.neighbors(i)) S(static_cast<Eigen::Index>(i), j) = sq[i] * sq[static_cast<std::size_t>(j)];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    eig_.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
    for (double e : eig_) radius_ = std::max(radius_, std::abs(e));
    if (radius_ >= 1.0) throw std::domain_error("non-transient walk");
  }

  const std::vector<double>& eigenvalues() const noexcept { return eig_; }
  double spectral_radius() const noexcept { return radius_; }

  /// sum over loops of length <= max_length of the unrooted measure. Only even lengths exist.
  double truncated_mass(std::size_t max_length) const {
    double total = 0.0;
    for (double e : eig_) {
      const double e2 = e * e;
      double pw = 1.0;
      for (std::size_t l = 2; l <= max_length; l += 2) {
        pw *= e2;
        total += pw / static_cast<double>(l);
      }
    }
    return total;
  }

  /// Upper bound on the mass of loops longer than max_length:
  /// sum_i |e_i|^{L+1} / ((L+1)(1-|e_i|)).
  double tail_bound(std::size_t max_length) const {
    double b = 0.0;
    const double l1 = static_cast<double>(max_length + 1);
    for (double e : eig_) {
      const double a = std::abs(e);
      if (a == 0.0) continue;
      b += std::pow(a, l1) / (l1 * (1.0 - a));
    }
    return b;
  }

  /// Bound on the expected per-site visit time lost by truncation, used for
  /// occupation fields: sum_{l > L} rho^l = rho^{L+1}/(1-rho).
  double visit_tail_bound(std::size_t max_length) const {
    if (radius_ == 0.0) return 0.0;
    return std::pow(radius_, static_cast<double>(max_length + 1)) / (1.0 - radius_);
  }

  /// Smallest even L >= 2 with both tail bounds below `tol`.
  std::size_t max_length_for(double tol) const {
    std::size_t L = 2;
    while ((tail_bound(L) >= tol || visit_tail_bound(L) >= tol) && L < (1u << 20)) L += 2;
    return L;
  }

 private:
  std::vector<double> eig_;
  double radius_ = 0.0;
};

/// Brute-force enumeration of every rooted loop of length <= max_length inside
/// a finite domain (depth-first over nearest-neighbour paths). Exponential cost:
/// intended for small domains and short loops.
template <class Visitor>
void for_each_rooted_loop(const LatticeDomain& domain, std::size_t max_length, Visitor&& visit) {
  const SiteIndex idx(domain);
  std::vector<Site> path;
  path.reserve(max_length + 1);
  std::function<void(int, int)> dfs = [&](int root, int at) {
    const std::size_t steps = path.size() - 1;
    if (steps >= max_length) return;
    const Site& r0 = idx.site(static_cast<std::size_t>(root));
    for (int nb : idx.neighbors(static_cast<std::size_t>(at))) {
      const Site& s = idx.site(static_cast<std::size_t>(nb));
      if (static_cast<std::size_t>(std::abs(s.x - r0.x) + std::abs(s.y - r0.y)) > max_length - steps - 1) continue;
      path.push_back(s);
      if (nb == root && (steps + 1) % 2 == 0) visit(RootedLatticeLoop(path));
      dfs(root, nb);
      path.pop_back();
    }
  };
  for (std::size_t r = 0; r < idx.size(); ++r) {
    path.assign(1, idx.site(r));
    dfs(static_cast<int>(r), static_cast<int>(r));
  }
}

}  // namespace loopsoup
