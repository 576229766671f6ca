#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "engine.hpp"
#include "lattice.hpp"
#include "lattice_soup.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace loopsoup {

/// Values indexed by the site order of a SiteIndex.
struct SiteField {
  std::shared_ptr<const SiteIndex> sites;
  std::vector<double> values;

  double at(const Site& s) const {
    const int i = sites->find(s);
    if (i < 0) throw std::out_of_range("SiteField: site not in domain");
    return values[static_cast<std::size_t>(i)];
  }
  std::size_t size() const noexcept { return values.size(); }
};

using GaussianFieldSample = SiteField;
using OccupationField = SiteField;
using SignField = std::vector<int>;

/// Killing rates k_x = 4 (exp(m^2(x)) - 1) on the sites of a finite domain.
inline KillingField killing_from_mass(const LatticeDomain& domain, const LatticeMassSquared& m2) {
  KillingField k(0.0);
  for (const Site& s : domain.sites()) {
    const double v = m2(s);
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("killing_from_mass: m^2 must be finite and nonnegative");
    if (v > 0.0) k.set(s, 4.0 * std::expm1(v));
  }
  return k;
}

struct PrecisionMatrix {
  std::shared_ptr<const SiteIndex> sites;
  Eigen::MatrixXd M;
};

/// M_xx = k_x + 4, M_xy = -1 for in-domain neighbours. Exterior sites are dropped (phi = 0 there).
inline PrecisionMatrix precision_matrix(const LatticeDomain& domain, const KillingField& killing) {
  if (!domain.is_finite()) throw std::invalid_argument("precision_matrix: domain must be finite");
  auto sites = domain.sites();
  if (sites.empty()) throw std::invalid_argument("precision_matrix: empty domain");
  auto idx = std::make_shared<const SiteIndex>(domain);
  const auto n = static_cast<Eigen::Index>(idx->size());
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = killing.rate(idx->site(i)) + 4.0;
    for (int j : idx->neighbors(i)) M(static_cast<Eigen::Index>(i), j) = -1.0;
  }
  return {std::move(idx), std::move(M)};
}

/// G = M^{-1} together with the Cholesky factor of G used for sampling.
struct GreenFunction {
  std::shared_ptr<const SiteIndex> sites;
  Eigen::MatrixXd G;
  Eigen::MatrixXd factor;  // lower triangular, factor * factor^T = G

  double operator()(const Site& a, const Site& b) const {
    const int i = sites->find(a), j = sites->find(b);
    if (i < 0 || j < 0) throw std::out_of_range("GreenFunction: site not in domain");
    return G(i, j);
  }
};

inline GreenFunction green_function(const PrecisionMatrix& pm) {
  Eigen::LLT<Eigen::MatrixXd> llt(pm.M);
  if (llt.info() != Eigen::Success) throw std::domain_error("green_function: precision matrix is not positive definite");
  GreenFunction g;
  g.sites = pm.sites;
  g.G = llt.solve(Eigen::MatrixXd::Identity(pm.M.rows(), pm.M.cols()));
  g.G = 0.5 * (g.G + g.G.transpose());
  Eigen::LLT<Eigen::MatrixXd> f(g.G);
  if (f.info() != Eigen::Success) throw std::domain_error("green_function: covariance factorization failed");
  g.factor = f.matrixL();
  return g;
}

inline GaussianFieldSample sample_gff(const GreenFunction& g, RngStream& rng) {
  if (g.factor.rows() != g.G.rows() || g.G.rows() == 0) throw std::domain_error("sample_gff: missing covariance factor");
  Eigen::VectorXd z(g.G.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.gaussian();
  const Eigen::VectorXd phi = g.factor.triangularView<Eigen::Lower>() * z;
  return {g.sites, std::vector<double>(phi.data(), phi.data() + phi.size())};
}

/// Total visit counts sum_loops n(x, loop) per site. Loops touching a site
/// outside the index are rejected.
inline std::vector<double> visit_totals(const LatticeSoupRealization& soup, const SiteIndex& idx) {
  std::vector<double> n(idx.size(), 0.0);
  for (const auto& loop : soup.loops)
    for (const Site& s : loop.canonical_representative().cycle()) {
      const int i = idx.find(s);
      if (i < 0) throw std::invalid_argument("occupation_field: loop leaves the domain");
      n[static_cast<std::size_t>(i)] += 1.0;
    }
  return n;
}

/// L_x = sum over loops of T_x(loop) plus the extra half-charge term. Given the
/// visit counts the sum is Gamma(sum n(x) + 1/2, 1/(k_x + 4)), drawn in one go.
inline OccupationField occupation_field(const LatticeSoupRealization& soup, const KillingField& killing,
                                        std::shared_ptr<const SiteIndex> sites, RngStream& rng) {
  const auto n = visit_totals(soup, *sites);
  OccupationField L{sites, std::vector<double>(sites->size())};
  for (std::size_t i = 0; i < sites->size(); ++i) {
    const double scale = 1.0 / (killing.rate(sites->site(i)) + 4.0);
    double v = 0.0;
    while (!(v > 0.0)) v = rng.gamma(n[i] + 0.5, scale);
    L.values[i] = v;
  }
  return L;
}

enum class IsingMode { Auto, Exact, Glauber };

struct GlauberOptions {
  std::size_t burn_in_sweeps_per_site = 100;
  std::size_t thinning_sweeps = 10;
};

inline constexpr std::size_t kMaxExactIsingSites = 20;

namespace detail {

// Couplings J_xy = sqrt(L_x L_y) on unordered bonds; the exponent sums over
// ordered pairs, so each bond enters with weight 2 J.
struct IsingBonds {
  std::vector<std::vector<std::pair<int, double>>> adj;
};

inline IsingBonds ising_bonds(const OccupationField& L) {
  IsingBonds b;
  const auto& idx = *L.sites;
  b.adj.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j : idx.neighbors(i)) b.adj[i].emplace_back(j, std::sqrt(L.values[i] * L.values[static_cast<std::size_t>(j)]));
  return b;
}

inline SignField ising_exact(const OccupationField& L, RngStream& rng) {
  const std::size_t n = L.size();
  if (n > kMaxExactIsingSites) throw std::invalid_argument("ising_sign_sampler: exact mode supports at most 20 sites");
  const auto b = ising_bonds(L);
  const std::size_t states = std::size_t{1} << n;
  // Gray-code walk: flipping bit j changes the exponent by -2 s_j h_j, h_j = sum_k 2 J_jk s_k.
  std::vector<int> s(n, 1);
  std::vector<double> energy(states);
  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (auto [j, J] : b.adj[i]) e += J;  // all +1: ordered-pair sum
  std::vector<std::size_t> gray(states);
  std::size_t code = 0;
  energy[0] = e;
  gray[0] = 0;
  for (std::size_t t = 1; t < states; ++t) {
    const int j = std::countr_zero(t);
    double h = 0.0;
    for (auto [k, J] : b.adj[static_cast<std::size_t>(j)]) h += 2.0 * J * s[static_cast<std::size_t>(k)];
    e -= 2.0 * s[static_cast<std::size_t>(j)] * h;
    s[static_cast<std::size_t>(j)] = -s[static_cast<std::size_t>(j)];
    code ^= std::size_t{1} << j;
    energy[t] = e;
    gray[t] = code;
  }
  const double emax = *std::max_element(energy.begin(), energy.end());
  double total = 0.0;
  for (double& w : energy) total += (w = std::exp(w - emax));
  double u = rng.uniform() * total;
  std::size_t pick = states - 1;
  for (std::size_t t = 0; t < states; ++t) {
    u -= energy[t];
    if (u < 0.0) {
      pick = t;
      break;
    }
  }
  SignField out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (gray[pick] >> i) & 1u ? -1 : 1;
  return out;
}

inline void glauber_sweep(const IsingBonds& b, SignField& s, RngStream& rng) {
  for (std::size_t x = 0; x < s.size(); ++x) {
    double h = 0.0;
    for (auto [y, J] : b.adj[x]) h += 2.0 * J * s[static_cast<std::size_t>(y)];
    // P(s_x = +1 | rest) = e^{h} / (e^{h} + e^{-h})
    s[x] = rng.uniform() < 1.0 / (1.0 + std::exp(-2.0 * h)) ? 1 : -1;
  }
}

}  // namespace detail

/// Heat-bath chain; returns `count` samples spaced by the thinning interval after burn-in.
inline std::vector<SignField> glauber_chain(const OccupationField& L, std::size_t count, RngStream& rng,
                                            const GlauberOptions& opt = {}) {
  const auto b = detail::ising_bonds(L);
  SignField s(L.size());
  for (auto& v : s) v = rng.sign();
  const std::size_t burn = opt.burn_in_sweeps_per_site * std::max<std::size_t>(L.size(), 1);
  for (std::size_t i = 0; i < burn; ++i) detail::glauber_sweep(b, s, rng);
  std::vector<SignField> out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    if (c > 0)
      for (std::size_t i = 0; i < std::max<std::size_t>(opt.thinning_sweeps, 1); ++i) detail::glauber_sweep(b, s, rng);
    out.push_back(s);
  }
  return out;
}

/// Signs from Z^{-1} exp(sum over ordered neighbour pairs sqrt(L_x L_y) s_x s_y).
inline SignField ising_sign_sampler(const OccupationField& L, RngStream& rng, IsingMode mode = IsingMode::Auto,
                                    const GlauberOptions& opt = {}) {
  if (mode == IsingMode::Exact || (mode == IsingMode::Auto && L.size() <= kMaxExactIsingSites)) return detail::ising_exact(L, rng);
  return glauber_chain(L, 1, rng, opt).front();
}

/// psi_x = sqrt(2 L_x) S_x.
inline GaussianFieldSample coupled_field(const OccupationField& L, const SignField& signs) {
  if (signs.size() != L.size()) throw std::invalid_argument("coupled_field: sign and occupation site sets differ");
  GaussianFieldSample psi{L.sites, std::vector<double>(L.size())};
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (signs[i] != 1 && signs[i] != -1) throw std::invalid_argument("coupled_field: signs must be +-1");
    psi.values[i] = std::sqrt(2.0 * L.values[i]) * signs[i];
  }
  return psi;
}

/// |log det M - sum log(k_x+4) - log det(I - P)|, the two determinants taken by
/// independent factorizations (Cholesky of M, LU of I - P).
inline double partition_identity_check(const LatticeDomain& domain, const KillingField& killing) {
  const auto pm = precision_matrix(domain, killing);
  Eigen::LLT<Eigen::MatrixXd> llt(pm.M);
  if (llt.info() != Eigen::Success) throw std::domain_error("partition_identity_check: M is not positive definite");
  double logdet_m = 0.0;
  const Eigen::MatrixXd Lm = llt.matrixL();
  for (Eigen::Index i = 0; i < Lm.rows(); ++i) logdet_m += 2.0 * std::log(Lm(i, i));
  double sum_log_k = 0.0;
  for (const Site& s : pm.sites->sites()) sum_log_k += std::log(killing.rate(s) + 4.0);
  const Eigen::MatrixXd P = transition_matrix(*pm.sites, killing);
  const double logdet_ip =
      log_det_positive(Eigen::MatrixXd::Identity(P.rows(), P.cols()) - P, "partition_identity_check: non-transient walk");
  return std::abs(logdet_m - sum_log_k - logdet_ip);
}

struct GffReportRow {
  std::string site;
  double estimate = 0.0;
  double oracle = 0.0;
  double std_error = 0.0;
  double zscore = 0.0;
};

inline std::string site_label(const Site& s) { return "(" + std::to_string(s.x) + "," + std::to_string(s.y) + ")"; }

inline GffReportRow make_row(std::string label, double est, double se, double oracle) {
  return {std::move(label), est, oracle, se, loopsoup::zscore(est, oracle, se)};
}

inline void write_gff_report(std::ostream& os, const std::vector<GffReportRow>& rows) {
  os << "site,estimate,oracle,stderr,zscore\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", r.site.c_str(), r.estimate, r.oracle, r.std_error, r.zscore);
    os << buf;
  }
}

struct IsomorphismReport {
  std::vector<GffReportRow> first_moment;   // E[L_x] vs G(x,x)/2
  std::vector<GffReportRow> second_moment;  // E[L_x^2] vs (3/4) G(x,x)^2
  std::vector<double> ks_distance;          // L_x against an independent sample of phi_x^2/2
  std::vector<double> ks_p_value;
  std::uint64_t replicas = 0;
  std::size_t max_length = 0;
  double truncation_bound = 0.0;  // loop mass beyond max_length
  double visit_truncation_bound = 0.0;
  bool low_replica_warning = false;

  double max_abs_z() const {
    double z = 0.0;
    for (const auto& r : first_moment) z = std::max(z, std::abs(r.zscore));
    for (const auto& r : second_moment) z = std::max(z, std::abs(r.zscore));
    return z;
  }
};

struct IsomorphismOptions {
  std::uint64_t seed = 1;
  unsigned workers = 0;
  double tail_tolerance = 1e-5;
  bool with_ks = true;
};

/// Occupation field of the lambda = 1/2 soup against phi^2/2 for the GFF with
/// matching killing. The soup is sampled critical and thinned with m.
inline IsomorphismReport isomorphism_check(const LatticeDomain& domain, const LatticeMassSquared& m2, std::uint64_t replicas,
                                           const IsomorphismOptions& opt = {}) {
  const KillingField killing = killing_from_mass(domain, m2);
  const auto green = green_function(precision_matrix(domain, killing));
  const WalkSpectrum critical(domain, KillingField(0.0));
  IsomorphismReport rep;
  rep.replicas = replicas;
  rep.low_replica_warning = replicas < 1000;
  rep.max_length = critical.max_length_for(opt.tail_tolerance);
  rep.truncation_bound = critical.tail_bound(rep.max_length);
  rep.visit_truncation_bound = critical.visit_tail_bound(rep.max_length);
  const LatticeSoupSampler sampler(domain, killing, 0.5, rep.max_length);
  const auto sites = green.sites;
  const std::size_t ns = sites->size();

  ExperimentPlan plan{"isomorphism", opt.seed, replicas, 0, opt.workers, {}};
  const auto rows = run_indexed(plan, [&](std::uint64_t, RngStream& rng) {
    const auto soup = sampler.sample(rng);
    return occupation_field(soup, killing, sites, rng).values;
  });
  std::vector<double> col(replicas), sq(replicas);
  for (std::size_t x = 0; x < ns; ++x) {
    for (std::size_t r = 0; r < replicas; ++r) {
      col[r] = rows[r][x];
      sq[r] = col[r] * col[r];
    }
    const double gxx = green.G(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(x));
    const auto s1 = summarize(col), s2 = summarize(sq);
    const std::string label = site_label(sites->site(x));
    rep.first_moment.push_back(make_row(label, s1.mean, s1.std_error, gxx / 2.0));
    rep.second_moment.push_back(make_row(label, s2.mean, s2.std_error, 0.75 * gxx * gxx));
  }
  if (opt.with_ks) {
    ExperimentPlan gplan{"isomorphism-gff", opt.seed ^ 0x5DEECE66Dull, replicas, 0, opt.workers, {}};
    const auto phis = run_indexed(gplan, [&](std::uint64_t, RngStream& rng) { return sample_gff(green, rng).values; });
    std::vector<double> other(replicas);
    for (std::size_t x = 0; x < ns; ++x) {
      for (std::size_t r = 0; r < replicas; ++r) {
        col[r] = rows[r][x];
        other[r] = 0.5 * phis[r][x] * phis[r][x];
      }
      const auto ks = ks_two_sample(col, other);
      rep.ks_distance.push_back(ks.distance);
      rep.ks_p_value.push_back(ks.p_value);
    }
  }
  return rep;
}

struct BoundaryPerturbationReport {
  double probability = 0.0;  // P(some loop through x0 meets D \ D')
  double std_error = 0.0;
  double coupled_mismatch = 0.0;  // fraction of replicas with psi_{x0} != psi'_{x0}
  std::vector<GffReportRow> covariance_outer;  // E[psi_x psi_y] vs G_D
  std::vector<GffReportRow> covariance_inner;  // E[psi'_x psi'_y] vs G_D'
  std::uint64_t replicas = 0;
  std::size_t max_length = 0;
  double truncation_bound = 0.0;
  /// Upper bound on the probability when dist(x0, D \ D') exceeds max_length/2, else 1.
  double reach_bound = 1.0;

  double max_abs_covariance_z() const {
    double z = 0.0;
    for (const auto& r : covariance_outer) z = std::max(z, std::abs(r.zscore));
    for (const auto& r : covariance_inner) z = std::max(z, std::abs(r.zscore));
    return z;
  }
};

struct BoundaryPerturbationOptions {
  std::uint64_t seed = 1;
  unsigned workers = 0;
  std::size_t max_length = 0;  // 0: chosen from the spectrum
  double tail_tolerance = 1e-5;
  bool coupling = true;
};

/// Estimates the probability that a loop through x0 of the lambda = 1/2 soup in D
/// touches D \ D', and runs the two-field coupling: loops that leave D' feed
/// only the D-field, shared exponential clocks feed both, and the D'-signs are
/// globally flipped to agree with the D-field at x0 when no removed loop visits it.
inline BoundaryPerturbationReport boundary_perturbation_probability(const LatticeDomain& D, const LatticeDomain& Dp, const Site& x0,
                                                                    const LatticeMassSquared& m2, std::uint64_t replicas,
                                                                    const BoundaryPerturbationOptions& opt = {}) {
  if (!Dp.contains(x0)) throw std::invalid_argument("boundary_perturbation_probability: x0 must lie in D'");
  const auto inner_sites = Dp.sites();
  for (const Site& s : inner_sites)
    if (!D.contains(s)) throw std::invalid_argument("boundary_perturbation_probability: D' must be a subset of D");
  const KillingField killing = killing_from_mass(D, m2);
  const auto g_outer = green_function(precision_matrix(D, killing));
  const auto g_inner = green_function(precision_matrix(Dp, killing));
  const WalkSpectrum critical(D, KillingField(0.0));

  BoundaryPerturbationReport rep;
  rep.replicas = replicas;
  rep.max_length = opt.max_length ? opt.max_length : critical.max_length_for(opt.tail_tolerance);
  rep.truncation_bound = critical.tail_bound(rep.max_length);
  int dist = std::numeric_limits<int>::max();
  for (const Site& s : D.sites())
    if (!Dp.contains(s)) dist = std::min(dist, std::abs(s.x - x0.x) + std::abs(s.y - x0.y));
  if (dist == std::numeric_limits<int>::max())
    rep.reach_bound = 0.0;
  else if (static_cast<std::size_t>(dist) > rep.max_length / 2)
    rep.reach_bound = rep.truncation_bound;

  const LatticeSoupSampler sampler(D, killing, 0.5, rep.max_length);
  const auto outer = g_outer.sites;
  const auto inner = g_inner.sites;
  const int x0_outer = outer->find(x0), x0_inner = inner->find(x0);

  struct Out {
    double event;
    double mismatch;
    std::vector<double> psi, psi_inner;
  };
  ExperimentPlan plan{"boundary-perturbation", opt.seed, replicas, 0, opt.workers, {}};
  const auto results = run_indexed(plan, [&](std::uint64_t, RngStream& rng) {
    const auto soup = sampler.sample(rng);
    Out o{0.0, 0.0, {}, {}};
    LatticeSoupRealization kept = soup, removed = soup;
    kept.loops.clear();
    removed.loops.clear();
    for (const auto& loop : soup.loops) {
      const auto cyc = loop.canonical_representative().cycle();
      const bool leaves = std::any_of(cyc.begin(), cyc.end(), [&](const Site& s) { return !Dp.contains(s); });
      (leaves ? removed : kept).loops.push_back(loop);
      if (leaves && loop.visit_count(x0) > 0) o.event = 1.0;
    }
    if (!opt.coupling) return o;
    const auto n_kept = visit_totals(kept, *outer);
    const auto n_removed = visit_totals(removed, *outer);
    OccupationField L_outer{outer, std::vector<double>(outer->size())};
    OccupationField L_inner{inner, std::vector<double>(inner->size())};
    for (std::size_t i = 0; i < outer->size(); ++i) {
      const Site& s = outer->site(i);
      const double scale = 1.0 / (killing.rate(s) + 4.0);
      double shared = 0.0;
      while (!(shared > 0.0)) shared = rng.gamma(n_kept[i] + 0.5, scale);
      const double extra = n_removed[i] > 0 ? rng.gamma(n_removed[i], scale) : 0.0;
      L_outer.values[i] = shared + extra;
      const int j = inner->find(s);
      if (j >= 0) L_inner.values[static_cast<std::size_t>(j)] = shared;
    }
    const auto S = ising_sign_sampler(L_outer, rng);
    auto Sp = ising_sign_sampler(L_inner, rng);
    if (o.event == 0.0 && Sp[static_cast<std::size_t>(x0_inner)] != S[static_cast<std::size_t>(x0_outer)])
      for (int& v : Sp) v = -v;
    o.psi = coupled_field(L_outer, S).values;
    o.psi_inner = coupled_field(L_inner, Sp).values;
    o.mismatch = o.psi[static_cast<std::size_t>(x0_outer)] != o.psi_inner[static_cast<std::size_t>(x0_inner)] ? 1.0 : 0.0;
    return o;
  });
  std::vector<double> ev(replicas), mm(replicas);
  for (std::size_t r = 0; r < replicas; ++r) {
    ev[r] = results[r].event;
    mm[r] = results[r].mismatch;
  }
  const auto se = summarize(ev);
  rep.probability = se.mean;
  rep.std_error = se.std_error;
  if (opt.coupling) {
    rep.coupled_mismatch = summarize(mm).mean;
    auto cov_rows = [&](const GreenFunction& g, bool use_inner, std::vector<GffReportRow>& dst) {
      const auto& idx = *g.sites;
      std::vector<double> a(replicas), b(replicas);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = i; j < idx.size(); ++j) {
          for (std::size_t r = 0; r < replicas; ++r) {
            const auto& v = use_inner ? results[r].psi_inner : results[r].psi;
            a[r] = v[i];
            b[r] = v[j];
          }
          const auto pm = product_moment(a, b);
          dst.push_back(make_row(site_label(idx.site(i)) + "-" + site_label(idx.site(j)), pm.mean, pm.std_error,
                                 g.G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        }
    };
    cov_rows(g_outer, false, rep.covariance_outer);
    cov_rows(g_inner, true, rep.covariance_inner);
  }
  return rep;
}

}  // namespace loopsoup
