#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "loopsoup/lattice.hpp"
#include "loopsoup/lattice_soup.hpp"
#include "loopsoup/stats.hpp"

using namespace loopsoup;

namespace {

RootedLatticeLoop loop_of(std::initializer_list<Site> closed) { return RootedLatticeLoop(std::vector<Site>(closed)); }

// Independent enumerator: every closed nearest-neighbour path of length
// <= max_len inside `inside`, rooted at each site, with plain recursion.
template <class F>
void brute_loops(const std::vector<Site>& sites, std::size_t max_len, F&& f) {
  std::set<Site> in(sites.begin(), sites.end());
  std::vector<Site> path;
  std::function<void()> rec = [&] {
    const std::size_t steps = path.size() - 1;
    if (steps > 0 && path.back() == path.front()) f(path);
    if (steps == max_len) return;
    const Site cur = path.back();
    for (Site d : {Site{1, 0}, Site{-1, 0}, Site{0, 1}, Site{0, -1}}) {
      Site nx{cur.x + d.x, cur.y + d.y};
      if (!in.count(nx)) continue;
      path.push_back(nx);
      rec();
      path.pop_back();
    }
  };
  for (const Site& s : sites) {
    path.assign(1, s);
    rec();
  }
}

double brute_mass(const std::vector<Site>& sites, std::size_t max_len, double k) {
  double total = 0.0;
  brute_loops(sites, max_len, [&](const std::vector<Site>& p) {
    const double L = static_cast<double>(p.size() - 1);
    total += std::pow(1.0 / (k + 4.0), L) / L;
  });
  return total;
}

}  // namespace

TEST(RootedWeight, TwoStepLoopCritical) {
  auto l = loop_of({{0, 0}, {1, 0}, {0, 0}});
  EXPECT_DOUBLE_EQ(rooted_weight(l, KillingField(0.0), LatticeDomain::plane()), 1.0 / 32.0);
}

TEST(RootedWeight, TwoStepLoopKilled) {
  auto l = loop_of({{0, 0}, {1, 0}, {0, 0}});
  EXPECT_DOUBLE_EQ(rooted_weight(l, KillingField(12.0), LatticeDomain::plane()), 1.0 / 512.0);
}

TEST(RootedWeight, OutsideDomainIsZero) {
  auto l = loop_of({{0, 0}, {1, 0}, {0, 0}});
  EXPECT_EQ(rooted_weight(l, KillingField(0.0), LatticeDomain::from_sites({{0, 0}})), 0.0);
}

TEST(RootedLoop, RejectsInvalidPaths) {
  EXPECT_THROW(loop_of({{0, 0}, {1, 1}, {0, 0}}), std::invalid_argument);
  EXPECT_THROW(loop_of({{0, 0}, {1, 0}, {1, 1}}), std::invalid_argument);
  EXPECT_THROW(loop_of({{0, 0}}), std::invalid_argument);
  auto l = loop_of({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}});
  EXPECT_EQ(l.length(), l.vertices().size() - 1);
}

TEST(UnrootedWeight, Plaquette) {
  UnrootedLatticeLoop u(loop_of({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}}));
  EXPECT_EQ(u.period(), 4u);
  EXPECT_DOUBLE_EQ(unrooted_weight(u, KillingField(0.0), LatticeDomain::plane()), 1.0 / 256.0);
}

TEST(UnrootedWeight, TwoStepHasPeriodTwo) {
  UnrootedLatticeLoop u(loop_of({{0, 0}, {1, 0}, {0, 0}}));
  EXPECT_EQ(u.representative_count(), 2u);
  EXPECT_DOUBLE_EQ(unrooted_weight(u, KillingField(0.0), LatticeDomain::plane()), 1.0 / 16.0);
}

TEST(UnrootedWeight, AlternatingLengthFourHasPeriodTwo) {
  UnrootedLatticeLoop u(loop_of({{0, 0}, {1, 0}, {0, 0}, {1, 0}, {0, 0}}));
  EXPECT_EQ(u.period(), 2u);
  EXPECT_EQ(u.length(), 4u);
  EXPECT_DOUBLE_EQ(unrooted_weight(u, KillingField(0.0), LatticeDomain::plane()), 1.0 / 512.0);
}

TEST(UnrootedLoop, CanonicalIsLeastRotationAndShiftInvariant) {
  auto l = loop_of({{2, 0}, {2, 1}, {1, 1}, {1, 0}, {0, 0}, {1, 0}, {2, 0}});
  UnrootedLatticeLoop u(l);
  std::vector<Site> best;
  for (std::size_t k = 0; k < l.length(); ++k) {
    auto s = l.shifted(k);
    if (best.empty() || s.vertices() < best) best = s.vertices();
    UnrootedLatticeLoop us(s);
    EXPECT_EQ(us, u);
    EXPECT_EQ(us.visit_count({1, 0}), 2u);
  }
  EXPECT_EQ(u.canonical_representative().vertices(), best);
}

TEST(UnrootedLoop, PeriodEqualsNumberOfDistinctShifts) {
  std::vector<RootedLatticeLoop> loops = {
      loop_of({{0, 0}, {1, 0}, {0, 0}, {1, 0}, {0, 0}, {1, 0}, {0, 0}}),
      loop_of({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}}),
      loop_of({{0, 0}, {1, 0}, {2, 0}, {1, 0}, {0, 0}}),
  };
  for (const auto& l : loops) {
    std::set<std::vector<Site>> distinct;
    for (std::size_t k = 0; k < l.length(); ++k) distinct.insert(l.shifted(k).vertices());
    EXPECT_EQ(UnrootedLatticeLoop(l).period(), distinct.size());
    EXPECT_EQ(l.length() % UnrootedLatticeLoop(l).period(), 0u);
  }
}

// Grouping all rooted loops by shift class reproduces the unrooted weight.
TEST(UnrootedWeight, BruteForceGroupingMatches) {
  const std::vector<Site> sites = {{0, 0}, {1, 0}, {2, 0}, {0, 1}, {1, 1}, {2, 1}};
  const auto domain = LatticeDomain::from_sites(sites);
  KillingField k(0.5);
  k.set({1, 1}, 3.0);
  std::map<std::vector<Site>, double> by_class;
  std::map<std::vector<Site>, UnrootedLatticeLoop> cls;
  brute_loops(sites, 10, [&](const std::vector<Site>& p) {
    RootedLatticeLoop r(p);
    UnrootedLatticeLoop u(r);
    by_class[u.canonical_representative().vertices()] += rooted_weight(r, k, domain);
    cls.emplace(u.canonical_representative().vertices(), u);
  });
  ASSERT_GT(by_class.size(), 100u);
  for (const auto& [key, w] : by_class) EXPECT_NEAR(w, unrooted_weight(cls.at(key), k, domain), 1e-15 + 1e-12 * w);
}

TEST(TotalLoopMass, SingleSite) {
  EXPECT_EQ(total_loop_mass(LatticeDomain::from_sites({{0, 0}}), KillingField(0.0)), 0.0);
}

TEST(TotalLoopMass, TwoSites) {
  const auto d = LatticeDomain::from_sites({{0, 0}, {1, 0}});
  EXPECT_NEAR(total_loop_mass(d, KillingField(0.0)), -std::log(15.0 / 16.0), 1e-14);
  EXPECT_NEAR(total_loop_mass(d, KillingField(12.0)), -std::log1p(-1.0 / 256.0), 1e-15);
  EXPECT_NEAR(-std::log(15.0 / 16.0), 0.06454, 5e-6);
}

TEST(TotalLoopMass, TwoSiteEnumerationToForty) {
  const std::vector<Site> sites = {{0, 0}, {1, 0}};
  const auto d = LatticeDomain::from_sites(sites);
  const WalkSpectrum spec(d, KillingField(0.0));
  const double truncated = brute_mass(sites, 40, 0.0);
  const double exact = total_loop_mass(d, KillingField(0.0));
  EXPECT_NEAR(truncated, spec.truncated_mass(40), 1e-15);
  // rounding of the two routes is a few ulps of the total
  const double slack = 8.0 * std::numeric_limits<double>::epsilon() * exact;
  EXPECT_LE(exact - truncated, spec.tail_bound(40) + slack);
  EXPECT_GE(exact - truncated, -slack);
}

// The determinant identity against enumeration on every small connected shape.
TEST(TotalLoopMass, DeterminantMatchesEnumerationWithinTail) {
  const std::vector<std::vector<Site>> shapes = {
      {{0, 0}, {1, 0}, {2, 0}},
      {{0, 0}, {1, 0}, {0, 1}, {1, 1}},
      {{0, 0}, {1, 0}, {2, 0}, {1, 1}, {1, 2}},
      {{0, 0}, {1, 0}, {2, 0}, {0, 1}, {1, 1}, {2, 1}},
  };
  for (double k : {0.0, 0.7}) {
    for (const auto& s : shapes) {
      const auto d = LatticeDomain::from_sites(s);
      const WalkSpectrum spec(d, KillingField(k));
      const double exact = total_loop_mass(d, KillingField(k));
      const double enumerated = brute_mass(s, 12, k);
      EXPECT_NEAR(enumerated, spec.truncated_mass(12), 1e-11 * enumerated);
      EXPECT_GE(exact - enumerated, -1e-11 * exact);
      EXPECT_LE(exact - enumerated, spec.tail_bound(12) + 1e-11 * exact);
    }
  }
}

TEST(TotalLoopMass, LibraryEnumeratorAgreesWithIndependentOne) {
  const std::vector<Site> s = {{0, 0}, {1, 0}, {0, 1}, {1, 1}, {2, 1}};
  const auto d = LatticeDomain::from_sites(s);
  double lib = 0.0;
  std::size_t n = 0;
  for_each_rooted_loop(d, 10, [&](const RootedLatticeLoop& l) {
    lib += rooted_weight(l, KillingField(0.0), d);
    ++n;
  });
  std::size_t m = 0;
  brute_loops(s, 10, [&](const std::vector<Site>&) { ++m; });
  EXPECT_EQ(n, m);
  EXPECT_NEAR(lib, brute_mass(s, 10, 0.0), 1e-15);
}

TEST(LoopCount, PmfAndPgf) {
  EXPECT_DOUBLE_EQ(loop_count_pgf(0.3, 2.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(loop_count_pmf(0.0, 1.0, 0), 1.0);
  EXPECT_NEAR(loop_count_pmf(1.0, 1.0, 1), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(loop_count_pmf(1.0, 1.0, 1), 0.36788, 5e-6);
  for (double mu : {0.01, 0.5, 3.0}) {
    EXPECT_NEAR(loop_count_pgf(mu, 1.0, 0.0), loop_count_pmf(mu, 1.0, 0), 1e-15);
    const double h = 1e-6;
    const double deriv = (loop_count_pgf(mu, 1.0, 1.0 + h) - loop_count_pgf(mu, 1.0, 1.0 - h)) / (2 * h);
    EXPECT_NEAR(deriv, mu, 1e-6);
    double s = 0.0;
    for (int l = 0; l < 60; ++l) s += loop_count_pmf(mu, 1.0, l);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(PoissonParameters, FirstTerm) {
  const auto p = poisson_parameters(1, 1.0);
  EXPECT_NEAR(p.q_tilde, 0.125, 1e-15);
  EXPECT_NEAR(p.q, (1.0 / (2 * std::numbers::pi)) * (64.0 / 65.0), 1e-15);
  EXPECT_NEAR(p.q, 0.156706, 1e-6);
  EXPECT_NEAR(p.gap, std::abs(p.q - p.q_tilde), 1e-15);
}

TEST(PoissonParameters, MatchesDirectFormulaForModerateN) {
  for (std::uint64_t n : {2u, 5u, 17u, 100u, 999u, 1001u, 5000u}) {
    const double nn = static_cast<double>(n);
    double c = 1.0;  // 4^{-n} C(2n, n) by the product formula
    for (std::uint64_t j = 1; j <= n; ++j) c *= (2.0 * j - 1.0) / (2.0 * j);
    const double qt = 0.7 / (2 * nn) * c * c;
    const double q = 0.7 / (2 * std::numbers::pi) / ((nn - 0.375) * (nn + 0.625));
    const auto p = poisson_parameters(n, 0.7);
    EXPECT_NEAR(p.q_tilde / qt, 1.0, 1e-11) << n;
    EXPECT_NEAR(p.q / q, 1.0, 1e-14) << n;
  }
}

TEST(PoissonParameters, GapIsOrderNToMinusFour) {
  std::vector<double> scaled;
  for (std::uint64_t n = 10; n <= 1000000; n *= 10)
    scaled.push_back(std::pow(static_cast<double>(n), 4) * poisson_parameters(n, 1.0).gap);
  for (std::size_t i = 0; i < scaled.size(); ++i) EXPECT_LT(scaled[i], 0.1);
  for (std::size_t i = 2; i < scaled.size(); ++i)
    EXPECT_LT(std::abs(scaled[i] - scaled[i - 1]), std::abs(scaled[i - 1] - scaled[i - 2]));
  EXPECT_NEAR(scaled.back(), 17.0 / (128.0 * std::numbers::pi), 1e-6);
}

TEST(SampleSoup, Errors) {
  RngStream rng(1);
  const auto d = LatticeDomain::grid(2, 1);
  EXPECT_THROW(sample_soup(d, KillingField(0.0), 1.0, 7, rng), std::invalid_argument);
  EXPECT_THROW(sample_soup(d, KillingField(0.0), 0.0, 8, rng), std::invalid_argument);
  EXPECT_THROW(sample_soup(d, KillingField(0.0), -1.0, 8, rng), std::invalid_argument);
  EXPECT_THROW(sample_soup(LatticeDomain::plane(), KillingField(0.0), 1.0, 8, rng), std::invalid_argument);
}

TEST(SampleSoup, SingleSiteAlwaysEmpty) {
  const LatticeSoupSampler s(LatticeDomain::grid(1, 1), KillingField(0.0), 3.0, 40);
  for (int i = 0; i < 1000; ++i) {
    RngStream rng(i);
    EXPECT_EQ(s.sample(rng).size(), 0u);
  }
}

TEST(SampleSoup, VanishingIntensityIsEmpty) {
  const LatticeSoupSampler s(LatticeDomain::grid(3, 3), KillingField(0.0), 1e-12, 20);
  std::size_t nonempty = 0;
  for (int i = 0; i < 1000; ++i) {
    RngStream rng(i);
    nonempty += s.sample(rng).size() > 0;
  }
  EXPECT_EQ(nonempty, 0u);
}

TEST(SampleSoup, LoopsAreValidAndInsideDomain) {
  const auto d = LatticeDomain::disk(0.0, 0.0, 2.5);
  const LatticeSoupSampler s(d, KillingField(0.0), 2.0, 30);
  RngStream rng(11);
  std::size_t seen = 0;
  for (int i = 0; i < 200; ++i) {
    auto soup = s.sample(rng);
    for (const auto& l : soup.loops) {
      ++seen;
      EXPECT_LE(l.length(), 30u);
      for (const Site& x : l.canonical_representative().vertices()) EXPECT_TRUE(d.contains(x));
    }
  }
  EXPECT_GT(seen, 100u);
}

TEST(SampleSoup, TwoSiteMeanCount) {
  const auto d = LatticeDomain::grid(2, 1);
  const LatticeSoupSampler s(d, KillingField(0.0), 1.0, 40);
  std::vector<double> counts;
  for (int i = 0; i < 100000; ++i) {
    RngStream rng = derive_stream(77, i);
    counts.push_back(static_cast<double>(s.sample(rng).size()));
  }
  const auto sum = summarize(counts);
  EXPECT_LT(std::abs(zscore(sum.mean, -std::log(15.0 / 16.0), sum.std_error)), 3.0);
}

// Count of the 2-step loop over replicas is Poisson(lambda * 1/16).
TEST(SampleSoup, TwoStepLoopCountIsPoisson) {
  const auto d = LatticeDomain::grid(3, 2);
  const double lambda = 4.0;
  const LatticeSoupSampler s(d, KillingField(0.0), lambda, 12);
  const UnrootedLatticeLoop target(loop_of({{0, 0}, {1, 0}, {0, 0}}));
  const double mean = lambda * unrooted_weight(target, KillingField(0.0), d);
  std::vector<double> obs(8, 0.0);
  const int R = 100000;
  for (int i = 0; i < R; ++i) {
    RngStream rng = derive_stream(5, i);
    const auto c = std::min<std::size_t>(s.sample(rng).count(target), obs.size() - 1);
    obs[c] += 1;
  }
  std::vector<double> expected(obs.size());
  double acc = 0.0;
  for (std::size_t l = 0; l + 1 < obs.size(); ++l) acc += expected[l] = R * loop_count_pmf(mean / lambda, lambda, l);
  expected.back() = R - acc;
  const auto chi = chi_square_gof(obs, expected);
  EXPECT_GT(chi.p_value, 0.01) << chi.statistic;
}

TEST(ThinToMassive, ZeroMassIsIdentityInfiniteEmpties) {
  const LatticeSoupSampler s(LatticeDomain::grid(3, 3), KillingField(0.0), 2.0, 16);
  RngStream rng(3);
  auto soup = s.sample(rng);
  ASSERT_GT(soup.size(), 0u);
  EXPECT_EQ(thin_to_massive(soup, constant_mass(0.0), rng).loops, soup.loops);
  EXPECT_EQ(thin_to_massive(soup, infinite_mass(), rng).size(), 0u);
  EXPECT_THROW(thin_to_massive(soup, [](const Site&) { return -1.0; }, rng), std::invalid_argument);
}

TEST(ThinToMassive, TwoStepSurvivalIsExpMinusTwo) {
  LatticeSoupRealization soup;
  soup.loops.emplace_back(loop_of({{0, 0}, {1, 0}, {0, 0}}));
  std::vector<double> survived;
  for (int i = 0; i < 100000; ++i) {
    RngStream rng = derive_stream(9, i);
    survived.push_back(static_cast<double>(thin_to_massive(soup, constant_mass(1.0), rng).size()));
  }
  const auto s = summarize(survived);
  EXPECT_LT(std::abs(zscore(s.mean, std::exp(-2.0), s.std_error)), 3.0);
}

// Thinning the critical soup and direct killed sampling give the same per-loop means.
TEST(ThinToMassive, MatchesDirectKilledSampling) {
  const auto d = LatticeDomain::grid(2, 1);
  const KillingField k(1.5);
  const LatticeSoupSampler thin(d, k, 3.0, 40, std::nullopt, KillingMethod::Thinning);
  const LatticeSoupSampler direct(d, k, 3.0, 40, std::nullopt, KillingMethod::Direct);
  const UnrootedLatticeLoop two(loop_of({{0, 0}, {1, 0}, {0, 0}}));
  const UnrootedLatticeLoop four(loop_of({{0, 0}, {1, 0}, {0, 0}, {1, 0}, {0, 0}}));
  std::vector<double> a2, b2, a4, b4, at, bt;
  for (int i = 0; i < 100000; ++i) {
    RngStream r1 = derive_stream(1, i), r2 = derive_stream(2, i);
    auto x = thin.sample(r1), y = direct.sample(r2);
    a2.push_back(x.count(two));
    b2.push_back(y.count(two));
    a4.push_back(x.count(four));
    b4.push_back(y.count(four));
    at.push_back(x.size());
    bt.push_back(y.size());
  }
  for (auto [a, b] : {std::pair{&a2, &b2}, std::pair{&a4, &b4}, std::pair{&at, &bt}}) {
    const auto sa = summarize(*a), sb = summarize(*b);
    EXPECT_LT(std::abs(sa.mean - sb.mean), 3.0 * std::hypot(sa.std_error, sb.std_error));
  }
  const auto sb = summarize(bt);
  EXPECT_LT(std::abs(zscore(sb.mean, 3.0 * total_loop_mass(d, k), sb.std_error)), 3.0);
}

TEST(Rescale, IdentityAndPlaquette) {
  LatticeSoupRealization soup;
  soup.loops.emplace_back(loop_of({{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}}));
  auto same = rescale(soup, 1);
  EXPECT_EQ(same.loops, soup.loops);
  EXPECT_DOUBLE_EQ(same.duration(0), 2.0);
  auto half = rescale(soup, 2);
  EXPECT_DOUBLE_EQ(half.duration(0), 0.5);
  const auto p = half.polyline(0);
  EXPECT_DOUBLE_EQ(p[2].real(), 0.5);
  EXPECT_DOUBLE_EQ(p[2].imag(), 0.5);
  EXPECT_THROW(rescale(soup, 0), std::invalid_argument);
}

TEST(Rescale, DiametersScaleExactly) {
  const LatticeSoupSampler s(LatticeDomain::grid(5, 5), KillingField(0.0), 2.0, 24);
  RngStream rng(21);
  auto soup = s.sample(rng);
  ASSERT_GT(soup.size(), 0u);
  auto diam = [](const std::vector<std::complex<double>>& v) {
    double d = 0.0;
    for (auto& a : v)
      for (auto& b : v) d = std::max(d, std::abs(a - b));
    return d;
  };
  const auto scaled = rescale(soup, 4);
  for (std::size_t i = 0; i < soup.size(); ++i) EXPECT_DOUBLE_EQ(diam(scaled.polyline(i)), diam(soup.polyline(i)) / 4.0);
}

TEST(PlaneSoup, RootMassAndUniformShortLoops) {
  const auto window = LatticeDomain::rectangle(0, 0, 0, 0);
  const LatticeSoupSampler s(LatticeDomain::plane(), KillingField(0.0), 1.0, 2, window);
  EXPECT_NEAR(s.expected_count(), 0.125, 1e-15);
  // all four 2-step loops at the origin appear equally often
  std::map<std::vector<Site>, double> freq;
  for (int i = 0; i < 40000; ++i) {
    RngStream rng = derive_stream(4, i);
    for (const auto& l : s.sample(rng).loops) freq[l.canonical_representative().vertices()] += 1;
  }
  ASSERT_EQ(freq.size(), 4u);
  double total = 0.0;
  for (auto& [k, v] : freq) total += v;
  std::vector<double> obs, exp;
  for (auto& [k, v] : freq) {
    obs.push_back(v);
    exp.push_back(total / 4.0);
  }
  EXPECT_GT(chi_square_gof(obs, exp).p_value, 0.01);
}

TEST(PlaneSoup, LengthFourCountMatchesRootMass) {
  const auto window = LatticeDomain::rectangle(0, 0, 0, 0);
  const LatticeSoupSampler s(LatticeDomain::plane(), KillingField(0.0), 200.0, 4, window);
  std::size_t fours = 0;
  for (int i = 0; i < 3000; ++i) {
    RngStream rng = derive_stream(6, i);
    for (const auto& l : s.sample(rng).loops) {
      if (l.length() != 4) continue;
      ++fours;
    }
  }
  const double total = static_cast<double>(fours);
  EXPECT_NEAR(total / 3000.0, 200.0 * poisson_parameters(2, 1.0).q_tilde, 5.0 * std::sqrt(total) / 3000.0);
}

TEST(Serialization, RoundTrip) {
  const LatticeSoupSampler s(LatticeDomain::grid(4, 3), KillingField(0.0), 3.0, 20);
  RngStream rng(8);
  auto soup = rescale(s.sample(rng, 8), 3);
  std::stringstream ss;
  write_lattice_soup(ss, soup);
  auto back = read_lattice_soup(ss);
  EXPECT_EQ(back.loops, soup.loops);
  EXPECT_EQ(back.scale, 3);
  EXPECT_EQ(back.seed, 8u);
  EXPECT_DOUBLE_EQ(back.lambda, 3.0);
  std::stringstream again;
  write_lattice_soup(again, back);
  std::stringstream first;
  write_lattice_soup(first, soup);
  EXPECT_EQ(again.str(), first.str());
}
