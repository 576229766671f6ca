#include <gtest/gtest.h>

#include <cmath>

#include "loopsoup/engine.hpp"
#include "loopsoup/gff.hpp"

using namespace loopsoup;

namespace {

const LatticeDomain kSingle = LatticeDomain::grid(1, 1);
const LatticeDomain kPair = LatticeDomain::grid(2, 1);
const LatticeDomain kGrid3 = LatticeDomain::grid(3, 3);

std::vector<double> column(const std::vector<std::vector<double>>& rows, std::size_t j) {
  std::vector<double> c(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) c[i] = rows[i][j];
  return c;
}

// Occupation field samples of the lambda = 1/2 soup.
std::vector<std::vector<double>> occupation_samples(const LatticeDomain& d, const KillingField& k, std::uint64_t n,
                                                    std::uint64_t seed, std::size_t max_length) {
  const LatticeSoupSampler sampler(d, k, 0.5, max_length);
  auto idx = std::make_shared<const SiteIndex>(d);
  ExperimentPlan p{"occ", seed, n, 0, 0, {}};
  return run_indexed(p, [&](std::uint64_t, RngStream& rng) { return occupation_field(sampler.sample(rng), k, idx, rng).values; });
}

}  // namespace

TEST(PrecisionMatrix, SingleAndTwoSite) {
  auto a = precision_matrix(kSingle, KillingField(0.0));
  ASSERT_EQ(a.M.rows(), 1);
  EXPECT_EQ(a.M(0, 0), 4.0);
  auto b = precision_matrix(kPair, KillingField(0.0));
  Eigen::Matrix2d expect;
  expect << 4, -1, -1, 4;
  EXPECT_EQ(b.M, Eigen::MatrixXd(expect));
  EXPECT_THROW(precision_matrix(LatticeDomain::from_sites({}), KillingField(0.0)), std::invalid_argument);
}

TEST(PrecisionMatrix, SymmetricOnRandomDomains) {
  RngStream rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<Site> s;
    for (int x = 0; x < 5; ++x)
      for (int y = 0; y < 5; ++y)
        if (rng.uniform() < 0.6) s.push_back({x, y});
    if (s.empty()) continue;
    KillingField k(rng.uniform());
    auto pm = precision_matrix(LatticeDomain::from_sites(s), k);
    EXPECT_EQ(pm.M, pm.M.transpose());
  }
}

TEST(GreenFunction, KnownInverses) {
  auto g1 = green_function(precision_matrix(kSingle, KillingField(0.0)));
  EXPECT_NEAR(g1.G(0, 0), 0.25, 1e-15);
  auto g2 = green_function(precision_matrix(kPair, KillingField(0.0)));
  EXPECT_NEAR(g2.G(0, 0), 4.0 / 15.0, 1e-15);
  EXPECT_NEAR(g2.G(0, 1), 1.0 / 15.0, 1e-15);
  EXPECT_NEAR(g2({1, 0}, {1, 0}), 4.0 / 15.0, 1e-15);
}

TEST(GreenFunction, InverseSymmetricNonnegative) {
  KillingField k(0.3);
  k.set({1, 1}, 2.0);
  auto pm = precision_matrix(LatticeDomain::grid(4, 3), k);
  auto g = green_function(pm);
  EXPECT_LT((pm.M * g.G - Eigen::MatrixXd::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((g.G - g.G.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_GE(g.G.minCoeff(), 0.0);
  EXPECT_GT(g.G.diagonal().minCoeff(), 0.0);
}

TEST(GreenFunction, RejectsNonPositiveDefinite) {
  auto pm = precision_matrix(kPair, KillingField(0.0));
  pm.M(0, 0) = -1.0;
  EXPECT_THROW(green_function(pm), std::domain_error);
}

TEST(SampleGff, SingleSiteMomentsAndPairCovariance) {
  const auto g1 = green_function(precision_matrix(kSingle, KillingField(0.0)));
  const auto g2 = green_function(precision_matrix(kPair, KillingField(0.0)));
  const std::uint64_t n = 1000000;
  ExperimentPlan p{"gff", 12, n, 0, 0, {}};
  auto one = run_indexed(p, [&](std::uint64_t, RngStream& rng) { return sample_gff(g1, rng).values[0]; });
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) sq[i] = one[i] * one[i];
  const auto m = summarize(one), v = summarize(sq);
  EXPECT_LT(std::abs(zscore(m.mean, 0.0, m.std_error)), 3.0);
  EXPECT_LT(std::abs(zscore(v.mean, 0.25, v.std_error)), 3.0);
  auto two = run_indexed(p, [&](std::uint64_t, RngStream& rng) { return sample_gff(g2, rng).values; });
  const auto c = product_moment(column(two, 0), column(two, 1));
  EXPECT_LT(std::abs(zscore(c.mean, 1.0 / 15.0, c.std_error)), 3.0);
}

TEST(OccupationField, SingleSiteMeanAndPositivity) {
  auto rows = occupation_samples(kSingle, KillingField(0.0), 200000, 3, 2);
  auto c = column(rows, 0);
  for (double v : c) ASSERT_GT(v, 0.0);
  const auto s = summarize(c);
  EXPECT_LT(std::abs(zscore(s.mean, 0.125, s.std_error)), 3.0);
}

TEST(OccupationField, TwoSiteMeanIsHalfGreen) {
  const WalkSpectrum spec(kPair, KillingField(0.0));
  const std::size_t L = spec.max_length_for(1e-6);
  auto rows = occupation_samples(kPair, KillingField(0.0), 400000, 5, L);
  for (std::size_t x = 0; x < 2; ++x) {
    const auto s = summarize(column(rows, x));
    EXPECT_LT(std::abs(zscore(s.mean, 2.0 / 15.0, s.std_error)), 3.0);
  }
}

// E[L_x] = G(x,x)/2 on every domain of at most nine sites tried here.
TEST(OccupationField, MeanIdentityOnSmallDomains) {
  const std::vector<LatticeDomain> domains = {
      LatticeDomain::grid(3, 1), LatticeDomain::grid(2, 2), LatticeDomain::from_sites({{0, 0}, {1, 0}, {1, 1}, {2, 1}, {2, 2}}),
      kGrid3};
  std::uint64_t seed = 100;
  for (const auto& d : domains) {
    KillingField k(0.2);
    const auto g = green_function(precision_matrix(d, k));
    const WalkSpectrum spec(d, KillingField(0.0));
    const std::size_t L = spec.max_length_for(1e-5);
    auto rows = occupation_samples(d, k, 100000, seed++, L);
    for (std::size_t x = 0; x < g.sites->size(); ++x) {
      const auto s = summarize(column(rows, x));
      const double oracle = g.G(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(x)) / 2.0;
      EXPECT_LT(std::abs(s.mean - oracle), 3.0 * s.std_error + spec.visit_tail_bound(L)) << d.describe() << " site " << x;
    }
  }
}

TEST(IsomorphismCheck, SingleSiteMoments) {
  auto rep = isomorphism_check(kSingle, constant_mass(0.0), 200000, {.seed = 7});
  ASSERT_EQ(rep.first_moment.size(), 1u);
  EXPECT_DOUBLE_EQ(rep.first_moment[0].oracle, 0.125);
  EXPECT_DOUBLE_EQ(rep.second_moment[0].oracle, 3.0 / 64.0);
  EXPECT_LT(std::abs(rep.first_moment[0].zscore), 3.0);
  EXPECT_LT(std::abs(rep.second_moment[0].zscore), 3.0);
  EXPECT_FALSE(rep.low_replica_warning);
  EXPECT_GT(rep.ks_p_value[0], 1e-3);
}

TEST(IsomorphismCheck, LowReplicaWarning) {
  auto rep = isomorphism_check(kPair, constant_mass(0.0), 500, {.seed = 7, .with_ks = false});
  EXPECT_TRUE(rep.low_replica_warning);
}

TEST(IsomorphismCheck, TwoSiteWithMass) {
  auto rep = isomorphism_check(kPair, constant_mass(0.4), 200000, {.seed = 8});
  for (const auto& r : rep.first_moment) EXPECT_LT(std::abs(r.zscore), 3.0);
  for (const auto& r : rep.second_moment) EXPECT_LT(std::abs(r.zscore), 3.0);
  EXPECT_LT(rep.truncation_bound, 1e-4);
}

TEST(IsomorphismCheck, MeanDecreasesWithMass) {
  double prev = 1e9;
  for (double m : {0.0, 0.5, 1.0, 3.0}) {
    auto rep = isomorphism_check(kGrid3, constant_mass(m), 20000, {.seed = 9, .with_ks = false});
    const double centre = rep.first_moment[4].estimate;
    EXPECT_LT(centre, prev);
    prev = centre;
  }
}

TEST(Ising, SingleSiteIsUniform) {
  OccupationField L{std::make_shared<const SiteIndex>(kSingle), {0.7}};
  double plus = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    RngStream rng = derive_stream(1, i);
    plus += ising_sign_sampler(L, rng)[0] == 1;
  }
  EXPECT_LT(std::abs(plus / n - 0.5), 3.0 * std::sqrt(0.25 / n));
}

TEST(Ising, TwoSiteAgreementMatchesEnumeration) {
  OccupationField L{std::make_shared<const SiteIndex>(kPair), {1.0, 1.0}};
  // exponent 2 s_x s_y, enumerated over the four states
  const double target = 2 * std::exp(2.0) / (2 * std::exp(2.0) + 2 * std::exp(-2.0));
  const int n = 200000;
  double same = 0.0, plus_x = 0.0;
  for (int i = 0; i < n; ++i) {
    RngStream rng = derive_stream(2, i);
    auto s = ising_sign_sampler(L, rng, IsingMode::Exact);
    same += s[0] == s[1];
    plus_x += s[0] == 1;
  }
  EXPECT_LT(std::abs(same / n - target), 3.0 * std::sqrt(target * (1 - target) / n));
  EXPECT_LT(std::abs(plus_x / n - 0.5), 3.0 * std::sqrt(0.25 / n));
}

TEST(Ising, GlauberAgreesWithExact) {
  OccupationField L{std::make_shared<const SiteIndex>(kPair), {0.6, 0.9}};
  const int n = 40000;
  double exact = 0.0, glauber = 0.0;
  RngStream a(3), b(4);
  for (int i = 0; i < n; ++i) {
    auto s = ising_sign_sampler(L, a, IsingMode::Exact);
    exact += s[0] == s[1];
  }
  auto chain = glauber_chain(L, n, b);
  for (const auto& s : chain) glauber += s[0] == s[1];
  const double pe = exact / n, pg = glauber / n;
  // thinned samples are close to independent for two spins; use a conservative 2x variance
  EXPECT_LT(std::abs(pe - pg), 3.0 * std::sqrt(pe * (1 - pe) / n * 3.0));
}

TEST(Ising, ExactModeRefusesLargeDomains) {
  const auto big = LatticeDomain::grid(7, 3);
  OccupationField L{std::make_shared<const SiteIndex>(big), std::vector<double>(21, 0.1)};
  RngStream rng(1);
  EXPECT_THROW(ising_sign_sampler(L, rng, IsingMode::Exact), std::invalid_argument);
  EXPECT_EQ(ising_sign_sampler(L, rng).size(), 21u);
}

TEST(Ising, GlobalFlipSymmetry) {
  const auto d = LatticeDomain::grid(2, 2);
  OccupationField L{std::make_shared<const SiteIndex>(d), {0.3, 0.5, 0.2, 0.8}};
  std::map<std::vector<int>, double> freq;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    RngStream rng = derive_stream(5, i);
    freq[ising_sign_sampler(L, rng)] += 1;
  }
  for (const auto& [s, c] : freq) {
    std::vector<int> f = s;
    for (int& v : f) v = -v;
    const double c2 = freq.count(f) ? freq.at(f) : 0.0;
    EXPECT_LT(std::abs(c - c2), 3.0 * std::sqrt(c + c2) + 1.0);
  }
}

TEST(CoupledField, AlgebraAndErrors) {
  OccupationField L{std::make_shared<const SiteIndex>(kPair), {0.3, 1.7}};
  auto psi = coupled_field(L, {1, -1});
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(psi.values[i] * psi.values[i] / 2.0, L.values[i], 1e-15);
  EXPECT_LT(psi.values[1], 0.0);
  EXPECT_THROW(coupled_field(L, {1}), std::invalid_argument);
}

TEST(CoupledField, TwoSiteCovarianceMatchesGreen) {
  const WalkSpectrum spec(kPair, KillingField(0.0));
  const std::size_t Lmax = spec.max_length_for(1e-6);
  const LatticeSoupSampler sampler(kPair, KillingField(0.0), 0.5, Lmax);
  auto idx = std::make_shared<const SiteIndex>(kPair);
  ExperimentPlan p{"psi", 21, 1000000, 0, 0, {}};
  auto rows = run_indexed(p, [&](std::uint64_t, RngStream& rng) {
    auto L = occupation_field(sampler.sample(rng), KillingField(0.0), idx, rng);
    return coupled_field(L, ising_sign_sampler(L, rng, IsingMode::Exact)).values;
  });
  auto a = column(rows, 0), b = column(rows, 1);
  const auto c = product_moment(a, b);
  EXPECT_LT(std::abs(zscore(c.mean, 1.0 / 15.0, c.std_error)), 3.0);
  const auto v = product_moment(a, a);
  EXPECT_LT(std::abs(zscore(v.mean, 4.0 / 15.0, v.std_error)), 3.0);
  const auto m = summarize(a);
  EXPECT_LT(std::abs(zscore(m.mean, 0.0, m.std_error)), 3.0);
  std::vector<double> cube(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) cube[i] = a[i] * a[i] * b[i];
  const auto odd = summarize(cube);
  EXPECT_LT(std::abs(zscore(odd.mean, 0.0, odd.std_error)), 3.0);
}

TEST(CoupledField, GridCovarianceMatchesGreen) {
  const WalkSpectrum spec(kGrid3, KillingField(0.0));
  const std::size_t Lmax = spec.max_length_for(1e-5);
  const LatticeSoupSampler sampler(kGrid3, KillingField(0.0), 0.5, Lmax);
  const auto g = green_function(precision_matrix(kGrid3, KillingField(0.0)));
  ExperimentPlan p{"psi3", 22, 200000, 0, 0, {}};
  auto rows = run_indexed(p, [&](std::uint64_t, RngStream& rng) {
    auto L = occupation_field(sampler.sample(rng), KillingField(0.0), g.sites, rng);
    return coupled_field(L, ising_sign_sampler(L, rng)).values;
  });
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = i; j < 9; ++j) {
      const auto c = product_moment(column(rows, i), column(rows, j));
      EXPECT_LT(std::abs(zscore(c.mean, g.G(i, j), c.std_error)), 3.0) << i << "," << j;
    }
}

TEST(PartitionIdentity, SmallCases) {
  EXPECT_LT(partition_identity_check(kSingle, KillingField(0.0)), 1e-15);
  EXPECT_LT(partition_identity_check(kPair, KillingField(0.0)), 1e-10);
  // det M = 15 = 16 * (15/16)
  auto pm = precision_matrix(kPair, KillingField(0.0));
  EXPECT_NEAR(pm.M.determinant(), 15.0, 1e-12);
}

TEST(PartitionIdentity, RandomDomainsAndKilling) {
  RngStream rng(31);
  for (int t = 0; t < 25; ++t) {
    std::vector<Site> s;
    for (int x = 0; x < 4; ++x)
      for (int y = 0; y < 4; ++y)
        if (rng.uniform() < 0.7) s.push_back({x, y});
    if (s.empty()) s.push_back({0, 0});
    KillingField k(0.0);
    for (const Site& x : s) k.set(x, 3.0 * rng.uniform());
    EXPECT_LT(partition_identity_check(LatticeDomain::from_sites(s), k), 1e-8);
  }
}

TEST(BoundaryPerturbation, IdenticalDomainsGiveZero) {
  auto rep = boundary_perturbation_probability(kGrid3, kGrid3, {1, 1}, constant_mass(0.0), 2000, {.seed = 3});
  EXPECT_EQ(rep.probability, 0.0);
  EXPECT_EQ(rep.coupled_mismatch, 0.0);
  EXPECT_EQ(rep.reach_bound, 0.0);
}

TEST(BoundaryPerturbation, RejectsPointOutsideInnerDomain) {
  EXPECT_THROW(boundary_perturbation_probability(kGrid3, LatticeDomain::grid(2, 2), {2, 2}, constant_mass(0.0), 10),
               std::invalid_argument);
}

TEST(BoundaryPerturbation, MonotoneInRemovedRegion) {
  const auto D = LatticeDomain::grid(4, 4);
  const auto big = LatticeDomain::grid(3, 4);    // removes column x = 3
  const auto small = LatticeDomain::grid(2, 4);  // removes columns x = 2, 3
  BoundaryPerturbationOptions o{.seed = 44, .coupling = false};
  auto a = boundary_perturbation_probability(D, big, {1, 1}, constant_mass(0.0), 20000, o);
  auto b = boundary_perturbation_probability(D, small, {1, 1}, constant_mass(0.0), 20000, o);
  EXPECT_GT(a.probability, 0.0);
  EXPECT_GE(b.probability, a.probability);
}

TEST(BoundaryPerturbation, FarPointBoundedByTruncation) {
  const auto D = LatticeDomain::grid(9, 1);
  const auto Dp = LatticeDomain::grid(8, 1);
  BoundaryPerturbationOptions o{.seed = 5, .max_length = 6};
  auto rep = boundary_perturbation_probability(D, Dp, {0, 0}, constant_mass(0.0), 5000, o);
  EXPECT_LE(rep.probability, rep.reach_bound);
  EXPECT_LT(rep.reach_bound, 1.0);
}

TEST(BoundaryPerturbation, CouplingMarginalsAndMismatch) {
  const auto D = LatticeDomain::grid(3, 2);
  const auto Dp = LatticeDomain::grid(2, 2);
  auto rep = boundary_perturbation_probability(D, Dp, {1, 0}, constant_mass(0.3), 100000, {.seed = 61});
  EXPECT_GT(rep.probability, 0.0);
  // psi and psi' differ at x0 exactly when a removed loop visits it
  EXPECT_DOUBLE_EQ(rep.coupled_mismatch, rep.probability);
  for (const auto& r : rep.covariance_outer) EXPECT_LT(std::abs(r.zscore), 3.0) << r.site;
  for (const auto& r : rep.covariance_inner) EXPECT_LT(std::abs(r.zscore), 3.0) << r.site;
}

TEST(GffReport, CsvLayout) {
  std::ostringstream os;
  write_gff_report(os, {make_row("(0,0)", 0.125, 0.001, 0.125)});
  EXPECT_EQ(os.str().substr(0, 34), "site,estimate,oracle,stderr,zscore");
  EXPECT_NE(os.str().find("(0,0),0.125,0.125,0.001"), std::string::npos);
}
