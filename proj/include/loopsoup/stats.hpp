#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

namespace loopsoup {

/// Neumaier-compensated accumulator. Addition order matters for bitwise results,
/// so callers feed values in replica-index order.
class CompensatedSum {
 public:
  void add(double v) noexcept {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> xs) {
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value();
}

struct SampleSummary {
  double mean = 0.0;
  double std_error = 0.0;
  double variance = 0.0;  // unbiased
  double min = 0.0;
  double max = 0.0;
  std::size_t count = 0;
};

/// Two-pass summary with compensated sums; the second pass removes the
/// cancellation that plagues the textbook sum-of-squares formula.
inline SampleSummary summarize(std::span<const double> xs) {
  SampleSummary s;
  s.count = xs.size();
  if (xs.empty()) return s;
  s.mean = compensated_sum(xs) / static_cast<double>(xs.size());
  CompensatedSum sq;
  for (double x : xs) {
    const double d = x - s.mean;
    sq.add(d * d);
  }
  s.variance = xs.size() > 1 ? sq.value() / static_cast<double>(xs.size() - 1) : 0.0;
  s.std_error = std::sqrt(s.variance / static_cast<double>(xs.size()));
  auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

inline double zscore(double estimate, double target, double std_error) {
  if (std_error == 0.0) return estimate == target ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), estimate - target);
  return (estimate - target) / std_error;
}

/// Mean of the product xy with its standard error: the covariance estimate
/// when both means are known to vanish.
struct ProductMoment {
  double mean = 0.0;
  double std_error = 0.0;
};

inline ProductMoment product_moment(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("product_moment: length mismatch");
  std::vector<double> p(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = x[i] * y[i];
  auto s = summarize(p);
  return {s.mean, s.std_error};
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
  double intercept_stderr = 0.0;
  double r_squared = 0.0;
  std::size_t points = 0;
};

/// Weighted least squares; weights are 1/sigma^2. With all-equal weights this
/// is ordinary least squares and the standard errors come from the residuals.
inline LinearFit fit_line(std::span<const double> x, std::span<const double> y, std::span<const double> sigma = {}) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) throw std::invalid_argument("fit_line: need at least two (x,y) pairs");
  const bool weighted = !sigma.empty();
  if (weighted && sigma.size() != n) throw std::invalid_argument("fit_line: sigma length mismatch");
  CompensatedSum sw, sx, sy;
  std::vector<double> w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (weighted) {
      if (!(sigma[i] > 0.0)) throw std::invalid_argument("fit_line: nonpositive sigma");
      w[i] = 1.0 / (sigma[i] * sigma[i]);
    }
    sw.add(w[i]);
    sx.add(w[i] * x[i]);
    sy.add(w[i] * y[i]);
  }
  const double xbar = sx.value() / sw.value();
  const double ybar = sy.value() / sw.value();
  CompensatedSum sxx, sxy, syy;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - xbar, dy = y[i] - ybar;
    sxx.add(w[i] * dx * dx);
    sxy.add(w[i] * dx * dy);
    syy.add(w[i] * dy * dy);
  }
  if (sxx.value() <= 0.0) throw std::invalid_argument("fit_line: degenerate abscissae");
  LinearFit f;
  f.points = n;
  f.slope = sxy.value() / sxx.value();
  f.intercept = ybar - f.slope * xbar;
  CompensatedSum rss;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - f.intercept - f.slope * x[i];
    rss.add(w[i] * r * r);
  }
  f.r_squared = syy.value() > 0.0 ? 1.0 - rss.value() / syy.value() : 1.0;
  if (weighted) {
    f.slope_stderr = std::sqrt(1.0 / sxx.value());
    f.intercept_stderr = std::sqrt(1.0 / sw.value() + xbar * xbar / sxx.value());
  } else if (n > 2) {
    const double s2 = rss.value() / static_cast<double>(n - 2);
    f.slope_stderr = std::sqrt(s2 / sxx.value());
    f.intercept_stderr = std::sqrt(s2 * (1.0 / static_cast<double>(n) + xbar * xbar / sxx.value()));
  }
  return f;
}

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Pearson goodness of fit. Cells with expected count below `min_expected` are
/// pooled into their neighbour (from the tail inwards) before the statistic is formed.
inline ChiSquareResult chi_square_gof(std::vector<double> observed, std::vector<double> expected, std::size_t fitted_params = 0,
                                      double min_expected = 5.0) {
  if (observed.size() != expected.size() || observed.empty()) throw std::invalid_argument("chi_square_gof: size mismatch");
  while (expected.size() > 1 && expected.back() < min_expected) {
    const double e = expected.back(), o = observed.back();
    expected.pop_back();
    observed.pop_back();
    expected.back() += e;
    observed.back() += o;
  }
  while (expected.size() > 1 && expected.front() < min_expected) {
    const double e = expected.front(), o = observed.front();
    expected.erase(expected.begin());
    observed.erase(observed.begin());
    expected.front() += e;
    observed.front() += o;
  }
  ChiSquareResult r;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double d = observed[i] - expected[i];
    r.statistic += d * d / expected[i];
  }
  if (expected.size() <= 1 + fitted_params) return r;
  r.dof = expected.size() - 1 - fitted_params;
  boost::math::chi_squared_distribution<double> chi(static_cast<double>(r.dof));
  r.p_value = boost::math::cdf(boost::math::complement(chi, r.statistic));
  return r;
}

/// Kolmogorov distribution survival function Q(t) = 2 sum (-1)^{j-1} exp(-2 j^2 t^2).
inline double kolmogorov_survival(double t) {
  if (t <= 0.0) return 1.0;
  if (t < 0.2) return 1.0;
  double s = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * t * t);
    s += (j % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

struct KsResult {
  double distance = 0.0;
  double p_value = 1.0;
};

/// Two-sample Kolmogorov-Smirnov distance with the asymptotic p-value.
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = na * nb / (na + nb);
  const double sq = std::sqrt(ne);
  return {d, kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d)};
}

/// One-sample KS distance against a continuous CDF.
template <class Cdf>
KsResult ks_one_sample(std::vector<double> a, Cdf&& cdf) {
  if (a.empty()) throw std::invalid_argument("ks_one_sample: empty sample");
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double f = cdf(a[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sq = std::sqrt(n);
  return {d, kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d)};
}

}  // namespace loopsoup
