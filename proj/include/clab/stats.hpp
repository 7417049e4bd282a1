// Exact hypergeometric tail test, one-sided paired t-test, quantile summaries.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clab/core.hpp"

namespace clab::stats {

enum class Alternative { less, greater };

inline std::string to_string(Alternative a) { return a == Alternative::less ? "less" : "greater"; }

struct HypergeomTest {
  std::int64_t population = 0;   // N
  std::int64_t successes = 0;    // K
  std::int64_t draws = 0;        // n
  std::int64_t k_observed = 0;
  double p_value = 1.0;          // P(X >= k)
};

struct PairedTTest {
  std::size_t n_pairs = 0;
  double mean_diff = 0.0;
  double t_stat = 0.0;
  double p_one_sided = 1.0;
  Alternative alternative = Alternative::less;
};

struct MedianIqr {
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

namespace detail {

inline double log_choose(std::int64_t n, std::int64_t k) {
  return std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(k + 1)) -
         std::lgamma(static_cast<double>(n - k + 1));
}

inline double hypergeom_log_pmf(std::int64_t N, std::int64_t K, std::int64_t n, std::int64_t k) {
  return log_choose(K, k) + log_choose(N - K, n - k) - log_choose(N, n);
}

// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) {
      break;
    }
  }
  return h;
}

inline double ibeta_reg(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                     b * std::log(1.0 - x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return bt * betacf(a, b, x) / a;
  }
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

// P(T <= t) for Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
  if (t == 0.0) return 0.5;
  const double z = ibeta_reg(df / 2.0, 0.5, df / (df + t * t));  // P(|T| >= |t|)
  return t > 0.0 ? 1.0 - 0.5 * z : 0.5 * z;
}

}  // namespace detail

// Exact upper tail P(X >= k) of Hypergeometric(N, K, n).
inline double hypergeom_sf(std::int64_t N, std::int64_t K, std::int64_t n, std::int64_t k) {
  require(N >= 0 && K >= 0 && n >= 0, "hypergeom_sf: negative parameter");
  require(K <= N && n <= N, "hypergeom_sf: K and n must not exceed N");
  const std::int64_t lo = std::max<std::int64_t>(0, n + K - N);
  const std::int64_t hi = std::min(n, K);
  require(k >= lo && k <= hi, "hypergeom_sf: k outside the support");
  if (k == lo) {
    return 1.0;
  }
  double p = 0.0;
  for (std::int64_t j = k; j <= hi; ++j) {
    p += std::exp(detail::hypergeom_log_pmf(N, K, n, j));
  }
  return std::clamp(p, 0.0, 1.0);
}

inline HypergeomTest hypergeom_test(std::int64_t N, std::int64_t K, std::int64_t n, std::int64_t k) {
  return HypergeomTest{N, K, n, k, hypergeom_sf(N, K, n, k)};
}

// One-sided paired t-test on d = x - y.
//
// Zero-variance differences: all-zero diffs are the exact null (t = 0, p = 0.5);
// a constant nonzero diff has an undefined statistic and raises instead of
// fabricating a p-value.
inline PairedTTest paired_t(std::span<const double> x, std::span<const double> y,
                            Alternative alternative) {
  require(x.size() == y.size(), "paired_t: length mismatch");
  require(x.size() >= 2, "paired_t: need at least 2 pairs");
  const std::size_t n = x.size();
  std::vector<double> d(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = x[i] - y[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : d) {
    ss += (v - mean) * (v - mean);
  }
  const double var = ss / static_cast<double>(n - 1);
  PairedTTest res;
  res.n_pairs = n;
  res.mean_diff = mean;
  res.alternative = alternative;
  if (var == 0.0) {
    if (mean == 0.0) {
      res.t_stat = 0.0;
      res.p_one_sided = 0.5;
      return res;
    }
    throw DegenerateStatisticError("paired_t: zero-variance nonzero differences");
  }
  const double se = std::sqrt(var / static_cast<double>(n));
  res.t_stat = mean / se;
  const double p_less = detail::student_t_cdf(res.t_stat, static_cast<double>(n - 1));
  res.p_one_sided = alternative == Alternative::less ? p_less : 1.0 - p_less;
  return res;
}

// Type-7 (linear interpolation) quantile of a sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  require(!sorted.empty(), "quantile_sorted: empty sample");
  if (sorted.size() == 1) {
    return sorted[0];
  }
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - std::floor(h);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline MedianIqr median_iqr(std::span<const double> samples) {
  require(!samples.empty(), "median_iqr: need at least 1 sample");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  return MedianIqr{quantile_sorted(s, 0.5), quantile_sorted(s, 0.25), quantile_sorted(s, 0.75)};
}

}  // namespace clab::stats
