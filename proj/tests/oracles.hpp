// Independent oracles used by the test suites.
//
// Everything here is deliberately written without reusing the library's
// computation paths: eigenvalues via two-sided Jacobi on the Gram matrix,
// KL via direct extended-precision summation, quantiles by sorting, the
// t-distribution by quadrature, and the paired test by sign-flip enumeration.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "clab/rng.hpp"

namespace oracles {

// Eigenvalues of a symmetric matrix by classical two-sided Jacobi.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = r + 1; c < n; ++c) {
        off += at(r, c) * at(r, c);
      }
    }
    if (off < 1e-26) {
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) {
          continue;
        }
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p);
          const double akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k);
          const double aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) {
    eig[i] = at(i, i);
  }
  std::sort(eig.begin(), eig.end(), std::greater<double>());
  return eig;
}

// Singular values via sqrt(eig(M^T M)), the Gram-matrix route.
inline std::vector<double> gram_singular_values(const std::vector<double>& m, std::size_t rows,
                                                std::size_t cols) {
  std::vector<double> gram(cols * cols, 0.0);
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        s += m[r * cols + i] * m[r * cols + j];
      }
      gram[i * cols + j] = s;
    }
  }
  std::vector<double> eig = symmetric_eigenvalues(std::move(gram), cols);
  std::vector<double> sv;
  sv.reserve(std::min(rows, cols));
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) {
    sv.push_back(std::sqrt(std::max(eig[i], 0.0)));
  }
  return sv;
}

// KL divergence by direct long-double summation of p_i (log p_i - log q_i).
inline double kl_direct(const std::vector<double>& teacher_logits,
                        const std::vector<double>& student_logits) {
  auto log_probs = [](const std::vector<double>& logits) {
    long double mx = logits[0];
    for (double v : logits) mx = std::max<long double>(mx, v);
    long double sum = 0.0L;
    for (double v : logits) sum += expl(static_cast<long double>(v) - mx);
    const long double lse = mx + logl(sum);
    std::vector<long double> lp(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) lp[i] = static_cast<long double>(logits[i]) - lse;
    return lp;
  };
  const auto lt = log_probs(teacher_logits);
  const auto ls = log_probs(student_logits);
  long double kl = 0.0L;
  for (std::size_t i = 0; i < lt.size(); ++i) {
    kl += expl(lt[i]) * (lt[i] - ls[i]);
  }
  return static_cast<double>(kl);
}

// Monte Carlo estimate of P(X >= k) for Hypergeometric(N, K, n) with a
// sequential urn draw; returns (estimate, standard error).
inline std::pair<double, double> hypergeom_sf_mc(std::int64_t N, std::int64_t K, std::int64_t n,
                                                 std::int64_t k, std::size_t trials,
                                                 std::uint64_t seed) {
  clab::Rng rng(seed);
  std::size_t hits = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::int64_t remaining = N;
    std::int64_t good = K;
    std::int64_t got = 0;
    for (std::int64_t d = 0; d < n; ++d) {
      if (rng.below(static_cast<std::uint64_t>(remaining)) < static_cast<std::uint64_t>(good)) {
        ++got;
        --good;
      }
      --remaining;
    }
    if (got >= k) {
      ++hits;
    }
  }
  const double p = static_cast<double>(hits) / static_cast<double>(trials);
  const double se = std::sqrt(std::max(p * (1.0 - p), 1e-12) / static_cast<double>(trials));
  return {p, se};
}

// Exact sign-flip permutation p-value for the paired test on d = x - y.
// Enumerates all 2^n sign assignments of the differences and counts the
// fraction whose t statistic is as or more extreme than the observed one.
inline double paired_permutation_p(const std::vector<double>& x, const std::vector<double>& y,
                                   bool alternative_less) {
  const std::size_t n = x.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
  auto t_of = [&](const std::vector<double>& v) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double e : v) ss += (e - mean) * (e - mean);
    const double var = ss / static_cast<double>(v.size() - 1);
    if (var == 0.0) {
      return mean == 0.0 ? 0.0 : (mean > 0.0 ? 1e300 : -1e300);
    }
    return mean / std::sqrt(var / static_cast<double>(v.size()));
  };
  const double t_obs = t_of(d);
  const std::uint64_t total = 1ULL << n;
  std::uint64_t extreme = 0;
  std::vector<double> flipped(n);
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    for (std::size_t i = 0; i < n; ++i) {
      flipped[i] = (mask >> i) & 1 ? -d[i] : d[i];
    }
    const double t = t_of(flipped);
    if (alternative_less ? t <= t_obs : t >= t_obs) {
      ++extreme;
    }
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

// P(T <= t) for Student's t by Simpson quadrature over the density.
inline double student_cdf_quadrature(double t, double df) {
  const double log_norm = std::lgamma((df + 1.0) / 2.0) - std::lgamma(df / 2.0) -
                          0.5 * std::log(df * 3.14159265358979323846);
  auto pdf = [&](double u) {
    return std::exp(log_norm - (df + 1.0) / 2.0 * std::log1p(u * u / df));
  };
  // Integrate from -60 (effectively -inf at these dfs) to t.
  const double lo = -60.0;
  if (t <= lo) return 0.0;
  const int steps = 20000;
  const double h = (t - lo) / steps;
  double sum = pdf(lo) + pdf(t);
  for (int i = 1; i < steps; ++i) {
    sum += pdf(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return sum * h / 3.0;
}

// Uniformly random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
inline std::vector<double> random_orthogonal(std::size_t n, clab::Rng& rng) {
  std::vector<double> q(n * n);
  for (auto& v : q) v = rng.gaussian();
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += q[r * n + c] * q[r * n + prev];
      for (std::size_t r = 0; r < n; ++r) q[r * n + c] -= dot * q[r * n + prev];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < n; ++r) norm += q[r * n + c] * q[r * n + c];
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < n; ++r) q[r * n + c] /= norm;
  }
  return q;
}

}  // namespace oracles
