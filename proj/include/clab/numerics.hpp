// Dense matrix primitives, singular values, and distribution utilities.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "clab/core.hpp"

namespace clab::numerics {

template <typename Real>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, Real(0)) {}
  Matrix(std::size_t r, std::size_t c, std::vector<Real> d) : rows(r), cols(c), data(std::move(d)) {
    require(data.size() == rows * cols, "Matrix: data length must equal rows*cols");
  }

  Real& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

namespace detail {

// Hestenes one-sided Jacobi on the columns; robust for the short-and-wide or
// tall-and-skinny matrices this library deals with. Works in double throughout.
inline std::vector<double> jacobi_singular_values(std::vector<double> a, std::size_t rows,
                                                  std::size_t cols) {
  if (rows < cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        t[c * rows + r] = a[r * cols + c];
      }
    }
    a = std::move(t);
    std::swap(rows, cols);
  }

  constexpr double kTol = 1e-14;
  constexpr int kMaxSweeps = 64;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < cols; ++i) {
      for (std::size_t j = i + 1; j < cols; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const double x = a[r * cols + i];
          const double y = a[r * cols + j];
          alpha += x * x;
          beta += y * y;
          gamma += x * y;
        }
        if (gamma == 0.0 || std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) {
          continue;
        }
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < rows; ++r) {
          const double x = a[r * cols + i];
          const double y = a[r * cols + j];
          a[r * cols + i] = c * x - s * y;
          a[r * cols + j] = s * x + c * y;
        }
      }
    }
    if (!rotated) {
      break;
    }
  }

  std::vector<double> sv(cols, 0.0);
  for (std::size_t c = 0; c < cols; ++c) {
    double ss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double x = a[r * cols + c];
      ss += x * x;
    }
    sv[c] = std::sqrt(ss);
  }
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

}  // namespace detail

// Singular values of m, sorted descending; length min(rows, cols).
template <typename Real>
std::vector<Real> svd_values(const Matrix<Real>& m) {
  require(m.rows >= 1 && m.cols >= 1, "svd_values: matrix must be at least 1x1");
  require(m.data.size() == m.rows * m.cols, "svd_values: inconsistent data length");
  if (!all_finite(std::span<const Real>(m.data))) {
    throw InvalidInputError("svd_values: matrix has non-finite entries");
  }
  std::vector<double> a(m.data.begin(), m.data.end());
  std::vector<double> sv = detail::jacobi_singular_values(std::move(a), m.rows, m.cols);
  std::vector<Real> out(sv.size());
  for (std::size_t i = 0; i < sv.size(); ++i) {
    out[i] = static_cast<Real>(sv[i]);
  }
  return out;
}

template <typename Real>
double cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  require(!a.empty(), "cosine_similarity: empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) {
    throw DegenerateInputError("cosine_similarity: zero vector");
  }
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

// Max-subtracted log-softmax into `out` (double precision).
template <typename Real>
void log_softmax(std::span<const Real> logits, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) {
    mx = std::max(mx, static_cast<double>(v));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    sum += std::exp(static_cast<double>(logits[i]) - mx);
  }
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) - lse;
  }
}

template <typename Real>
std::vector<double> softmax(std::span<const Real> logits) {
  std::vector<double> lp(logits.size());
  log_softmax(logits, std::span<double>(lp));
  for (double& v : lp) {
    v = std::exp(v);
  }
  return lp;
}

// KL of the softmax-normalized teacher from the softmax-normalized student,
// accumulated in 64-bit regardless of the logit precision.
template <typename Real>
double kl_divergence(std::span<const Real> teacher, std::span<const Real> student) {
  require(teacher.size() == student.size(), "kl_divergence: length mismatch");
  require(!teacher.empty(), "kl_divergence: empty logit vectors");
  if (!all_finite(teacher) || !all_finite(student)) {
    throw InvalidInputError("kl_divergence: non-finite logits");
  }
  std::vector<double> lt(teacher.size()), ls(student.size());
  log_softmax(teacher, std::span<double>(lt));
  log_softmax(student, std::span<double>(ls));
  double kl = 0.0;
  for (std::size_t i = 0; i < lt.size(); ++i) {
    kl += std::exp(lt[i]) * (lt[i] - ls[i]);
  }
  return std::max(kl, 0.0);
}

}  // namespace clab::numerics
