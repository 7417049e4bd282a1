#include <cmath>
#include <vector>

#include "clab/numerics.hpp"
#include "clab/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using clab::Rng;
using clab::numerics::Matrix;
using clab::numerics::cosine_similarity;
using clab::numerics::kl_divergence;
using clab::numerics::svd_values;

namespace {

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (auto& v : m.data) {
    v = scale * rng.gaussian();
  }
  return m;
}

double frobenius_sq(const Matrix<double>& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("numerics");

TEST_CASE("svd: identity has unit singular values") {
  Matrix<double> m(3, 3);
  m.at(0, 0) = m.at(1, 1) = m.at(2, 2) = 1.0;
  const auto sv = svd_values(m);
  REQUIRE(sv.size() == 3);
  for (double v : sv) {
    CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("svd: diagonal matrix gives sorted absolute diagonal") {
  Matrix<double> m(2, 2);
  m.at(0, 0) = 3.0;
  m.at(1, 1) = 4.0;
  const auto sv = svd_values(m);
  CHECK(sv[0] == doctest::Approx(4.0));
  CHECK(sv[1] == doctest::Approx(3.0));
}

TEST_CASE("svd: matches Gram-matrix eigenvalue oracle on seeded 8x4") {
  Rng rng(42);
  const auto m = random_matrix(8, 4, rng);
  const auto sv = svd_values(m);
  const auto ref = oracles::gram_singular_values(m.data, 8, 4);
  REQUIRE(sv.size() == ref.size());
  for (std::size_t i = 0; i < sv.size(); ++i) {
    CHECK(sv[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  }
}

TEST_CASE("svd: wide matrices equal their transpose's values") {
  Rng rng(7);
  const auto m = random_matrix(4, 9, rng);
  Matrix<double> t(9, 4);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 9; ++c) {
      t.at(c, r) = m.at(r, c);
    }
  }
  const auto a = svd_values(m);
  const auto b = svd_values(t);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
  }
}

TEST_CASE("svd: invariant under row permutation and orthogonal rotation") {
  Rng rng(11);
  const std::size_t rows = 12, cols = 5;
  const auto m = random_matrix(rows, cols, rng);
  const auto base = svd_values(m);

  Matrix<double> perm(rows, cols);
  std::vector<std::size_t> order(rows);
  for (std::size_t i = 0; i < rows; ++i) order[i] = i;
  for (std::size_t i = rows - 1; i > 0; --i) {
    std::swap(order[i], order[rng.below(i + 1)]);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      perm.at(r, c) = m.at(order[r], c);
    }
  }
  const auto sv_perm = svd_values(perm);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(sv_perm[i] == doctest::Approx(base[i]).epsilon(1e-9));
  }

  const auto q = oracles::random_orthogonal(rows, rng);
  Matrix<double> rotated(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < rows; ++k) {
        s += q[r * rows + k] * m.at(k, c);
      }
      rotated.at(r, c) = s;
    }
  }
  const auto sv_rot = svd_values(rotated);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(sv_rot[i] == doctest::Approx(base[i]).epsilon(1e-6));
  }
}

TEST_CASE("svd: squared values sum to squared Frobenius norm") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 2 + rng.below(20);
    const std::size_t cols = 1 + rng.below(12);
    const auto m = random_matrix(rows, cols, rng, 0.7);
    const auto sv = svd_values(m);
    double s = 0.0;
    for (double v : sv) s += v * v;
    CHECK(s == doctest::Approx(frobenius_sq(m)).epsilon(1e-6));
  }
}

TEST_CASE("svd: non-finite input raises invalid-input") {
  Matrix<double> m(2, 2);
  m.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)svd_values(m), clab::InvalidInputError);
}

TEST_CASE("cosine: identity, antipodal, orthogonal cases") {
  const std::vector<double> v{1.0, -2.0, 0.5};
  std::vector<double> neg(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
  CHECK(cosine_similarity<double>(v, v) == doctest::Approx(1.0));
  CHECK(cosine_similarity<double>(v, neg) == doctest::Approx(-1.0));
  const std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0};
  CHECK(cosine_similarity<double>(e1, e2) == doctest::Approx(0.0));
}

TEST_CASE("cosine: scaling flips with the sign of the scalars") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = rng.gaussian();
    for (auto& v : b) v = rng.gaussian();
    const double alpha = rng.gaussian() * 3.0 + 0.01;
    const double beta = rng.gaussian() * 3.0 + 0.01;
    std::vector<double> sa(6), sb(6);
    for (std::size_t i = 0; i < 6; ++i) {
      sa[i] = alpha * a[i];
      sb[i] = beta * b[i];
    }
    const double base = cosine_similarity<double>(a, b);
    const double scaled = cosine_similarity<double>(sa, sb);
    const double sign = alpha * beta > 0 ? 1.0 : -1.0;
    CHECK(scaled == doctest::Approx(sign * base).epsilon(1e-9));
  }
}

TEST_CASE("cosine: zero vector raises degenerate-input") {
  const std::vector<double> z{0.0, 0.0}, v{1.0, 2.0};
  CHECK_THROWS_AS((void)cosine_similarity<double>(z, v), clab::DegenerateInputError);
}

TEST_CASE("kl: identical logits give exactly zero") {
  Rng rng(9);
  std::vector<double> logits(64);
  for (auto& v : logits) v = rng.gaussian() * 4.0;
  CHECK(kl_divergence<double>(logits, logits) <= 1e-12);
}

TEST_CASE("kl: one-hot teacher against uniform student is ln V") {
  std::vector<double> teacher{30.0, 0.0, 0.0, 0.0};
  std::vector<double> student{0.0, 0.0, 0.0, 0.0};
  CHECK(kl_divergence<double>(teacher, student) == doctest::Approx(std::log(4.0)).epsilon(1e-4));
}

TEST_CASE("kl: matches extended-precision summation oracle at V=256") {
  Rng rng(123);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<double> t(256), s(256);
    for (auto& v : t) v = rng.gaussian() * 3.0;
    for (auto& v : s) v = rng.gaussian() * 3.0;
    const double got = kl_divergence<double>(t, s);
    const double want = oracles::kl_direct(t, s);
    CHECK(got == doctest::Approx(want).epsilon(1e-8));
  }
}

TEST_CASE("kl: nonnegative, zero under constant logit shift") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> t(32), s(32);
    for (auto& v : t) v = rng.gaussian() * 2.0;
    for (auto& v : s) v = rng.gaussian() * 2.0;
    CHECK(kl_divergence<double>(t, s) >= 0.0);
    const double shift = rng.gaussian() * 10.0;
    std::vector<double> shifted(32);
    for (std::size_t i = 0; i < 32; ++i) shifted[i] = t[i] + shift;
    CHECK(kl_divergence<double>(t, shifted) <= 1e-10);
  }
}

TEST_CASE("kl: length mismatch raises invalid-input") {
  const std::vector<double> a{1.0, 2.0}, b{1.0, 2.0, 3.0};
  CHECK_THROWS_AS((void)kl_divergence<double>(a, b), clab::InvalidInputError);
}

TEST_SUITE_END();
