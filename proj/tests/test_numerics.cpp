#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dmaudit/numerics.hpp"
#include "dmaudit/rng.hpp"

using namespace dmaudit;

TEST_CASE("softmax: uniform on equal inputs") {
  const std::vector<double> v = {0.0, 0.0, 0.0};
  const auto s = softmax(v);
  for (double x : s) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax matches direct exp/sum oracle") {
  const std::vector<double> v = {1.0, 2.0, 3.0};
  double z = 0.0;
  for (double x : v) z += std::exp(x);
  const auto s = softmax(v);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(s[i] == doctest::Approx(std::exp(v[i]) / z).epsilon(1e-13));
}

TEST_CASE("softmax: shift invariance and normalization over random inputs") {
  Rng rng(1234);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 16));
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-8.0, 8.0);
    const auto s = softmax(v);
    double sum = 0.0;
    for (double x : s) {
      CHECK(x > 0.0);
      CHECK(x < 1.0 + 1e-15);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    const double shift = rng.uniform(-1e3, 1e3);
    std::vector<double> w(v);
    for (double& x : w) x += shift;
    const auto s2 = softmax(w);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(s[i] - s2[i]) <= 1e-12);
  }
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_AS(softmax(std::vector<double>{}), ArgumentError);
  CHECK_THROWS_AS(softmax(std::vector<double>{1.0, std::nan("")}), ArgumentError);
}

TEST_CASE("softmax_jacobian: one-hot input gives the zero matrix") {
  const auto j = softmax_jacobian(std::vector<double>{1.0, 0.0});
  CHECK(j.max_abs() == 0.0);
}

TEST_CASE("softmax_jacobian rows sum to zero and matrix is symmetric") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 16));
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-4.0, 4.0);
    const auto s = softmax(v);
    const Matrix j = softmax_jacobian(s);
    for (std::size_t r = 0; r < n; ++r) {
      double rowsum = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        rowsum += j(r, c);
        CHECK(j(r, c) == doctest::Approx(j(c, r)).epsilon(1e-14));
      }
      CHECK(std::abs(rowsum) <= 1e-12);
    }
  }
}

TEST_CASE("softmax_jacobian matches finite differences of softmax") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 16));
    Matrix x(1, n);
    for (double& v : x.raw()) v = rng.uniform(-3.0, 3.0);
    const auto s = softmax(x.raw());
    const Matrix analytic = softmax_jacobian(s);

    Matrix numeric(n, n);
    for (std::size_t out = 0; out < n; ++out) {
      auto f = [&](const Matrix& probe) { return softmax(probe.raw())[out]; };
      const Matrix g = finite_diff_grad(f, x, 1e-5);
      for (std::size_t c = 0; c < n; ++c) numeric(out, c) = g(0, c);
    }
    const GradCheckReport rep = grad_check(analytic, numeric);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_CASE("softmax_jacobian rejects non-normalized input") {
  CHECK_THROWS_AS(softmax_jacobian(std::vector<double>{0.7, 0.7}), ArgumentError);
}

TEST_CASE("layer_norm: constant input maps to shift") {
  const std::vector<double> x(5, 3.25), scale(5, 1.0), shift(5, 0.0);
  const auto y = layer_norm(x, scale, shift, 1e-5);
  for (double v : y) CHECK(v == 0.0);
}

TEST_CASE("layer_norm: normalization identity for non-constant input") {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 32));
    std::vector<double> x(n), scale(n, 1.0), shift(n, 0.0);
    for (double& v : x) v = rng.uniform(-5.0, 5.0);
    const auto y = layer_norm(x, scale, shift, 1e-12);
    double mu = 0.0;
    for (double v : y) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : y) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    CHECK(std::abs(mu) <= 1e-10);
    CHECK(std::abs(var - 1.0) <= 1e-8);
  }
}

TEST_CASE("layer_norm hand-computed example") {
  const std::vector<double> x = {1.0, 2.0, 3.0, 4.0}, scale(4, 1.0), shift(4, 0.0);
  const auto y = layer_norm(x, scale, shift, 0.0);
  const double inv = 1.0 / std::sqrt(1.25);
  CHECK(y[0] == doctest::Approx(-1.5 * inv).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(-0.5 * inv).epsilon(1e-14));
  CHECK(y[2] == doctest::Approx(0.5 * inv).epsilon(1e-14));
  CHECK(y[3] == doctest::Approx(1.5 * inv).epsilon(1e-14));
}

TEST_CASE("layer_norm rejects length mismatch") {
  CHECK_THROWS_AS(layer_norm(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0},
                             std::vector<double>{0.0, 0.0}, 1e-5),
                  ArgumentError);
}

TEST_CASE("mse basics and loop oracle") {
  Matrix a(1, 1, {1.0});
  Matrix b(1, 1, {3.0});
  CHECK(mse(a, a) == 0.0);
  CHECK(mse(a, b) == doctest::Approx(4.0));
  CHECK(mse(a, b) == mse(b, a));

  Rng rng(5);
  Matrix x(4, 6), y(4, 6);
  for (double& v : x.raw()) v = rng.normal();
  for (double& v : y.raw()) v = rng.normal();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.raw()[i] - y.raw()[i];
    acc += d * d;
  }
  CHECK(mse(x, y) == doctest::Approx(acc / 24.0).epsilon(1e-14));
  CHECK(mse(x, y) >= 0.0);

  Matrix c(2, 2);
  CHECK_THROWS_AS(mse(a, c), ArgumentError);
}

TEST_CASE("finite_diff_grad: analytic quadratic and constants") {
  auto sum_sq = [](const Matrix& m) {
    double s = 0.0;
    for (double v : m.raw()) s += v * v;
    return s;
  };
  Matrix x(1, 2, {1.0, 2.0});
  const Matrix g = finite_diff_grad(sum_sq, x);
  CHECK(std::abs(g(0, 0) - 2.0) <= 1e-6);
  CHECK(std::abs(g(0, 1) - 4.0) <= 1e-6);

  const Matrix gz = finite_diff_grad([](const Matrix&) { return 7.5; }, x);
  CHECK(gz.max_abs() == 0.0);

  CHECK_THROWS_AS(finite_diff_grad(sum_sq, x, 0.0), ArgumentError);
  CHECK_THROWS_AS(
      finite_diff_grad([](const Matrix&) { return std::nan(""); }, x), NumericError);
}

TEST_CASE("spectral_norm: diagonal and rotation cases plus operator bound") {
  Matrix d(3, 3);
  d(0, 0) = 0.5;
  d(1, 1) = -2.0;
  d(2, 2) = 1.0;
  CHECK(spectral_norm(d) == doctest::Approx(2.0).epsilon(1e-10));

  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix m(4, 5);
    for (double& v : m.raw()) v = rng.normal();
    const double sigma = spectral_norm(m);
    for (int probe = 0; probe < 20; ++probe) {
      Matrix x(5, 1);
      for (double& v : x.raw()) v = rng.normal();
      const double nx = norm2(std::span<const double>(x.raw()));
      const Matrix y = matmul(m, x);
      CHECK(norm2(std::span<const double>(y.raw())) <= sigma * nx * (1.0 + 1e-9) + 1e-12);
    }
  }
}

TEST_CASE("grad_check reports sane fields") {
  Matrix a(2, 2, {1.0, 2.0, 3.0, 4.0});
  Matrix b = a;
  b(1, 1) += 1e-6;
  const GradCheckReport rep = grad_check(a, b);
  CHECK(rep.probe_count == 4);
  CHECK(rep.max_abs_err == doctest::Approx(1e-6));
  CHECK(rep.max_rel_err > 0.0);
}
