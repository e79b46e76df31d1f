#include <doctest.h>

#include <cmath>
#include <random>

#include "xstage/error.hpp"
#include "xstage/numerics.hpp"

using namespace xstage;

TEST_CASE("linear: identity, zero weight and hand-evaluated products") {
  CHECK(linear(Vector{1, 2, 3}, Matrix::identity(3), Vector{0, 0, 0}) == Vector{1, 2, 3});
  CHECK(linear(Vector{9, -4}, Matrix(2, 2), Vector{4, 5}) == Vector{4, 5});
  CHECK(linear(Vector{2, 3}, Matrix(2, 2, {1, 1, 1, -1}), Vector{0, 0}) == Vector{5, -1});
}

TEST_CASE("linear: mismatched shapes name both") {
  try {
    linear(Vector{1, 2, 3}, Matrix(2, 2), Vector{0, 0});
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x2") != std::string::npos);
    CHECK(what.find('3') != std::string::npos);
  }
  CHECK_THROWS_AS(linear(Vector{1, 2}, Matrix(2, 2), Vector{0, 0, 0}), DimensionError);
}

TEST_CASE("linear is additive and homogeneous for fixed weights") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix w(4, 5);
    for (double& x : w.flat()) x = u(rng);
    Vector a(5), b(5), zero(4, 0.0);
    for (double& x : a) x = u(rng);
    for (double& x : b) x = u(rng);
    const double k = u(rng);
    Vector sum(5), scaled(5);
    for (int i = 0; i < 5; ++i) {
      sum[i] = a[i] + b[i];
      scaled[i] = k * a[i];
    }
    const Vector la = linear(a, w, zero), lb = linear(b, w, zero);
    const Vector ls = linear(sum, w, zero), lk = linear(scaled, w, zero);
    for (int i = 0; i < 4; ++i) {
      const double scale = std::abs(la[i]) + std::abs(lb[i]) + 1.0;
      CHECK(std::abs(ls[i] - (la[i] + lb[i])) <= 1e-12 * scale * 10);
      CHECK(std::abs(lk[i] - k * la[i]) <= 1e-12 * scale * 10);
    }
  }
}

TEST_CASE("layer_norm examples") {
  const Vector zero3(3, 0.0), one3(3, 1.0);
  for (double v : layer_norm(Vector{5, 5, 5}, one3, zero3)) CHECK(v == 0.0);

  const Vector y = layer_norm(Vector{1, -1}, Vector{1, 1}, Vector{0, 0}, 1e-300);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-12));

  CHECK(layer_norm(Vector{3, -8}, Vector{0, 0}, Vector{7, 7}) == Vector{7, 7});
  CHECK_THROWS_AS(layer_norm(Vector{}, Vector{}, Vector{}), InvalidArgument);
}

TEST_CASE("layer_norm output has zero mean and unit variance up to epsilon") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    Vector x(8);
    for (double& v : x) v = u(rng);
    const Vector y = layer_norm(x, Vector(8, 1.0), Vector(8, 0.0));
    double mean = 0.0, var = 0.0, in_mean = 0.0, in_var = 0.0;
    for (int i = 0; i < 8; ++i) {
      mean += y[i] / 8;
      in_mean += x[i] / 8;
    }
    for (int i = 0; i < 8; ++i) {
      var += (y[i] - mean) * (y[i] - mean) / 8;
      in_var += (x[i] - in_mean) * (x[i] - in_mean) / 8;
    }
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(in_var / (in_var + kLayerNormEpsilon)).epsilon(1e-10));
  }
}

TEST_CASE("sigmoid and relu") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(relu(-3.0) == 0.0);
  CHECK(relu(2.5) == 2.5);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("bilinear_sample: grid points, cell midpoint and padding") {
  FeatureGrid grid(4, 5, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) grid.at(y, x)[0] = static_cast<double>(10 * y + x);
  CHECK(bilinear_sample(grid, 2.0, 3.0)[0] == 32.0);

  FeatureGrid corners(2, 2, 1);
  corners.at(0, 0)[0] = 0;
  corners.at(0, 1)[0] = 2;
  corners.at(1, 0)[0] = 4;
  corners.at(1, 1)[0] = 6;
  CHECK(bilinear_sample(corners, 0.5, 0.5)[0] == 3.0);

  CHECK(bilinear_sample(grid, -50.0, 2.0)[0] == 0.0);
  CHECK(bilinear_sample(grid, 2.0, 400.0)[0] == 0.0);
  // Half a cell outside reads half of the border cell.
  CHECK(bilinear_sample(grid, -0.5, 0.0)[0] == 0.0);
  CHECK(bilinear_sample(grid, 4.5, 0.0)[0] == doctest::Approx(2.0));
}

TEST_CASE("bilinear_sample is linear along each axis between neighbours") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  FeatureGrid grid(6, 7, 2);
  for (double& v : grid.flat()) v = u(rng);
  for (int trial = 0; trial < 200; ++trial) {
    const double x0 = std::floor(3.0 * (u(rng) + 1.0)), y = std::floor(2.5 * (u(rng) + 1.0));
    const double t = 0.5 * (u(rng) + 1.0);
    const Vector a = bilinear_sample(grid, x0, y), b = bilinear_sample(grid, x0 + 1, y);
    const Vector m = bilinear_sample(grid, x0 + t, y);
    for (int c = 0; c < 2; ++c) CHECK(m[c] == doctest::Approx((1 - t) * a[c] + t * b[c]).epsilon(1e-12));
  }
}

TEST_CASE("grad_check: exact cases and non-finite values") {
  const ScalarFunction square = [](std::span<const double> x) { return x[0] * x[0]; };
  CHECK(grad_check("square", square, Vector{6.0}, Vector{3.0}, 1e-5).max_rel_error < 1e-6);

  const ScalarFunction r = [](std::span<const double> x) { return relu(x[0]); };
  CHECK(grad_check("relu", r, Vector{1.0}, Vector{1.0}, 1e-5).max_rel_error < 1e-6);

  const ScalarFunction blowup = [](std::span<const double> x) { return x[1] > 1.0 ? INFINITY : x[0]; };
  try {
    grad_check("blowup", blowup, Vector{1.0, 0.0}, Vector{0.0, 1.0}, 1e-3);
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("blowup") != std::string::npos);
    CHECK(std::string(e.what()).find('1') != std::string::npos);
  }
}

TEST_CASE("grad_check reports the worst coordinate and flags a wrong gradient") {
  const ScalarFunction f = [](std::span<const double> x) { return x[0] * x[1] + std::sin(x[2]); };
  const Vector probe{0.3, -1.2, 0.7};
  const Vector good{-1.2, 0.3, std::cos(0.7)};
  CHECK(grad_check("f", f, good, probe, 1e-5).max_rel_error < 1e-8);
  Vector bad = good;
  bad[2] *= 1.01;
  const auto rep = grad_check("f", f, bad, probe, 1e-5, 3);
  CHECK(rep.max_rel_error > 5e-3);
  CHECK(rep.worst == std::pair<std::size_t, std::size_t>{0, 2});
  CHECK(rep.step == 1e-5);
}

TEST_CASE("grad_check on a linear-sigmoid-relu-layer_norm composite") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix w(6, 4);
  for (double& x : w.flat()) x = u(rng);
  const Vector bias(6, 0.1), gain(6, 1.3), shift(6, -0.2);
  const auto forward = [&](std::span<const double> x) {
    Vector h = linear(x, w, bias);
    for (double& v : h) v = sigmoid(v);
    const Vector z = layer_norm(h, gain, shift);
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (i + 1.0) * relu(z[i]);
    return s;
  };
  const Vector probe{0.2, -0.4, 0.9, 0.1};
  // Analytic gradient by the chain rule through the library's own backward pieces.
  Vector h = linear(probe, w, bias);
  for (double& v : h) v = sigmoid(v);
  const Vector z = layer_norm(h, gain, shift);
  Vector dz(6);
  for (std::size_t i = 0; i < 6; ++i) {
    REQUIRE(std::abs(z[i]) > 1e-3);
    dz[i] = z[i] > 0 ? (i + 1.0) : 0.0;
  }
  Vector dh = layer_norm_backward(h, gain, dz).input;
  for (std::size_t i = 0; i < 6; ++i) dh[i] *= h[i] * (1.0 - h[i]);
  const Vector dx = linear_backward(probe, w, dh).input;
  CHECK(grad_check("composite", forward, dx, probe, 1e-5).max_rel_error < 1e-4);
}

TEST_CASE("matrix products agree with their transposed forms") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix a(3, 4), b(4, 2);
  for (double& x : a.flat()) x = u(rng);
  for (double& x : b.flat()) x = u(rng);
  const Matrix ab = matmul(a, b);
  CHECK(ab.rows() == 3);
  CHECK(ab.cols() == 2);
  CHECK(matmul_tn(transpose(a), b) == ab);
  CHECK(matmul_nt(a, transpose(b)) == ab);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}
