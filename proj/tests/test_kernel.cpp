#include <doctest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <random>

#include "structgp/errors.hpp"
#include "structgp/kernel.hpp"
#include "structgp/linalg.hpp"

using namespace structgp;
using boost::math::quadrature::gauss_kronrod;

namespace {

// Integral of H_v(s) H_w(s - dt) over the real line, split at the peaks.
double convolution_oracle(double s1, double l1, double s2, double l2, double dt) {
  auto f = [&](double s) { return filter_value(s1, l1, s) * filter_value(s2, l2, s - dt); };
  const double width = 40.0 * std::sqrt(std::max(l1, l2)) + std::abs(dt);
  const double peak = dt * l1 / (l1 + l2);
  double err = 0.0;
  return gauss_kronrod<double, 61>::integrate(f, -width, peak, 25, 1e-14, &err) +
         gauss_kronrod<double, 61>::integrate(f, peak, width, 25, 1e-14, &err);
}

GraphParams random_graph(int k, std::mt19937_64 &rng, double density = 0.6) {
  std::uniform_real_distribution<double> amp(0.5, 1.5), logl(-0.5, 1.5), unit(0.0, 1.0);
  GraphParams p = GraphParams::identity(k, 0.1);
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u) {
      p.logL(v, u) = logl(rng);
      if (u != v && unit(rng) < density) p.S(v, u) = (unit(rng) < 0.5 ? -1.0 : 1.0) * amp(rng);
    }
  return p;
}

std::vector<TaskTime> random_coords(int n, int k, std::mt19937_64 &rng) {
  std::uniform_int_distribution<int> task(0, k - 1);
  std::uniform_real_distribution<double> time(0.0, 10.0);
  std::vector<TaskTime> out;
  for (int i = 0; i < n; ++i) out.push_back({task(rng), time(rng)});
  return out;
}

double weighted_sum(const GraphParams &p, const std::vector<TaskTime> &A,
                    const Eigen::MatrixXd &W) {
  return (W.array() * assemble_covariance(standardize(p), A).array()).sum();
}

}  // namespace

TEST_CASE("filter values") {
  CHECK(filter_value(1.0, 1.0, 0.0) == 1.0);
  CHECK(filter_value(2.0, 4.0, 2.0) == doctest::Approx(2.0 * std::exp(-1.0)).epsilon(1e-14));
  CHECK(filter_value(1.0, 1.0, 1e3) == 0.0);
}

TEST_CASE("pair term closed form against quadrature") {
  CHECK(pair_term(1, 1, 1, 1, 0.0) == doctest::Approx(std::sqrt(std::numbers::pi / 2)));
  CHECK(pair_term(0.0, 3.0, 1.0, 2.0, 0.7) == 0.0);
  const double expected = std::sqrt(std::numbers::pi) * std::exp(-1.0);
  CHECK(pair_term(1, 2, 1, 2, 2.0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(convolution_oracle(1, 2, 1, 2, 2.0) - expected) < 1e-12);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> amp(-2.0, 2.0), logl(-2.0, 3.0), dt(-5.0, 5.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double s1 = amp(rng), s2 = amp(rng);
    const double l1 = std::exp(logl(rng)), l2 = std::exp(logl(rng));
    const double d = dt(rng);
    const double closed = pair_term(s1, l1, s2, l2, d);
    const double oracle = convolution_oracle(s1, l1, s2, l2, d);
    worst = std::max(worst, std::abs(closed - oracle) / std::abs(oracle));
    CHECK(pair_term(s2, l2, s1, l1, -d) == doctest::Approx(closed).epsilon(1e-14));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("pair term stays finite for extreme lengthscale ratios") {
  const double v = pair_term(1.0, 1e-200, 1.0, 1e200, 0.0);
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(std::sqrt(std::numbers::pi * 1e-200)).epsilon(1e-12));
}

TEST_CASE("cross covariance") {
  StandardizedGraphParams p;
  p.S_tilde = Eigen::MatrixXd::Zero(3, 3);
  p.logL = Eigen::MatrixXd::Zero(3, 3);
  p.noise = Eigen::VectorXd::Zero(3);
  p.scale = Eigen::VectorXd::Ones(3);
  SUBCASE("disjoint parents") {
    p.S_tilde(0, 0) = 1.0;
    p.S_tilde(1, 1) = 1.0;
    for (double dt : {0.0, 0.5, 3.0}) CHECK(cross_cov(p, 0, 1, dt) == 0.0);
  }
  SUBCASE("single self filter") {
    p.S_tilde(0, 0) = 1.0;
    CHECK(cross_cov(p, 0, 0, 0.0) ==
          doctest::Approx(convolution_oracle(1, 1, 1, 1, 0.0)).epsilon(1e-12));
  }
  SUBCASE("shared source") {
    p.S_tilde(0, 2) = 1.0;
    p.S_tilde(1, 2) = 1.0;
    CHECK(cross_cov(p, 0, 1, 0.0) ==
          doctest::Approx(std::sqrt(std::numbers::pi / 2)).epsilon(1e-14));
  }
  SUBCASE("stationarity") {
    std::mt19937_64 rng(5);
    const auto sp = standardize(random_graph(3, rng));
    const double t1 = 3.25, t2 = 1.5, shift = 4.0;
    CHECK(cross_cov(sp, 0, 1, (t1 + shift) - (t2 + shift)) == cross_cov(sp, 0, 1, t1 - t2));
  }
}

TEST_CASE("standardization") {
  SUBCASE("single entry") {
    GraphParams p = GraphParams::identity(1);
    p.S(0, 0) = 2.0;
    p.logL(0, 0) = std::log(2.0);
    const auto sp = standardize(p);
    const double s = 2.0 * std::pow(std::numbers::pi, 0.25);
    CHECK(sp.scale(0) == doctest::Approx(s).epsilon(1e-14));
    CHECK(sp.S_tilde(0, 0) == doctest::Approx(2.0 / s).epsilon(1e-14));
    CHECK(std::abs(convolution_oracle(sp.S_tilde(0, 0), 2.0, sp.S_tilde(0, 0), 2.0, 0.0) - 1.0) <
          1e-10);
  }
  SUBCASE("unit variance, fixed point, scale invariance") {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 20; ++rep) {
      const GraphParams p = random_graph(4, rng);
      const auto sp = standardize(p);
      for (int v = 0; v < 4; ++v) {
        CHECK(std::abs(prior_variance(sp.S_tilde, sp.logL, v) - 1.0) <= 1e-9);
        CHECK(std::abs(cross_cov(sp, v, v, 0.0) - 1.0) <= 1e-9);
      }
      GraphParams again = p;
      again.S = sp.S_tilde;
      CHECK((standardize(again).S_tilde - sp.S_tilde).cwiseAbs().maxCoeff() <= 1e-12);
      GraphParams scaled = p;
      scaled.S.row(2) *= 3.7;
      const auto coords = random_coords(12, 4, rng);
      CHECK((assemble_covariance(standardize(scaled), coords) -
             assemble_covariance(sp, coords))
                .cwiseAbs()
                .maxCoeff() < 1e-12);
    }
  }
  SUBCASE("all-zero row") {
    GraphParams p = GraphParams::identity(2);
    p.S(1, 1) = 0.0;
    CHECK_THROWS_AS(standardize(p), DataError);
  }
}

TEST_CASE("assembled covariance") {
  std::mt19937_64 rng(21);
  SUBCASE("single point") {
    const auto sp = standardize(GraphParams::identity(2, 0.3));
    const std::vector<TaskTime> a{{1, 2.0}};
    const auto K = assemble_covariance(sp, a);
    CHECK(K(0, 0) == doctest::Approx(1.0 + 0.09).epsilon(1e-14));
  }
  SUBCASE("symmetric PSD with cholesky at small jitter") {
    for (int rep = 0; rep < 25; ++rep) {
      GraphParams p = random_graph(3, rng);
      p.noise.setZero();
      const auto sp = standardize(p);
      const auto coords = random_coords(40, 3, rng);
      const auto K = assemble_covariance(sp, coords);
      CHECK((K - K.transpose()).cwiseAbs().maxCoeff() == 0.0);
      const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
      CHECK(es.eigenvalues().minCoeff() >= -1e-8);
      const Eigen::MatrixXd Kj = K + 1e-6 * Eigen::MatrixXd::Identity(K.rows(), K.cols());
      CHECK(Eigen::LLT<Eigen::MatrixXd>(Kj).info() == Eigen::Success);
    }
  }
  SUBCASE("row permutation") {
    const auto sp = standardize(random_graph(3, rng));
    auto A = random_coords(8, 3, rng);
    const auto B = random_coords(5, 3, rng);
    const auto K = assemble_covariance(sp, A, B);
    std::swap(A[1], A[6]);
    const auto Kp = assemble_covariance(sp, A, B);
    CHECK(Kp.row(1) == K.row(6));
    CHECK(Kp.row(6) == K.row(1));
  }
  SUBCASE("json roundtrip") {
    const GraphParams p = random_graph(3, rng);
    const auto back = GraphParams::from_json(p.to_json());
    CHECK(back.S == p.S);
    CHECK(back.logL == p.logL);
    CHECK(back.noise == p.noise);
  }
}

TEST_CASE("kernel gradient matches finite differences") {
  std::mt19937_64 rng(33);
  const int k = 3;
  GraphParams p = random_graph(k, rng, 0.8);
  const auto coords = random_coords(15, k, rng);
  Eigen::MatrixXd W = Eigen::MatrixXd::Random(15, 15);
  W = (W + W.transpose()).eval();
  StandardizedGradient g(k);
  const auto sp = standardize(p);
  accumulate_kernel_gradient(sp, coords, W, 1.0, g);
  const GraphGradient gg = standardize_backward(p, sp, g);
  auto check = [&](double &param, double analytic) {
    const double h = 1e-5 * std::max(1.0, std::abs(param));
    const double saved = param;
    param = saved + h;
    const double up = weighted_sum(p, coords, W);
    param = saved - h;
    const double down = weighted_sum(p, coords, W);
    param = saved;
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(fd - analytic) <= 1e-6 * std::max(1.0, std::abs(fd)));
  };
  for (int v = 0; v < k; ++v) {
    for (int u = 0; u < k; ++u) {
      check(p.S(v, u), gg.S(v, u));
      check(p.logL(v, u), gg.logL(v, u));
    }
    check(p.noise(v), gg.noise(v));
  }
}

TEST_CASE("robust cholesky escalates jitter") {
  Eigen::MatrixXd K = Eigen::MatrixXd::Ones(3, 3);
  const auto f = robust_cholesky(K);
  CHECK(f.jitter > 0.0);
  CHECK(f.jitter <= kMaxJitter);
  Eigen::MatrixXd bad = -Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(robust_cholesky(bad), NumericalError);
}

TEST_CASE("task-grouped assembly matches the reference") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 3;
    const auto p = random_graph(k, rng);
    const auto sp = standardize(p);
    auto coords = random_coords(25, k, rng);
    const TaskBlocks blocks(coords, k);
    std::vector<TaskTime> grouped;
    for (int a : blocks.order) grouped.push_back(coords[static_cast<std::size_t>(a)]);
    const double scale = 0.7;
    BlockExponentials cache;
    const Eigen::MatrixXd K = assemble_covariance(sp, blocks, &cache, scale);
    CHECK((K - assemble_covariance(sp, grouped, scale)).cwiseAbs().maxCoeff() < 1e-12);

    Eigen::MatrixXd W = Eigen::MatrixXd::Random(25, 25);
    W = (W + W.transpose()).eval();
    StandardizedGradient g_ref(k), g_blk(k);
    accumulate_kernel_gradient(sp, grouped, W, scale, g_ref);
    accumulate_kernel_gradient(sp, blocks, W, cache, g_blk, scale);
    CHECK((g_ref.S_tilde - g_blk.S_tilde).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g_ref.ell - g_blk.ell).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g_ref.noise - g_blk.noise).cwiseAbs().maxCoeff() < 1e-10);
  }
}
