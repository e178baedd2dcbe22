#include <doctest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <random>

#include "structgp/errors.hpp"
#include "structgp/hsgp.hpp"

using namespace structgp;
using boost::math::quadrature::gauss_kronrod;

namespace {

constexpr double kPi = std::numbers::pi;

double relative_max_error(const Eigen::MatrixXd &approx, const Eigen::MatrixXd &exact) {
  return (approx - exact).cwiseAbs().maxCoeff() / exact.cwiseAbs().maxCoeff();
}

StandardizedGraphParams random_graph(int k, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> amp(-1.5, 1.5), logl(0.0, 1.0);
  GraphParams g = GraphParams::identity(k, 0.1);
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u) {
      g.logL(v, u) = logl(rng);
      if (u != v) g.S(v, u) = amp(rng);
    }
  return standardize(g);
}

}  // namespace

TEST_CASE("eigenpairs") {
  const auto e = eigenpair(1, 1.0);
  CHECK(e.lambda == doctest::Approx(kPi * kPi / 4.0).epsilon(1e-15));
  for (int j = 1; j <= 6; ++j) {
    const auto ej = eigenpair(j, 2.5);
    CHECK(std::abs(ej(2.5)) < 1e-14);
    CHECK(std::abs(ej(-2.5)) < 1e-14);
  }
  for (int i = 1; i <= 5; ++i)
    for (int j = 1; j <= 5; ++j) {
      const auto a = eigenpair(i, 1.7), b = eigenpair(j, 1.7);
      const double inner = gauss_kronrod<double, 61>::integrate(
          [&](double x) { return a(x) * b(x); }, -1.7, 1.7, 15, 1e-14);
      CHECK(std::abs(inner - (i == j ? 1.0 : 0.0)) < 1e-8);
    }
}

TEST_CASE("squared exponential spectral density") {
  CHECK(se_spectral_density(1.3, 0.7, 0.0) ==
        doctest::Approx(1.3 * std::sqrt(2 * kPi) * 0.7).epsilon(1e-15));
  CHECK(se_spectral_density(1.0, 1.0, 1.0) ==
        doctest::Approx(std::sqrt(2 * kPi) * std::exp(-0.5)).epsilon(1e-15));
  for (double alpha : {0.5, 2.0})
    for (double ell : {0.3, 1.0, 4.0}) {
      const double total = gauss_kronrod<double, 61>::integrate(
          [&](double w) { return se_spectral_density(alpha, ell, w); },
          -std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(), 15,
          1e-13);
      CHECK(total / (2 * kPi) == doctest::Approx(alpha).epsilon(1e-10));
    }
}

TEST_CASE("squared filter spectrum is the self-convolution spectral density") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> amp(-2.0, 2.0), logl(-1.0, 2.0), om(0.0, 5.0);
  for (int rep = 0; rep < 50; ++rep) {
    const double s = amp(rng), ell = std::exp(logl(rng)), w = om(rng);
    const double h = filter_spectrum(s, ell, w);
    const double alpha = s * s * std::sqrt(kPi * ell / 2.0);
    const double sd = se_spectral_density(alpha, std::sqrt(ell), w);
    CHECK(std::abs(h * h - sd) <= 1e-10 * std::max(1.0, sd));
  }
}

TEST_CASE("structured features approximate the exact kernel") {
  SUBCASE("single source") {
    StandardizedGraphParams g = standardize(GraphParams::identity(1));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> time(-5.0, 5.0);
    std::vector<TaskTime> coords;
    for (int n = 0; n < 50; ++n) coords.push_back({0, time(rng)});
    HSGPDomain d;
    d.center = 0.0;
    d.L = 4.0 * 5.0;
    d.m = 256;
    const auto f = structured_features(g, coords, d);
    const Eigen::MatrixXd K = assemble_covariance(g, coords, coords);
    CHECK(relative_max_error(f.Phi * f.Phi.transpose(), K) <= 1e-3);
  }
  SUBCASE("error decreases with the basis count") {
    std::mt19937_64 rng(4);
    const auto g = random_graph(3, rng);
    std::uniform_real_distribution<double> time(0.0, 10.0);
    std::uniform_int_distribution<int> task(0, 2);
    std::vector<TaskTime> coords;
    for (int n = 0; n < 40; ++n) coords.push_back({task(rng), time(rng)});
    const Eigen::MatrixXd K = assemble_covariance(g, coords, coords);
    HSGPDomain d = make_domain({64, 4.0}, 0.0, 10.0);
    double prev = std::numeric_limits<double>::infinity();
    for (int m : {8, 32, 128, 512}) {
      d.m = m;
      const auto f = structured_features(g, coords, d);
      const double err = relative_max_error(f.Phi * f.Phi.transpose(), K);
      CHECK((err < prev || err < 1e-12));
      prev = err;
    }
    CHECK(prev < 1e-3);
  }
  SUBCASE("linear in each amplitude") {
    std::mt19937_64 rng(5);
    auto g = random_graph(2, rng);
    const std::vector<TaskTime> coords{{0, 1.0}, {1, 2.0}, {0, 3.0}};
    const HSGPDomain d = make_domain({16, 2.0}, 0.0, 4.0);
    const auto f = structured_features(g, coords, d);
    g.S_tilde(0, 1) *= 2.0;
    const auto f2 = structured_features(g, coords, d);
    CHECK((f2.Phi.row(0).segment(16, 16) - 2.0 * f.Phi.row(0).segment(16, 16))
              .cwiseAbs()
              .maxCoeff() < 1e-14);
    CHECK(f2.Phi.row(1) == f.Phi.row(1));
    CHECK(f.source_of(17) == 1);
    CHECK(f.basis_of(17) == 2);
  }
  SUBCASE("zero amplitude gives zero features") {
    auto g = standardize(GraphParams::identity(2));
    const std::vector<TaskTime> coords{{0, 1.0}};
    const auto f = structured_features(g, coords, make_domain({8, 2.0}, 0.0, 4.0));
    CHECK(f.Phi.row(0).segment(8, 8).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("times outside the domain") {
    auto g = standardize(GraphParams::identity(1));
    const std::vector<TaskTime> coords{{0, 50.0}};
    CHECK_THROWS_AS(structured_features(g, coords, make_domain({8, 1.5}, 0.0, 4.0)), DataError);
  }
}

TEST_CASE("pathway features reproduce the shared covariance") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-1.0, 1.0), time(0.0, 6.0);
  for (int rep = 0; rep < 5; ++rep) {
    const auto g = random_graph(3, rng);
    PathwayParams pw = PathwayParams::uniform(3, 2, 0.3);
    for (int i = 0; i < 3; ++i)
      for (int q = 0; q < 2; ++q) {
        pw.logits(i, q) = u(rng);
        pw.logL_sub(i, q) = 0.5 * u(rng);
        pw.tau(i, q) = 1.5 * u(rng);
      }
    std::vector<Observation> pts;
    for (int n = 0; n < 30; ++n) pts.push_back({n % 3, (n / 3) % 3, time(rng), 0.0});
    const HSGPDomain d = make_domain({256, 4.0}, 0.0, 6.0, 1.5);
    const Eigen::MatrixXd Phi = lp_features(g, pw, pts, d);
    Eigen::MatrixXd exact(30, 30);
    for (int a = 0; a < 30; ++a)
      for (int b = 0; b < 30; ++b)
        exact(a, b) = pw.gamma * pathway_cov(g, pw, pts[a].subject, pts[b].subject, pts[a].task,
                                             pts[b].task, pts[a].time, pts[b].time);
    CHECK(relative_max_error(Phi * Phi.transpose(), exact) <= 1e-2);
  }
}

TEST_CASE("pathway feature gradient matches finite differences") {
  std::mt19937_64 rng(7);
  const int k = 2, r = 2, p = 2;
  GraphParams graph = GraphParams::identity(k, 0.1);
  graph.S(0, 1) = 0.8;
  graph.logL << 0.2, 0.5, -0.1, 0.3;
  PathwayParams pw = PathwayParams::uniform(r, p, 0.3);
  pw.logits << 0.3, -0.2, 0.1, 0.5;
  pw.logL_sub << 0.1, -0.3, 0.4, 0.2;
  pw.tau << 0.5, -0.4, 0.2, 0.9;
  const std::vector<Observation> pts{{0, 0, 1.0, 0}, {0, 1, 2.5, 0}, {1, 1, 0.7, 0}, {1, 0, 3.3, 0}};
  const HSGPDomain d = make_domain({12, 2.0}, 0.0, 4.0, 1.0);
  const Eigen::MatrixXd G = Eigen::MatrixXd::Random(4, p * k * 12);
  auto loss = [&] { return (G.array() * lp_features(standardize(graph), pw, pts, d).array()).sum(); };
  const auto sg = standardize(graph);
  StandardizedGradient g(k);
  PathwayGradient pg(r, p);
  accumulate_lp_feature_gradient(sg, pw, pts, d, G, g, pg);
  const auto gg = standardize_backward(graph, sg, g);
  const Eigen::MatrixXd dlog = softmax_backward(pw.weights(), pg.logits);
  auto check = [&](double &param, double analytic) {
    const double h = 1e-6;
    const double saved = param;
    param = saved + h;
    const double up = loss();
    param = saved - h;
    const double down = loss();
    param = saved;
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(fd - analytic) <= 1e-6 * std::max(1.0, std::abs(fd)));
  };
  for (int v = 0; v < k; ++v)
    for (int q = 0; q < k; ++q) {
      check(graph.S(v, q), gg.S(v, q));
      check(graph.logL(v, q), gg.logL(v, q));
    }
  for (int i = 0; i < r; ++i)
    for (int u = 0; u < p; ++u) {
      check(pw.logits(i, u), dlog(i, u));
      check(pw.logL_sub(i, u), pg.logL_sub(i, u));
      check(pw.tau(i, u), pg.tau(i, u));
    }
}
