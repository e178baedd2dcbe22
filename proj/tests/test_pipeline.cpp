#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "structgp/errors.hpp"
#include "structgp/gp.hpp"
#include "structgp/pipeline.hpp"

using namespace structgp;

namespace {

ObservationSet simulate(int k, int r, int obs_per_task, std::uint64_t seed, int p = 0) {
  SimConfig s;
  s.k = k;
  s.r = r;
  s.obs_per_task = obs_per_task;
  s.p = p;
  s.mean_degree = std::min(2.0, k - 1.0);
  s.seed = seed;
  auto rng = repetition_rng(seed, 0);
  const GroundTruth truth = sample_ground_truth(s, rng);
  return sample_trajectories(truth, s, rng);
}

RunConfig quick_config(FitMode mode) {
  RunConfig c;
  c.mode = mode;
  c.transform = false;
  c.lambdas = {0.01};
  c.inner_steps = 60;
  c.steps = 150;
  c.batch_size = 0;
  c.epochs = 5;
  c.m = 32;
  c.boundary_factor = 2.0;
  c.seed = 5;
  return c;
}

// Single-task GP with k(dt) = exp(-dt^2 / (2 l)) + sigma^2, the standardized
// form of a lone Gaussian filter.
double single_task_nmll(const ObservationSet &obs, double ell, double sigma) {
  double total = 0.0;
  for (int s = 0; s < obs.num_subjects(); ++s) {
    const auto recs = obs.subject_records(s);
    const auto n = static_cast<Eigen::Index>(recs.size());
    if (n == 0) continue;
    Eigen::MatrixXd K(n, n);
    Eigen::VectorXd y(n);
    for (Eigen::Index a = 0; a < n; ++a) {
      y(a) = recs[static_cast<std::size_t>(a)].value;
      for (Eigen::Index b = 0; b < n; ++b) {
        const double dt = recs[static_cast<std::size_t>(a)].time - recs[static_cast<std::size_t>(b)].time;
        K(a, b) = std::exp(-dt * dt / (2.0 * ell)) + (a == b ? sigma * sigma : 0.0);
      }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    const Eigen::VectorXd alpha = llt.solve(y);
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    total += 0.5 * y.dot(alpha) + 0.5 * logdet + 0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
  }
  return total;
}

ModelBundle manual_bundle(const GraphParams &g) {
  ModelBundle b;
  b.config.mode = FitMode::StructGP;
  b.config.transform = false;
  std::vector<std::string> names;
  for (int v = 0; v < g.num_tasks(); ++v) names.push_back("t" + std::to_string(v));
  b.catalog = TaskCatalog(names);
  b.subjects = {"a"};
  b.graph = g;
  return b;
}

ObservationSet one_subject(std::vector<Observation> recs, int k) {
  std::vector<std::string> names;
  for (int v = 0; v < k; ++v) names.push_back("t" + std::to_string(v));
  return ObservationSet(std::move(recs), 1, k, {"a"}, names);
}

}  // namespace

TEST_CASE("independent mode on one task is a single-task GP fit") {
  const ObservationSet obs = simulate(1, 20, 15, 3);
  const ModelBundle b = fit_model(obs, quick_config(FitMode::Independent));
  const double ell = std::exp(b.graph.logL(0, 0));
  const double oracle = single_task_nmll(obs, ell, b.graph.noise(0));
  const double got = b.diagnostics.at("nmll").get<double>();
  CHECK(std::abs(got - oracle) <= 1e-8 * std::max(1.0, std::abs(oracle)));
}

TEST_CASE("structgp bundles satisfy the acyclicity constraint") {
  const ObservationSet obs = simulate(3, 40, 10, 7);
  RunConfig c = quick_config(FitMode::StructGP);
  c.lambdas = {0.03, 0.003};
  const ModelBundle b = fit_model(obs, c);
  REQUIRE(b.structure);
  CHECK(acyclicity(b.graph.S) == 0.0);
  CHECK(is_acyclic(b.structure->adjacency));
  CHECK(b.structure->h_smooth < c.epsilon);
  for (int v = 0; v < 3; ++v) CHECK(b.graph.S(v, v) == 1.0);
}

TEST_CASE("lp-fixed keeps the graph parameters bitwise") {
  const ObservationSet obs = simulate(2, 12, 6, 9, 2);
  const ModelBundle base = fit_model(obs, quick_config(FitMode::StructGP));
  const ModelBundle lp = fit_model(obs, quick_config(FitMode::LPFixed), &base);
  CHECK(lp.graph.S == base.graph.S);
  CHECK(lp.graph.logL == base.graph.logL);
  CHECK(lp.graph.noise == base.graph.noise);
  REQUIRE(lp.pathways);
  CHECK(lp.pathways->num_subjects() == 12);
  REQUIRE(lp.structure);
  CHECK(lp.structure->adjacency == base.structure->adjacency);
}

TEST_CASE("predict trivial cases") {
  GraphParams g = GraphParams::identity(2, 0.0);
  g.S(1, 0) = 0.8;
  SUBCASE("query at a noiseless conditioning point returns the observed value") {
    const ModelBundle b = manual_bundle(g);
    const auto cond = one_subject({{0, 0, 1.0, 0.7}, {0, 1, 2.0, -0.4}}, 2);
    const auto query = one_subject({{0, 0, 1.0, 0.0}, {0, 1, 2.0, 0.0}}, 2);
    const Forecast fc = predict(b, cond, query);
    REQUIRE(fc.rows.size() == 2);
    CHECK(fc.rows[0].mean == doctest::Approx(0.7).epsilon(1e-6));
    CHECK(fc.rows[1].mean == doctest::Approx(-0.4).epsilon(1e-6));
    CHECK(fc.rows[0].variance < 1e-6);
  }
  SUBCASE("empty conditioning gives the prior") {
    g.noise.setConstant(0.3);
    const ModelBundle b = manual_bundle(g);
    const auto cond = one_subject({}, 2);
    const auto query = one_subject({{0, 0, 1.0, 0.0}, {0, 1, 4.0, 0.0}}, 2);
    const Forecast fc = predict(b, cond, query);
    REQUIRE(fc.rows.size() == 2);
    for (const auto &r : fc.rows) {
      CHECK(r.mean == 0.0);
      CHECK(r.variance == doctest::Approx(1.09).epsilon(1e-12));
    }
  }
  SUBCASE("unknown query task is rejected") {
    const ModelBundle b = manual_bundle(GraphParams::identity(1, 0.1));
    const auto query = one_subject({{0, 1, 1.0, 0.0}}, 2);
    CHECK_THROWS_AS(predict(b, one_subject({}, 1), query), DataError);
  }
}

TEST_CASE("windowed prediction beats the prior-only predictor") {
  const ObservationSet obs = simulate(3, 60, 12, 13);
  std::vector<int> train_ids, test_ids;
  for (int s = 0; s < 60; ++s) (s < 40 ? train_ids : test_ids).push_back(s);
  const ModelBundle b = fit_model(obs.restrict_subjects(train_ids), quick_config(FitMode::StructGP));
  const ObservationSet test = obs.restrict_subjects(test_ids);
  const Forecast fc = predict(b, test, test, {7.5, 7.5});
  REQUIRE(fc.rows.size() > 50);
  const auto metrics = evaluate(fc, test, {200, 1});
  double prior_mse = 0.0;
  long n = 0;
  for (const auto &o : test.records())
    if (o.time >= 7.5) {
      prior_mse += o.value * o.value;
      ++n;
    }
  prior_mse /= static_cast<double>(n);
  const double mse = metrics.at("macro").at("mse").at("value").get<double>();
  CHECK(mse < prior_mse);
}

TEST_CASE("LP prediction matches the dense joint posterior") {
  // Subject 0 has no training records so that the dense oracle and the
  // streaming state condition on exactly the same data.
  const ObservationSet full = simulate(2, 6, 5, 21, 2);
  const ObservationSet train = full.filter([](const Observation &o) { return o.subject != 0; });
  RunConfig c = quick_config(FitMode::LPFixed);
  c.m = 160;
  c.boundary_factor = 4.0;
  ModelBundle init = manual_bundle(GraphParams::identity(2, 0.1));
  init.graph.S(1, 0) = 0.9;
  init.graph.logL.setConstant(0.4);
  init.catalog = TaskCatalog(full.task_names());
  const ModelBundle b = fit_model(train, c, &init);
  REQUIRE(b.pathways);
  const StandardizedGraphParams sp = standardize(b.graph);
  const PathwayParams &pw = *b.pathways;

  const ObservationSet query({{0, 0, 2.5, 0.0}, {0, 1, 6.0, 0.0}, {0, 0, 9.0, 0.0}}, 6, 2,
                             full.subject_labels(), full.task_names());
  const std::vector<Observation> &q_recs = query.records();
  const auto subject0 = full.subject_records(0);

  auto dense = [&](const std::vector<Observation> &given) {
    const auto n = static_cast<Eigen::Index>(given.size());
    Eigen::MatrixXd K = assemble_lp_covariance(sp, pw, given);
    Eigen::VectorXd y(n);
    for (Eigen::Index a = 0; a < n; ++a) y(a) = given[static_cast<std::size_t>(a)].value;
    const Eigen::MatrixXd Kq = assemble_lp_covariance(sp, pw, q_recs, given);
    const Eigen::MatrixXd Kqq = assemble_lp_covariance(sp, pw, q_recs);
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    const Eigen::VectorXd mean = Kq * llt.solve(y);
    const Eigen::VectorXd var =
        (Kqq - Kq * llt.solve(Kq.transpose())).diagonal();
    return std::pair{mean, var};
  };

  SUBCASE("no conditioning records") {
    const ObservationSet none({}, 6, 2, full.subject_labels(), full.task_names());
    const Forecast fc = predict(b, none, query);
    const auto [mean, var] = dense(train.records());
    REQUIRE(fc.rows.size() == 3);
    for (Eigen::Index a = 0; a < 3; ++a) {
      CHECK(fc.rows[static_cast<std::size_t>(a)].mean == doctest::Approx(mean(a)).epsilon(1e-3));
      CHECK(fc.rows[static_cast<std::size_t>(a)].variance == doctest::Approx(var(a)).epsilon(1e-3));
    }
  }
  SUBCASE("with conditioning records") {
    std::vector<Observation> cond(subject0.begin(), subject0.end());
    const ObservationSet cset(cond, 6, 2, full.subject_labels(), full.task_names());
    const Forecast fc = predict(b, cset, query);
    std::vector<Observation> given = train.records();
    given.insert(given.end(), cond.begin(), cond.end());
    const auto [mean, var] = dense(given);
    REQUIRE(fc.rows.size() == 3);
    for (Eigen::Index a = 0; a < 3; ++a) {
      CHECK(fc.rows[static_cast<std::size_t>(a)].mean == doctest::Approx(mean(a)).epsilon(1e-3));
      CHECK(fc.rows[static_cast<std::size_t>(a)].variance == doctest::Approx(var(a)).epsilon(1e-3));
    }
  }
}

TEST_CASE("eval trivial cases") {
  const auto truth = one_subject({{0, 0, 1.0, 0.5}, {0, 1, 2.0, -1.0}, {0, 0, 3.0, 2.0}}, 2);
  Forecast fc;
  for (const auto &o : truth.records())
    fc.rows.push_back({"a", "t" + std::to_string(o.task), o.time, o.value, 0.0, o.value, o.value});
  SUBCASE("perfect forecast") {
    const auto m = evaluate(fc, truth, {50, 0});
    CHECK(m.at("macro").at("rmse").at("value").get<double>() == 0.0);
    CHECK(m.at("macro").at("coverage95").at("value").get<double>() == 1.0);
    CHECK(m.at("per_task").at("t0").at("n").get<long>() == 2);
  }
  SUBCASE("unbounded intervals always cover") {
    for (auto &r : fc.rows) {
      r.mean += 3.0;
      r.lo95 = -std::numeric_limits<double>::infinity();
      r.hi95 = std::numeric_limits<double>::infinity();
    }
    const auto m = evaluate(fc, truth, {50, 0});
    CHECK(m.at("macro").at("coverage95").at("value").get<double>() == 1.0);
    CHECK(m.at("macro").at("rmse").at("value").get<double>() == doctest::Approx(3.0));
  }
  SUBCASE("misaligned rows are rejected") {
    fc.rows[1].time = 2.5;
    CHECK_THROWS_AS(evaluate(fc, truth), DataError);
  }
}

TEST_CASE("constant-zero forecast on unit-variance data has rmse near one") {
  const ObservationSet obs = simulate(2, 400, 5, 31);
  Forecast fc;
  for (const auto &o : obs.records())
    fc.rows.push_back({obs.subject_labels()[static_cast<std::size_t>(o.subject)],
                       obs.task_names()[static_cast<std::size_t>(o.task)], o.time, 0.0, 1.0, -1.96, 1.96});
  const auto m = evaluate(fc, obs, {100, 0});
  // unit prior variance plus 0.01 noise
  CHECK(m.at("macro").at("rmse").at("value").get<double>() == doctest::Approx(std::sqrt(1.01)).epsilon(0.05));
}

TEST_CASE("fits are deterministic and echo the resolved config") {
  const ObservationSet obs = simulate(3, 20, 8, 17);
  RunConfig c = quick_config(FitMode::StructGP);
  c.transform = true;
  const ModelBundle a = fit_model(obs, c);
  const ModelBundle b = fit_model(obs, c);
  auto ja = a.to_json(), jb = b.to_json();
  ja["diagnostics"].erase("seconds");
  jb["diagnostics"].erase("seconds");
  CHECK(ja == jb);
  CHECK(ja.at("config") == c.to_json());
  CHECK(RunConfig::from_json(ja.at("config")).to_json() == c.to_json());

  const auto path = std::filesystem::temp_directory_path() / "structgp_test_bundle.json";
  a.save(path);
  const ModelBundle back = ModelBundle::load(path);
  std::filesystem::remove(path);
  CHECK(back.graph.S == a.graph.S);
  CHECK(back.structure->adjacency == a.structure->adjacency);
  const Forecast fa = predict(a, obs, obs, {5.0, 5.0});
  const Forecast fb = predict(back, obs, obs, {5.0, 5.0});
  CHECK(fa.to_csv_string() == fb.to_csv_string());
  CHECK(fa.to_csv_string() == predict(a, obs, obs, {5.0, 5.0}).to_csv_string());
}

TEST_CASE("inverse transform maps forecasts back to the data scale") {
  ObservationSet obs = simulate(2, 30, 8, 19);
  std::vector<Observation> recs = obs.records();
  for (auto &o : recs) o.value = std::exp(o.value) + 10.0;
  obs = ObservationSet(recs, obs.num_subjects(), obs.num_tasks(), obs.subject_labels(), obs.task_names());
  RunConfig c = quick_config(FitMode::Independent);
  c.transform = true;
  const ModelBundle b = fit_model(obs, c);
  REQUIRE(b.transform);
  const Forecast fc = predict(b, obs, obs, {6.0, 6.0});
  REQUIRE(!fc.rows.empty());
  for (const auto &r : fc.rows) {
    CHECK(r.mean > 10.0);
    CHECK(r.lo95 <= r.mean);
    CHECK(r.mean <= r.hi95);
  }
}

TEST_CASE("mode lattice on training likelihood") {
  const ObservationSet obs = simulate(3, 40, 10, 23);
  RunConfig c = quick_config(FitMode::Independent);
  c.steps = 400;
  c.inner_steps = 150;
  const double ind = fit_model(obs, c).diagnostics.at("nmll").get<double>();
  c.mode = FitMode::StructGP;
  const double sgp = fit_model(obs, c).diagnostics.at("nmll").get<double>();
  c.mode = FitMode::NoStructure;
  const double free = fit_model(obs, c).diagnostics.at("nmll").get<double>();
  MESSAGE("independent " << ind << " structgp " << sgp << " no-structure " << free);
  CHECK(sgp <= ind + 1e-6);
  CHECK(free <= sgp + 1e-6);
}

TEST_CASE("recovery experiment writes its artifacts") {
  SimConfig s;
  s.k = 3;
  s.r = 20;
  s.obs_per_task = 6;
  s.repetitions = 2;
  RunConfig c = quick_config(FitMode::StructGP);
  RecoveryOptions ro;
  ro.subject_counts = {20};
  ro.output_dir = std::filesystem::temp_directory_path() / "structgp_test_recovery";
  const auto res = recovery_experiment(s, c, ro);
  REQUIRE(res.records.size() == 2);
  for (const auto &r : res.records) {
    CHECK(r.ok);
    CHECK(r.h_thresholded == 0.0);
  }
  CHECK(std::filesystem::exists(*ro.output_dir / "recovery_records.jsonl"));
  CHECK(std::filesystem::exists(*ro.output_dir / "recovery_summary.csv"));
  CHECK(res.summary.at("config") == c.to_json());
  std::filesystem::remove_all(*ro.output_dir);
}
