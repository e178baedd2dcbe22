#include "structgp/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "structgp/errors.hpp"
#include "structgp/gp.hpp"
#include "structgp/hsgp.hpp"
#include "structgp/linalg.hpp"

namespace structgp {

namespace {

Eigen::VectorXd standard_normal(Eigen::Index n, std::mt19937_64 &rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd e(n);
  for (Eigen::Index i = 0; i < n; ++i) e(i) = z(rng);
  return e;
}

Eigen::VectorXd draw_gaussian(const Eigen::MatrixXd &K, std::mt19937_64 &rng) {
  const auto chol = robust_cholesky(K, "simulation covariance");
  return chol.llt.matrixL() * standard_normal(K.rows(), rng);
}

double entropy(const std::map<int, int> &counts, double n) {
  double h = 0.0;
  for (const auto &[label, c] : counts) {
    const double q = c / n;
    h -= q * std::log(q);
  }
  return h;
}

double choose2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace

void SimConfig::validate() const {
  if (k < 1 || r < 1 || obs_per_task < 1) throw ConfigError("k, r and obs_per_task must be >= 1");
  if (mean_degree < 0.0 || (k > 1 && mean_degree > k - 1))
    throw ConfigError("mean degree must lie in [0, k - 1]");
  if (!(weight_lo >= 0.0 && weight_hi >= weight_lo)) throw ConfigError("invalid weight range");
  if (!(logl_hi >= logl_lo) || !(t_hi > t_lo) || t_lo < 0.0)
    throw ConfigError("invalid lengthscale or time range");
  if (!(noise_var >= 0.0)) throw ConfigError("noise variance must be >= 0");
  if (p < 0) throw ConfigError("pathway count must be >= 0");
  if (!(latent_weight >= 0.0 && individual_weight >= 0.0))
    throw ConfigError("mixture weights must be >= 0");
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
}

nlohmann::json SimConfig::to_json() const {
  return {{"k", k},
          {"r", r},
          {"obs_per_task", obs_per_task},
          {"mean_degree", mean_degree},
          {"weight_lo", weight_lo},
          {"weight_hi", weight_hi},
          {"logl_lo", logl_lo},
          {"logl_hi", logl_hi},
          {"t_lo", t_lo},
          {"t_hi", t_hi},
          {"noise_var", noise_var},
          {"p", p},
          {"latent_weight", latent_weight},
          {"individual_weight", individual_weight},
          {"tau_range", tau_range},
          {"logl_sub_lo", logl_sub_lo},
          {"logl_sub_hi", logl_sub_hi},
          {"exact_latent_max", exact_latent_max},
          {"latent_basis", latent_basis},
          {"seed", seed},
          {"repetitions", repetitions}};
}

SimConfig SimConfig::from_json(const nlohmann::json &j) {
  SimConfig c;
  c.k = j.value("k", c.k);
  c.r = j.value("r", c.r);
  c.obs_per_task = j.value("obs_per_task", c.obs_per_task);
  c.mean_degree = j.value("mean_degree", c.mean_degree);
  c.weight_lo = j.value("weight_lo", c.weight_lo);
  c.weight_hi = j.value("weight_hi", c.weight_hi);
  c.logl_lo = j.value("logl_lo", c.logl_lo);
  c.logl_hi = j.value("logl_hi", c.logl_hi);
  c.t_lo = j.value("t_lo", c.t_lo);
  c.t_hi = j.value("t_hi", c.t_hi);
  c.noise_var = j.value("noise_var", c.noise_var);
  c.p = j.value("p", c.p);
  c.latent_weight = j.value("latent_weight", c.latent_weight);
  c.individual_weight = j.value("individual_weight", c.individual_weight);
  c.tau_range = j.value("tau_range", c.tau_range);
  c.logl_sub_lo = j.value("logl_sub_lo", c.logl_sub_lo);
  c.logl_sub_hi = j.value("logl_sub_hi", c.logl_sub_hi);
  c.exact_latent_max = j.value("exact_latent_max", c.exact_latent_max);
  c.latent_basis = j.value("latent_basis", c.latent_basis);
  c.seed = j.value("seed", c.seed);
  c.repetitions = j.value("repetitions", c.repetitions);
  c.validate();
  return c;
}

SampledDag sample_dag(int k, double mean_degree, std::mt19937_64 &rng, double weight_lo,
                      double weight_hi) {
  const double pe = k > 1 ? mean_degree / (k - 1) : 0.0;
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> position(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) position[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  std::uniform_real_distribution<double> unit(0.0, 1.0), mag(weight_lo, weight_hi);
  SampledDag dag;
  dag.adjacency = Adjacency::Constant(k, k, false);
  dag.weights = Eigen::MatrixXd::Zero(k, k);
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) {
      if (unit(rng) >= pe) continue;
      const bool a_first = position[static_cast<std::size_t>(a)] < position[static_cast<std::size_t>(b)];
      const int u = a_first ? a : b, v = a_first ? b : a;  // edge u -> v
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      dag.adjacency(v, u) = true;
      dag.weights(v, u) = sign * mag(rng);
    }
  dag.order = *topological_order(dag.adjacency);
  return dag;
}

nlohmann::json GroundTruth::to_json() const {
  const auto k = static_cast<int>(adjacency.rows());
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(k), std::vector<int>(k, 0));
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u) adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)] = adjacency(v, u);
  nlohmann::json j = {{"graph", params.to_json()},
                      {"orientation", "adjacency[target][source]"},
                      {"adjacency", adj},
                      {"order", *topological_order(adjacency)}};
  if (pathways) {
    j["pathways"] = pathways->to_json();
    j["assignment"] = assignment;
  }
  return j;
}

GroundTruth GroundTruth::from_json(const nlohmann::json &j) {
  GroundTruth t;
  t.params = GraphParams::from_json(j.at("graph"));
  const auto adj = j.at("adjacency").get<std::vector<std::vector<int>>>();
  const int k = t.params.num_tasks();
  if (static_cast<int>(adj.size()) != k) throw DataError("ground truth adjacency has wrong size");
  t.adjacency = Adjacency::Constant(k, k, false);
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u)
      t.adjacency(v, u) = adj[static_cast<std::size_t>(v)].at(static_cast<std::size_t>(u)) != 0;
  if (j.contains("pathways")) {
    t.pathways = PathwayParams::from_json(j.at("pathways"));
    t.assignment = j.at("assignment").get<std::vector<int>>();
  }
  return t;
}

GroundTruth sample_ground_truth(const SimConfig &cfg, std::mt19937_64 &rng) {
  cfg.validate();
  GroundTruth t;
  const auto dag = sample_dag(cfg.k, cfg.mean_degree, rng, cfg.weight_lo, cfg.weight_hi);
  t.adjacency = dag.adjacency;
  t.params = GraphParams::identity(cfg.k, std::sqrt(cfg.noise_var));
  t.params.S += dag.weights;
  std::uniform_real_distribution<double> logl(cfg.logl_lo, cfg.logl_hi);
  for (int u = 0; u < cfg.k; ++u) t.params.logL.col(u).setConstant(logl(rng));
  if (cfg.p > 0) {
    const double total = cfg.latent_weight + cfg.individual_weight;
    PathwayParams pw = PathwayParams::uniform(cfg.r, cfg.p, cfg.latent_weight / total);
    std::uniform_int_distribution<int> which(0, cfg.p - 1);
    std::uniform_real_distribution<double> tau(-cfg.tau_range, cfg.tau_range),
        logls(cfg.logl_sub_lo, cfg.logl_sub_hi);
    t.assignment.resize(static_cast<std::size_t>(cfg.r));
    for (int i = 0; i < cfg.r; ++i) {
      const int u = which(rng);
      t.assignment[static_cast<std::size_t>(i)] = u;
      for (int q = 0; q < cfg.p; ++q) {
        pw.logits(i, q) = q == u ? 0.0 : -1e3;
        pw.logL_sub(i, q) = logls(rng);
        pw.tau(i, q) = tau(rng);
      }
    }
    t.pathways = std::move(pw);
  }
  return t;
}

ObservationSet sample_trajectories(const GroundTruth &truth, const SimConfig &cfg,
                                   std::mt19937_64 &rng) {
  cfg.validate();
  const int k = truth.params.num_tasks();
  const int r = truth.pathways ? truth.pathways->num_subjects() : cfg.r;
  const StandardizedGraphParams sp = standardize(truth.params);
  std::uniform_real_distribution<double> time(cfg.t_lo, cfg.t_hi);
  std::vector<Observation> recs;
  recs.reserve(static_cast<std::size_t>(r * k * cfg.obs_per_task));
  for (int i = 0; i < r; ++i)
    for (int v = 0; v < k; ++v)
      for (int n = 0; n < cfg.obs_per_task; ++n) recs.push_back({i, v, time(rng), 0.0});

  const double individual =
      truth.pathways ? 1.0 - truth.pathways->gamma : 1.0;
  std::size_t start = 0;
  while (start < recs.size()) {
    std::size_t stop = start;
    while (stop < recs.size() && recs[stop].subject == recs[start].subject) ++stop;
    const auto coords = task_times(std::span<const Observation>(recs.data() + start, stop - start));
    Eigen::MatrixXd K = individual * assemble_covariance(sp, coords, coords);
    const Eigen::VectorXd y = draw_gaussian(K, rng);
    for (std::size_t a = start; a < stop; ++a) recs[a].value = y(static_cast<Eigen::Index>(a - start));
    start = stop;
  }

  if (truth.pathways && truth.pathways->gamma > 0.0) {
    const PathwayParams &pw = *truth.pathways;
    if (static_cast<int>(recs.size()) <= cfg.exact_latent_max) {
      Eigen::MatrixXd K = assemble_lp_covariance(sp, pw, recs, recs);
      for (std::size_t a = 0; a < recs.size(); ++a)
        for (std::size_t b = 0; b < recs.size(); ++b)
          if (recs[a].subject == recs[b].subject)
            K(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) -=
                individual * cross_cov(sp, recs[a].task, recs[b].task, recs[a].time - recs[b].time);
      const Eigen::VectorXd y = draw_gaussian(0.5 * (K + K.transpose()), rng);
      for (std::size_t a = 0; a < recs.size(); ++a) recs[a].value += y(static_cast<Eigen::Index>(a));
    } else {
      HSGPConfig hc;
      hc.m = cfg.latent_basis;
      hc.boundary_factor = 3.0;
      const auto domain = make_domain(hc, cfg.t_lo, cfg.t_hi, cfg.tau_range);
      const Eigen::MatrixXd Phi = lp_features(sp, pw, recs, domain);
      const Eigen::VectorXd y = Phi * standard_normal(Phi.cols(), rng);
      for (std::size_t a = 0; a < recs.size(); ++a) recs[a].value += y(static_cast<Eigen::Index>(a));
    }
  }

  if (cfg.noise_var > 0.0) {
    std::normal_distribution<double> eps(0.0, std::sqrt(cfg.noise_var));
    for (auto &o : recs) o.value += eps(rng);
  }
  return ObservationSet(std::move(recs), r, k);
}

std::mt19937_64 repetition_rng(std::uint64_t seed, std::uint64_t repetition) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(repetition),
                    static_cast<std::uint32_t>(repetition >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

int shd(const Adjacency &truth, const Adjacency &estimate) {
  if (truth.rows() != estimate.rows()) throw DataError("graphs differ in size");
  int d = 0;
  for (Eigen::Index a = 0; a < truth.rows(); ++a)
    for (Eigen::Index b = a + 1; b < truth.rows(); ++b)
      if (truth(a, b) != estimate(a, b) || truth(b, a) != estimate(b, a)) ++d;
  return d;
}

EdgeScores edge_scores(const Adjacency &truth, const Adjacency &estimate) {
  if (truth.rows() != estimate.rows()) throw DataError("graphs differ in size");
  int tp = 0, n_true = 0, n_est = 0;
  for (Eigen::Index v = 0; v < truth.rows(); ++v)
    for (Eigen::Index u = 0; u < truth.cols(); ++u) {
      if (u == v) continue;
      n_true += truth(v, u);
      n_est += estimate(v, u);
      tp += truth(v, u) && estimate(v, u);
    }
  EdgeScores s;
  if (n_true == 0 && n_est == 0) return {1.0, 1.0, 1.0};
  s.precision = n_est ? static_cast<double>(tp) / n_est : 0.0;
  s.recall = n_true ? static_cast<double>(tp) / n_true : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                                      : 0.0;
  return s;
}

double edge_f1(const Adjacency &truth, const Adjacency &estimate) {
  return edge_scores(truth, estimate).f1;
}

double ari(const std::vector<int> &truth, const std::vector<int> &estimate) {
  if (truth.size() != estimate.size()) throw DataError("label vectors differ in length");
  const double n = static_cast<double>(truth.size());
  std::map<std::pair<int, int>, int> table;
  std::map<int, int> rows, cols;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++table[{truth[i], estimate[i]}];
    ++rows[truth[i]];
    ++cols[estimate[i]];
  }
  double index = 0.0, a = 0.0, b = 0.0;
  for (const auto &[key, c] : table) index += choose2(c);
  for (const auto &[key, c] : rows) a += choose2(c);
  for (const auto &[key, c] : cols) b += choose2(c);
  const double expected = a * b / choose2(n);
  const double max_index = 0.5 * (a + b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

double nmi(const std::vector<int> &truth, const std::vector<int> &estimate) {
  if (truth.size() != estimate.size()) throw DataError("label vectors differ in length");
  const double n = static_cast<double>(truth.size());
  std::map<std::pair<int, int>, int> table;
  std::map<int, int> rows, cols;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++table[{truth[i], estimate[i]}];
    ++rows[truth[i]];
    ++cols[estimate[i]];
  }
  const double hu = entropy(rows, n), hv = entropy(cols, n);
  if (hu + hv == 0.0) return 0.0;
  double mi = 0.0;
  for (const auto &[key, c] : table) {
    const double pij = c / n;
    mi += pij * std::log(pij * n * n / (static_cast<double>(rows[key.first]) * cols[key.second]));
  }
  return std::clamp(mi / (0.5 * (hu + hv)), 0.0, 1.0);
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.median = quantile(0.5);
  s.q25 = quantile(0.25);
  s.q75 = quantile(0.75);
  return s;
}

}  // namespace structgp
