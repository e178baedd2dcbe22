#include "structgp/structure.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

#include <unsupported/Eigen/MatrixFunctions>

#include "structgp/errors.hpp"

namespace structgp {

double acyclicity(const Eigen::MatrixXd &S, Eigen::MatrixXd *grad) {
  Eigen::MatrixXd W = S;
  W.diagonal().setZero();
  const Eigen::MatrixXd E = W.cwiseProduct(W).exp();
  if (grad) *grad = 2.0 * E.transpose().cwiseProduct(W);
  if (is_acyclic(support(W))) return 0.0;
  return E.trace() - static_cast<double>(S.rows());
}

Adjacency support(const Eigen::MatrixXd &S, double tol) {
  Adjacency a = (S.array().abs() > tol).matrix();
  a.diagonal().setConstant(false);
  return a;
}

std::optional<std::vector<int>> topological_order(const Adjacency &adj) {
  const auto k = static_cast<int>(adj.rows());
  std::vector<int> indegree(static_cast<std::size_t>(k), 0);
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u)
      if (u != v && adj(v, u)) ++indegree[static_cast<std::size_t>(v)];
  std::deque<int> ready;
  for (int v = 0; v < k; ++v)
    if (indegree[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
  std::vector<int> order;
  while (!ready.empty()) {
    const int u = ready.front();
    ready.pop_front();
    order.push_back(u);
    for (int v = 0; v < k; ++v)
      if (v != u && adj(v, u) && --indegree[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
  }
  if (static_cast<int>(order.size()) != k) return std::nullopt;
  return order;
}

bool is_acyclic(const Adjacency &adj) { return topological_order(adj).has_value(); }

int edge_count(const Adjacency &adj) {
  int n = 0;
  for (Eigen::Index v = 0; v < adj.rows(); ++v)
    for (Eigen::Index u = 0; u < adj.cols(); ++u) n += (u != v && adj(v, u)) ? 1 : 0;
  return n;
}

double smooth_l1(const Eigen::MatrixXd &S, const PenaltyConfig &cfg, Eigen::MatrixXd *grad) {
  const double b = cfg.beta_l1;
  double sum = 0.0;
  if (grad) *grad = Eigen::MatrixXd::Zero(S.rows(), S.cols());
  for (Eigen::Index v = 0; v < S.rows(); ++v)
    for (Eigen::Index u = 0; u < S.cols(); ++u) {
      if (u == v) continue;
      const double z = std::abs(b * S(v, u));
      // softplus(z) + softplus(-z) = z + 2 log1p(e^{-z})
      sum += (z + 2.0 * std::log1p(std::exp(-z))) / b;
      if (grad) (*grad)(v, u) = cfg.lambda * std::tanh(0.5 * b * S(v, u));
    }
  return cfg.lambda * sum;
}

AdamState AdamState::make(Eigen::Index n, double lr) {
  AdamState s;
  s.m = Eigen::VectorXd::Zero(n);
  s.v = Eigen::VectorXd::Zero(n);
  s.lr = lr;
  return s;
}

void adam_step(AdamState &state, Eigen::VectorXd &params, const Eigen::VectorXd &grads,
               const std::vector<std::string> *names) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ConfigError("Adam state, parameters and gradients differ in size");
  for (Eigen::Index i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads(i))) {
      const std::string name = names && static_cast<std::size_t>(i) < names->size()
                                   ? (*names)[static_cast<std::size_t>(i)]
                                   : "parameter " + std::to_string(i);
      throw NumericalError("non-finite gradient for " + name);
    }
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -=
      state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

ALResult augmented_lagrangian_fit(const Objective &f, const Objective &g, Eigen::VectorXd theta,
                                  LagrangianState &state, const ALConfig &cfg,
                                  const std::vector<std::string> *names) {
  ALResult res;
  const auto n = theta.size();
  auto solve = [&](Eigen::VectorXd start) {
    const double lr = state.rho >= cfg.lr_halving_rho ? 0.5 * cfg.lr : cfg.lr;
    AdamState adam = AdamState::make(n, lr);
    Eigen::VectorXd gf(n), gg(n);
    for (int step = 0; step < cfg.inner_steps; ++step) {
      gf.setZero();
      gg.setZero();
      const double fv = f(start, &gf);
      const double gv = g(start, &gg);
      if (!std::isfinite(fv) || !std::isfinite(gv))
        throw NumericalError("augmented Lagrangian inner solve diverged (NaN loss)");
      adam_step(adam, start, gf + (state.alpha + state.rho * gv) * gg, names);
    }
    ++res.inner_solves;
    return start;
  };

  double g_prev = std::abs(g(theta, nullptr));
  res.g_trace.push_back(g_prev);
  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    Eigen::VectorXd candidate = theta;
    double g_new = g_prev;
    while (state.rho < state.rho_max) {
      candidate = solve(candidate);
      g_new = std::abs(g(candidate, nullptr));
      if (g_new < cfg.decrease * g_prev || g_new < state.epsilon) break;
      state.rho *= 10.0;
    }
    theta = candidate;
    const double g_signed = g(theta, nullptr);
    res.g_trace.push_back(g_new);
    g_prev = g_new;
    state.alpha += state.rho * g_signed;
    res.outer_iterations = outer + 1;
    if (g_new < state.epsilon || state.rho >= state.rho_max) {
      res.converged = g_new < state.epsilon;
      break;
    }
  }
  res.theta = theta;
  res.f = f(theta, nullptr);
  res.g = g(theta, nullptr);
  return res;
}

nlohmann::json LearnedStructure::to_json(const std::vector<std::string> &task_names) const {
  const auto k = static_cast<int>(adjacency.rows());
  nlohmann::json edges = nlohmann::json::array();
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u)
      if (u != v && adjacency(v, u))
        edges.push_back({{"source", u}, {"target", v}, {"weight", weights(v, u)}});
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(k), std::vector<int>(k, 0));
  std::vector<std::vector<double>> w(static_cast<std::size_t>(k), std::vector<double>(k, 0.0));
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u) {
      adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)] = adjacency(v, u) ? 1 : 0;
      w[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)] = weights(v, u);
    }
  nlohmann::json j = {{"k", k},
                      {"orientation", "adjacency[target][source]"},
                      {"adjacency", adj},
                      {"weights", w},
                      {"edges", edges},
                      {"threshold", threshold},
                      {"order", order},
                      {"nmll", nmll},
                      {"aic", aic},
                      {"aic_pre_threshold", aic_pre_threshold},
                      {"lambda", lambda},
                      {"h_smooth", h_smooth}};
  if (!task_names.empty()) j["task_names"] = task_names;
  return j;
}

LearnedStructure LearnedStructure::from_json(const nlohmann::json &j) {
  LearnedStructure s;
  const int k = j.at("k").get<int>();
  const auto adj = j.at("adjacency").get<std::vector<std::vector<int>>>();
  const auto w = j.at("weights").get<std::vector<std::vector<double>>>();
  if (static_cast<int>(adj.size()) != k || static_cast<int>(w.size()) != k)
    throw DataError("structure JSON has inconsistent sizes");
  s.adjacency = Adjacency::Constant(k, k, false);
  s.weights = Eigen::MatrixXd::Zero(k, k);
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u) {
      s.adjacency(v, u) = adj[static_cast<std::size_t>(v)].at(static_cast<std::size_t>(u)) != 0;
      s.weights(v, u) = w[static_cast<std::size_t>(v)].at(static_cast<std::size_t>(u));
    }
  s.threshold = j.value("threshold", 0.0);
  s.order = j.value("order", std::vector<int>{});
  s.nmll = j.value("nmll", 0.0);
  s.aic = j.value("aic", 0.0);
  s.aic_pre_threshold = j.value("aic_pre_threshold", 0.0);
  s.lambda = j.value("lambda", 0.0);
  s.h_smooth = j.value("h_smooth", 0.0);
  return s;
}

std::string LearnedStructure::to_dot(const std::vector<std::string> &task_names) const {
  const auto k = static_cast<int>(adjacency.rows());
  auto label = [&](int v) {
    return static_cast<std::size_t>(v) < task_names.size() ? task_names[static_cast<std::size_t>(v)]
                                                           : std::to_string(v);
  };
  std::ostringstream out;
  out << "digraph structgp {\n";
  for (int v = 0; v < k; ++v) out << "  n" << v << " [label=\"" << label(v) << "\"];\n";
  for (int v = 0; v < k; ++v)
    for (int u = 0; u < k; ++u)
      if (u != v && adjacency(v, u)) {
        const double w = weights(v, u);
        out << "  n" << u << " -> n" << v << " [weight=" << std::abs(w) << ", label=\"" << w
            << "\", style=" << (w >= 0.0 ? "solid" : "dashed")
            << ", color=" << (w >= 0.0 ? "black" : "red") << "];\n";
      }
  out << "}\n";
  return out.str();
}

LearnedStructure hard_threshold(const Eigen::MatrixXd &S, double min_magnitude) {
  const auto k = S.rows();
  Eigen::MatrixXd W = S;
  W.diagonal().setZero();
  W = (W.array().abs() > min_magnitude).select(W, 0.0);
  std::vector<double> mags;
  for (Eigen::Index v = 0; v < k; ++v)
    for (Eigen::Index u = 0; u < k; ++u)
      if (W(v, u) != 0.0) mags.push_back(std::abs(W(v, u)));
  std::sort(mags.begin(), mags.end());
  mags.erase(std::unique(mags.begin(), mags.end()), mags.end());

  LearnedStructure out;
  if (!is_acyclic(support(W))) {
    // Smallest index j such that dropping every |S| <= mags[j] is acyclic.
    std::size_t lo = 0, hi = mags.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (is_acyclic(support(W, mags[mid])))
        hi = mid;
      else
        lo = mid + 1;
    }
    out.threshold = std::nextafter(mags[lo], std::numeric_limits<double>::infinity());
    W = (W.array().abs() > mags[lo]).select(W, 0.0);
  }
  out.adjacency = support(W);
  out.weights = W;
  out.order = *topological_order(out.adjacency);
  return out;
}

GridResult lambda_grid_search(const std::vector<double> &grid, const GridFit &fit) {
  if (grid.empty()) throw ConfigError("lambda grid is empty");
  GridResult res;
  res.points.reserve(grid.size());
  const Eigen::VectorXd *warm = nullptr;
  std::string last_error;
  for (double lambda : grid) {
    GridPoint p;
    try {
      p = fit(lambda, warm);
      p.ok = true;
    } catch (const NumericalError &e) {
      p.lambda = lambda;
      p.ok = false;
      p.error = e.what();
      last_error = e.what();
    }
    res.points.push_back(std::move(p));
    if (res.points.back().ok) warm = &res.points.back().theta;
  }
  bool any = false;
  for (std::size_t i = 0; i < res.points.size(); ++i) {
    if (!res.points[i].ok) continue;
    if (!any || res.points[i].criterion < res.points[res.best].criterion) res.best = i;
    any = true;
  }
  if (!any) throw NumericalError("every lambda fit failed: " + last_error);
  return res;
}

std::vector<double> log_spaced_grid(double hi, double lo, int n) {
  if (n < 1 || !(hi > 0.0) || !(lo > 0.0)) throw ConfigError("invalid lambda grid");
  std::vector<double> out;
  if (n == 1) return {hi};
  for (int i = 0; i < n; ++i)
    out.push_back(std::exp(std::log(hi) + (std::log(lo) - std::log(hi)) * i / (n - 1)));
  return out;
}

}  // namespace structgp
