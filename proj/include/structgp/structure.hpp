#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace structgp {

/// Boolean digraph in amplitude orientation: A(v, u) means an edge u -> v
/// (task v is driven by source u). The diagonal is ignored.
using Adjacency = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Tr(exp(S o S)) - k over the off-diagonal part of S. When `grad` is given it
/// receives dh/dS (zero on the diagonal).
double acyclicity(const Eigen::MatrixXd &S, Eigen::MatrixXd *grad = nullptr);

/// Off-diagonal support |S| > tol.
Adjacency support(const Eigen::MatrixXd &S, double tol = 0.0);
/// Kahn order (sources first), or nullopt when the graph has a cycle.
std::optional<std::vector<int>> topological_order(const Adjacency &adj);
bool is_acyclic(const Adjacency &adj);
int edge_count(const Adjacency &adj);

struct PenaltyConfig {
  double lambda = 0.0;
  double beta_l1 = 100.0;
};

/// lambda * sum over off-diagonal entries of
/// (log(1 + e^{b s}) + log(1 + e^{-b s})) / b.
double smooth_l1(const Eigen::MatrixXd &S, const PenaltyConfig &cfg,
                 Eigen::MatrixXd *grad = nullptr);

struct AdamState {
  long step = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState make(Eigen::Index n, double lr);
};

/// Bias-corrected Adam update in place. Throws NumericalError naming the
/// first non-finite gradient entry.
void adam_step(AdamState &state, Eigen::VectorXd &params, const Eigen::VectorXd &grads,
               const std::vector<std::string> *names = nullptr);

struct LagrangianState {
  double alpha = 0.0;
  double rho = 1.0;
  double epsilon = 0.01;
  double rho_max = 1e8;
};

struct ALConfig {
  int inner_steps = 300;
  double lr = 0.02;
  double lr_halving_rho = 1e4;  // lr is halved once rho reaches this value
  int max_outer = 100;
  double decrease = 0.25;
};

/// value(theta, grad*) for the smooth objective or the constraint.
using Objective = std::function<double(const Eigen::VectorXd &, Eigen::VectorXd *)>;

struct ALResult {
  Eigen::VectorXd theta;
  double f = 0.0;
  double g = 0.0;
  int outer_iterations = 0;
  int inner_solves = 0;
  bool converged = false;
  std::vector<double> g_trace;
};

/// Augmented Lagrangian outer loop with an Adam primal solver:
/// minimize f + alpha g + rho/2 g^2, escalate rho x10 until |g| drops below
/// `decrease` times its previous value, then alpha += rho g; stop when
/// |g| < epsilon or rho >= rho_max. Throws NumericalError on a NaN loss.
ALResult augmented_lagrangian_fit(const Objective &f, const Objective &g,
                                  Eigen::VectorXd theta, LagrangianState &state,
                                  const ALConfig &cfg,
                                  const std::vector<std::string> *names = nullptr);

/// Thresholded DAG and fit diagnostics.
struct LearnedStructure {
  Adjacency adjacency;
  Eigen::MatrixXd weights;  // thresholded off-diagonal amplitudes
  double threshold = 0.0;   // entries with |S| < threshold were removed
  std::vector<int> order;
  double nmll = 0.0;
  double aic = 0.0;
  double aic_pre_threshold = 0.0;
  double lambda = 0.0;
  double h_smooth = 0.0;  // smooth acyclicity before thresholding

  int num_edges() const { return edge_count(adjacency); }
  nlohmann::json to_json(const std::vector<std::string> &task_names = {}) const;
  static LearnedStructure from_json(const nlohmann::json &j);
  /// Graphviz digraph; positive edges solid, negative dashed.
  std::string to_dot(const std::vector<std::string> &task_names = {}) const;
};

/// Smallest threshold t over the distinct off-diagonal magnitudes such that
/// dropping every |S| < t leaves an acyclic graph. Entries with
/// |S| <= min_magnitude are dropped beforehand.
LearnedStructure hard_threshold(const Eigen::MatrixXd &S, double min_magnitude = 0.0);

struct GridPoint {
  double lambda = 0.0;
  double criterion = 0.0;
  LearnedStructure structure;
  Eigen::VectorXd theta;
  bool ok = false;
  std::string error;
};

struct GridResult {
  std::vector<GridPoint> points;
  std::size_t best = 0;

  const GridPoint &selected() const { return points[best]; }
};

/// fit(lambda, warm) returns the fitted point for one lambda; `warm` is the
/// previous successful solution (null for the first). Numerical failures of
/// one point are recorded and skipped. Throws NumericalError when all fail.
using GridFit = std::function<GridPoint(double lambda, const Eigen::VectorXd *warm)>;
GridResult lambda_grid_search(const std::vector<double> &grid, const GridFit &fit);

/// n values log-spaced from hi down to lo.
std::vector<double> log_spaced_grid(double hi, double lo, int n);

}  // namespace structgp
