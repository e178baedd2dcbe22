#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace structgp {

/// Amplitudes S (diagonal = self filters), log-lengthscales and per-task
/// observation noise standard deviations of the inter-task filter bank
/// H_vu(t) = S_vu exp(-t^2 / l_vu).
struct GraphParams {
  Eigen::MatrixXd S;
  Eigen::MatrixXd logL;
  Eigen::VectorXd noise;

  int num_tasks() const { return static_cast<int>(S.rows()); }

  /// Identity amplitudes, unit lengthscales, shared noise.
  static GraphParams identity(int k, double noise_std = 0.0);
  /// Throws ConfigError on shape mismatch or non-finite entries.
  void validate() const;

  nlohmann::json to_json() const;
  static GraphParams from_json(const nlohmann::json &j);
};

/// Amplitudes rescaled so that every task has unit marginal prior variance.
struct StandardizedGraphParams {
  Eigen::MatrixXd S_tilde;
  Eigen::MatrixXd logL;
  Eigen::VectorXd scale;  // s_v
  Eigen::VectorXd noise;

  int num_tasks() const { return static_cast<int>(S_tilde.rows()); }
};

/// Task/time coordinate of one observation within a subject.
struct TaskTime {
  int task = 0;
  double time = 0.0;
};

double filter_value(double amplitude, double ell, double t);

/// Closed-form (H_vu * H_wu)(dt) for two Gaussian filters sharing a source.
double pair_term(double s_vu, double ell_vu, double s_wu, double ell_wu, double dt);

/// Sum of pair terms over all sources u.
double cross_cov(const StandardizedGraphParams &params, int v, int w, double dt);

/// sum_u S_vu^2 sqrt(pi l_vu / 2), the prior variance of task v before
/// standardization.
double prior_variance(const Eigen::MatrixXd &S, const Eigen::MatrixXd &logL, int v);

/// Throws DataError when a row of S is all zero.
StandardizedGraphParams standardize(const GraphParams &params);

/// Cross-covariance block K(A, B) without noise.
Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params,
                                    std::span<const TaskTime> A, std::span<const TaskTime> B);
/// scale * K(A, A) plus sigma_task^2 on the diagonal.
Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params,
                                    std::span<const TaskTime> A, double scale = 1.0);

/// Gradients of a scalar loss with respect to the standardized quantities.
struct StandardizedGradient {
  Eigen::MatrixXd S_tilde;
  Eigen::MatrixXd ell;  // with respect to l_vu (not log)
  Eigen::VectorXd noise;

  explicit StandardizedGradient(int k = 0)
      : S_tilde(Eigen::MatrixXd::Zero(k, k)),
        ell(Eigen::MatrixXd::Zero(k, k)),
        noise(Eigen::VectorXd::Zero(k)) {}
  StandardizedGradient &operator+=(const StandardizedGradient &o);
};

struct GraphGradient {
  Eigen::MatrixXd S;
  Eigen::MatrixXd logL;
  Eigen::VectorXd noise;

  explicit GraphGradient(int k = 0)
      : S(Eigen::MatrixXd::Zero(k, k)),
        logL(Eigen::MatrixXd::Zero(k, k)),
        noise(Eigen::VectorXd::Zero(k)) {}
  GraphGradient &operator+=(const GraphGradient &o);
};

/// Given a symmetric W with dLoss = sum_ab W_ab dK_ab, where K is
/// `scale * K(A, A)` plus noise on the diagonal, adds dLoss with respect to
/// S_tilde, l and sigma into `grad`.
void accumulate_kernel_gradient(const StandardizedGraphParams &params,
                                std::span<const TaskTime> A, const Eigen::MatrixXd &W,
                                double scale, StandardizedGradient &grad);

/// One subject's coordinates grouped by task, with squared time differences
/// cached per pair of task segments. Kernel matrices built from it are in
/// grouped order: row a corresponds to input index order[a].
struct TaskBlocks {
  std::vector<int> order;
  std::vector<int> offset;  // k + 1 segment starts
  std::vector<Eigen::MatrixXd> dt2;  // (v, w) with v <= w, index v * k + w

  TaskBlocks() = default;
  TaskBlocks(std::span<const TaskTime> coords, int k);
  int num_tasks() const { return static_cast<int>(offset.size()) - 1; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(order.size()); }
  int segment_size(int v) const { return offset[static_cast<std::size_t>(v + 1)] - offset[static_cast<std::size_t>(v)]; }
};

/// Per-source exponentials exp(-dt2 / (l_vu + l_wu)) kept between assembly
/// and the gradient pass.
struct BlockExponentials {
  std::vector<Eigen::MatrixXd> e;  // index ((v * k + w) * k + u), v <= w
};

/// scale * K(A, A) plus noise in grouped order; fills `cache` when given.
Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params, const TaskBlocks &blocks,
                                    BlockExponentials *cache = nullptr, double scale = 1.0);

/// Same contract as accumulate_kernel_gradient with W in grouped order.
void accumulate_kernel_gradient(const StandardizedGraphParams &params, const TaskBlocks &blocks,
                                const Eigen::MatrixXd &W, const BlockExponentials &cache,
                                StandardizedGradient &grad, double scale = 1.0);

/// Chains a gradient through standardization back to raw S and log l.
GraphGradient standardize_backward(const GraphParams &params,
                                   const StandardizedGraphParams &std_params,
                                   const StandardizedGradient &grad);

}  // namespace structgp
