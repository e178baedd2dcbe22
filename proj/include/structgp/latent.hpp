#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "structgp/data.hpp"
#include "structgp/kernel.hpp"

namespace structgp {

/// Subject-to-pathway coupling: softmax logits, log-lengthscales and time
/// shifts per (subject, pathway), plus the gating coefficient gamma that
/// weights the shared-pathway covariance against the subject-specific one.
struct PathwayParams {
  int p = 1;
  Eigen::MatrixXd logits;    // r x p
  Eigen::MatrixXd logL_sub;  // r x p
  Eigen::MatrixXd tau;       // r x p
  double gamma = 0.3;

  int num_subjects() const { return static_cast<int>(logits.rows()); }
  /// Row-wise softmax of the logits.
  Eigen::MatrixXd weights() const;

  static PathwayParams uniform(int r, int p, double gamma = 0.3);
  void validate() const;

  nlohmann::json to_json() const;
  static PathwayParams from_json(const nlohmann::json &j);
};

struct PathwayAssignment {
  std::vector<int> pathway;  // argmax per subject, lowest index on ties
  Eigen::MatrixXd weights;   // r x p

  void write_csv(const std::filesystem::path &path,
                 const std::vector<std::string> &subject_labels) const;
};

/// amp * exp(-(t - tau)^2 / ell)
double subject_filter(double amp, double ell, double tau, double t);

/// Max-subtracted softmax.
Eigen::VectorXd gating_weights(const Eigen::VectorXd &logits);

PathwayAssignment assign_pathways(const PathwayParams &pw);

/// Shared-pathway term between (i, v, t) and (i', w, t') without the gamma
/// factor: sum over pathways u and sources q of the closed-form convolution
/// G_iu * H_vq * H_wq * G_i'u, weighted by pi_iu pi_i'u.
double pathway_cov(const StandardizedGraphParams &graph, const PathwayParams &pw, int i,
                   int i2, int v, int w, double t, double t2);

/// (1 - gamma) delta_ii' cross_cov(v, w, t - t') + gamma pathway_cov(...).
double lp_cross_cov(const StandardizedGraphParams &graph, const PathwayParams &pw, int i,
                    int i2, int v, int w, double t, double t2);

/// Dense LP covariance over observation coordinates; the symmetric overload
/// adds sigma_task^2 on the diagonal.
Eigen::MatrixXd assemble_lp_covariance(const StandardizedGraphParams &graph,
                                       const PathwayParams &pw, std::span<const Observation> A,
                                       std::span<const Observation> B);
Eigen::MatrixXd assemble_lp_covariance(const StandardizedGraphParams &graph,
                                       const PathwayParams &pw, std::span<const Observation> A);

struct PathwayGradient {
  Eigen::MatrixXd logits;
  Eigen::MatrixXd logL_sub;
  Eigen::MatrixXd tau;

  PathwayGradient() = default;
  PathwayGradient(int r, int p)
      : logits(Eigen::MatrixXd::Zero(r, p)),
        logL_sub(Eigen::MatrixXd::Zero(r, p)),
        tau(Eigen::MatrixXd::Zero(r, p)) {}
  PathwayGradient &operator+=(const PathwayGradient &o);
};

/// Converts dLoss/dpi (r x p) into dLoss/dlogits through the softmax.
Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd &weights, const Eigen::MatrixXd &d_pi);

/// Given symmetric W with dLoss = sum_ab W_ab dK_ab for the dense LP
/// covariance over A, adds the gradient with respect to graph and pathway
/// parameters. The pathway gradient receives dLoss/dpi in `logits`; call
/// softmax_backward afterwards.
void accumulate_lp_gradient(const StandardizedGraphParams &graph, const PathwayParams &pw,
                            std::span<const Observation> A, const Eigen::MatrixXd &W,
                            StandardizedGradient &graph_grad, PathwayGradient &pw_grad);

}  // namespace structgp
