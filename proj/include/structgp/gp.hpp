#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "structgp/data.hpp"
#include "structgp/kernel.hpp"
#include "structgp/latent.hpp"
#include "structgp/linalg.hpp"

namespace structgp {

inline constexpr double kZ95 = 1.959963984540054;

struct PosteriorForecast {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  Eigen::VectorXd lo95;
  Eigen::VectorXd hi95;
  Eigen::MatrixXd covariance;  // only filled when requested
};

struct FitDiagnostics {
  double nmll = 0.0;
  std::vector<double> per_subject;
  double max_jitter = 0.0;
  std::vector<double> trace;
};

/// Factor, weights alpha = K^{-1} y and the NMLL of one Gaussian block.
struct NmllTerms {
  double value = 0.0;
  CholeskyFactor factor;
  Eigen::VectorXd alpha;

  /// 1/2 (K^{-1} - alpha alpha^T), the derivative of the NMLL with respect to K.
  Eigen::MatrixXd weight() const;
};

/// K already includes the observation noise.
NmllTerms nmll_terms(const Eigen::MatrixXd &K, const Eigen::VectorXd &y,
                     const std::string &context = "covariance");
double nmll(const Eigen::MatrixXd &K, const Eigen::VectorXd &y);

/// Posterior mean and marginal variances at the query points. `K` includes the
/// training noise; `query_noise` (may be empty) is added to the predictive
/// variances. With `full` the whole posterior covariance is returned too.
PosteriorForecast posterior_predict(const Eigen::MatrixXd &K, const Eigen::MatrixXd &K_star,
                                    const Eigen::MatrixXd &K_starstar, const Eigen::VectorXd &y,
                                    const Eigen::VectorXd &query_noise = {}, bool full = false);
PosteriorForecast posterior_predict_diag(const Eigen::MatrixXd &K, const Eigen::MatrixXd &K_star,
                                         const Eigen::VectorXd &prior_var,
                                         const Eigen::VectorXd &y,
                                         const Eigen::VectorXd &query_noise = {});

/// Fills lo95/hi95 from mean and variance.
void set_intervals(PosteriorForecast &f);

std::vector<TaskTime> task_times(std::span<const Observation> records);
Eigen::VectorXd values(std::span<const Observation> records);

/// Sum of per-subject NMLLs under the StructGP kernel. When `subjects` is
/// non-empty only those subjects are included. Adds dNMLL/d(S, logL, sigma)
/// into `grad` when given.
FitDiagnostics blockwise_nmll(const GraphParams &params, const ObservationSet &obs,
                              GraphGradient *grad = nullptr, std::span<const int> subjects = {});

/// NMLL of the joint LP-StructGP model over all subjects (dense). The pathway
/// gradient is with respect to logits, log-lengthscales and shifts.
FitDiagnostics lp_exact_nmll(const GraphParams &params, const PathwayParams &pw,
                             const ObservationSet &obs, GraphGradient *grad = nullptr,
                             PathwayGradient *pw_grad = nullptr);

}  // namespace structgp
