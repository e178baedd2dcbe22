#pragma once

#include <span>

#include <Eigen/Dense>

#include "structgp/data.hpp"
#include "structgp/kernel.hpp"
#include "structgp/latent.hpp"

namespace structgp {

struct HSGPConfig {
  int m = 64;
  double boundary_factor = 1.5;
};

/// Centered domain [center - L, center + L] with m basis functions per
/// source.
struct HSGPDomain {
  double center = 0.0;
  double L = 1.0;
  int m = 64;

  bool contains(double t) const { return std::abs(t - center) < L; }
};

/// Center of [t_min, t_max], L = boundary_factor * (half extent + margin).
HSGPDomain make_domain(const HSGPConfig &cfg, double t_min, double t_max, double margin = 0.0);

/// Dirichlet Laplacian eigenpair on [-L, L].
struct Eigenpair {
  double lambda = 0.0;
  double omega = 0.0;  // sqrt(lambda)
  double L = 1.0;

  double operator()(double x) const;
  double derivative(double x) const;
};

Eigenpair eigenpair(int j, double L);

/// alpha sqrt(2 pi) l exp(-l^2 omega^2 / 2)
double se_spectral_density(double alpha, double ell_se, double omega);

/// Fourier transform of S exp(-t^2 / l): S sqrt(pi l) exp(-l omega^2 / 4).
double filter_spectrum(double amplitude, double ell, double omega);

/// Columns are grouped by source: column u * m + (j - 1).
struct FeatureMatrix {
  Eigen::MatrixXd Phi;
  int m = 0;
  int sources = 0;

  int source_of(int col) const { return col / m; }
  int basis_of(int col) const { return col % m + 1; }
};

/// Features whose Gram matrix approximates K(A, A) without noise.
/// Throws DataError when a time lies outside the domain.
FeatureMatrix structured_features(const StandardizedGraphParams &params,
                                  std::span<const TaskTime> coords, const HSGPDomain &domain);

/// Low-rank factor of the gamma-weighted shared-pathway covariance.
/// Column ((u * k) + q) * m + (j - 1) belongs to pathway u, source q, basis j.
Eigen::MatrixXd lp_features(const StandardizedGraphParams &graph, const PathwayParams &pw,
                            std::span<const Observation> records, const HSGPDomain &domain);

/// Given G = dLoss/dPhi for lp_features over `records`, adds the gradient
/// with respect to the graph (standardized) and pathway parameters. As in
/// accumulate_lp_gradient, pw_grad.logits receives dLoss/dpi.
void accumulate_lp_feature_gradient(const StandardizedGraphParams &graph,
                                    const PathwayParams &pw, std::span<const Observation> records,
                                    const HSGPDomain &domain, const Eigen::MatrixXd &G,
                                    StandardizedGradient &graph_grad, PathwayGradient &pw_grad);

}  // namespace structgp
