#pragma once

#include <Eigen/Dense>
#include <string>

namespace structgp {

/// Cholesky factor of a symmetric matrix, possibly after adding jitter to the
/// diagonal.
struct CholeskyFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;

  double logdet() const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd &rhs) const { return llt.solve(rhs); }
  Eigen::VectorXd solve(const Eigen::VectorXd &rhs) const { return llt.solve(rhs); }
  Eigen::MatrixXd inverse() const;
};

/// Jitter schedule: none first, then 1e-8, 1e-7, ..., 1e-4. Throws
/// NumericalError (with the smallest eigenvalue) when every attempt fails.
CholeskyFactor robust_cholesky(const Eigen::MatrixXd &K,
                               const std::string &context = "covariance");

inline constexpr double kMinJitter = 1e-8;
inline constexpr double kMaxJitter = 1e-4;

}  // namespace structgp
