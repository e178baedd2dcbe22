#include "structgp/linalg.hpp"

#include <cmath>
#include <sstream>

#include "structgp/errors.hpp"

namespace structgp {

double CholeskyFactor::logdet() const {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::MatrixXd CholeskyFactor::inverse() const {
  const auto n = llt.matrixLLT().rows();
  Eigen::MatrixXd Linv = Eigen::MatrixXd::Identity(n, n);
  llt.matrixL().solveInPlace(Linv);
  Eigen::MatrixXd out(n, n);
  out.setZero();
  out.selfadjointView<Eigen::Lower>().rankUpdate(Linv.transpose());
  return out.selfadjointView<Eigen::Lower>();
}

namespace {

bool factor_ok(const Eigen::LLT<Eigen::MatrixXd> &llt) {
  if (llt.info() != Eigen::Success) return false;
  const auto d = llt.matrixLLT().diagonal();
  return d.allFinite() && (d.array() > 0.0).all();
}

}  // namespace

CholeskyFactor robust_cholesky(const Eigen::MatrixXd &K, const std::string &context) {
  if (K.rows() != K.cols()) throw NumericalError(context + ": matrix is not square");
  if (!K.allFinite()) throw NumericalError(context + ": matrix has non-finite entries");
  CholeskyFactor out;
  out.llt.compute(K);
  if (factor_ok(out.llt)) return out;
  Eigen::MatrixXd work = K;
  for (double jitter = kMinJitter; jitter <= kMaxJitter * 1.0000001; jitter *= 10.0) {
    work.diagonal() = K.diagonal().array() + jitter;
    out.llt.compute(work);
    if (factor_ok(out.llt)) {
      out.jitter = jitter;
      return out;
    }
  }
  const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
                             K, Eigen::EigenvaluesOnly)
                             .eigenvalues()
                             .minCoeff();
  std::ostringstream msg;
  msg << context << ": Cholesky failed after jitter " << kMaxJitter
      << " (smallest eigenvalue " << min_eig << ")";
  throw NumericalError(msg.str());
}

}  // namespace structgp
