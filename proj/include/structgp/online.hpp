#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "structgp/linalg.hpp"

namespace structgp {

/// Discounted low-rank sufficient statistics C = sum Phi^T M^{-1} Phi and
/// D = sum Phi^T M^{-1} y of the blocks seen so far.
struct AccumulatorState {
  Eigen::MatrixXd C;
  Eigen::VectorXd D;
  double logdetM_running = 0.0;
  double logdetIC_prev = 0.0;
  double beta = 1.0;
  long epoch = 0;
  long batches = 0;

  static AccumulatorState fresh(int q, double beta = 1.0);
  int width() const { return static_cast<int>(D.size()); }

  /// Marks an epoch boundary: the running log-determinant baseline restarts.
  void start_epoch();

  nlohmann::json to_json() const;
  static AccumulatorState from_json(const nlohmann::json &j);
  void save(const std::filesystem::path &path) const;
  static AccumulatorState load(const std::filesystem::path &path);
};

/// One block of the low-rank plus block-diagonal system Phi Phi^T + M.
struct Block {
  Eigen::VectorXd v;
  Eigen::MatrixXd Phi;
  Eigen::MatrixXd M;
};

struct BlockSolve {
  CholeskyFactor M;
  Eigen::VectorXd A;  // M^{-1} v
  Eigen::MatrixXd B;  // M^{-1} Phi
  Eigen::VectorXd x;  // A - B E
  double logdetM = 0.0;
};

struct BatchSolution {
  std::vector<BlockSolve> blocks;
  Eigen::LLT<Eigen::MatrixXd> P;  // factor of I + C after the update
  Eigen::VectorXd E;              // (I + C)^{-1} D after the update
  double delta_logdet = 0.0;
  double quad = 0.0;  // conditional quadratic term y^T K^{-1} y
  long n = 0;
};

/// Discounts the state, folds in the batch, and returns the inverse actions
/// x_i for the batch together with the incremental log-determinant.
BatchSolution update_and_solve(AccumulatorState &state, std::span<const Block> batch);

/// Conditional negative log marginal likelihood of the batch given the
/// (discounted) state it was solved against.
double conditional_nmll(const BatchSolution &sol);

/// dL/dPhi_i and dL/dM_i of conditional_nmll with the previous state held
/// fixed.
struct BlockGradient {
  Eigen::MatrixXd Phi;
  Eigen::MatrixXd M;
};
std::vector<BlockGradient> conditional_nmll_gradient(const BatchSolution &sol);

}  // namespace structgp
