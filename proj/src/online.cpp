#include "structgp/online.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "structgp/errors.hpp"
#include "structgp/parallel.hpp"

namespace structgp {

namespace {

constexpr int kCheckpointVersion = 1;

Eigen::LLT<Eigen::MatrixXd> factor_capacitance(const Eigen::MatrixXd &C) {
  const auto q = C.rows();
  Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd::Identity(q, q) + C);
  if (llt.info() != Eigen::Success || !llt.matrixLLT().diagonal().allFinite()) {
    const double min_eig = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
                               Eigen::MatrixXd::Identity(q, q) + C, Eigen::EigenvaluesOnly)
                               .eigenvalues()
                               .minCoeff();
    throw NumericalError("I + C is not positive definite (smallest eigenvalue " +
                         std::to_string(min_eig) + ")");
  }
  return llt;
}

double llt_logdet(const Eigen::LLT<Eigen::MatrixXd> &llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

AccumulatorState AccumulatorState::fresh(int q, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("accumulator decay must lie in [0, 1]");
  AccumulatorState s;
  s.C = Eigen::MatrixXd::Zero(q, q);
  s.D = Eigen::VectorXd::Zero(q);
  s.beta = beta;
  return s;
}

void AccumulatorState::start_epoch() {
  ++epoch;
  logdetM_running = 0.0;
  logdetIC_prev = llt_logdet(factor_capacitance(beta * C));
}

BatchSolution update_and_solve(AccumulatorState &state, std::span<const Block> batch) {
  const int q = state.width();
  BatchSolution sol;
  sol.blocks.resize(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const Block &b = batch[i];
    if (b.Phi.cols() != q || b.Phi.rows() != b.v.size() || b.M.rows() != b.v.size())
      throw DataError("block " + std::to_string(i) + " does not match the accumulator width");
    BlockSolve &s = sol.blocks[i];
    s.M = robust_cholesky(b.M, "block " + std::to_string(i));
    s.A = s.M.solve(b.v);
    s.B = s.M.solve(b.Phi);
    s.logdetM = s.M.logdet();
  });

  const Eigen::MatrixXd C_prev = state.beta * state.C;
  const Eigen::VectorXd D_prev = state.beta * state.D;
  const auto P_prev = factor_capacitance(C_prev);
  const Eigen::VectorXd E_prev = P_prev.solve(D_prev);

  Eigen::MatrixXd C = C_prev;
  Eigen::VectorXd D = D_prev;
  double logdetM = 0.0, fit = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto &s = sol.blocks[i];
    C.noalias() += batch[i].Phi.transpose() * s.B;
    D.noalias() += batch[i].Phi.transpose() * s.A;
    logdetM += s.logdetM;
    fit += batch[i].v.dot(s.A);
    sol.n += batch[i].v.size();
  }
  C = 0.5 * (C + C.transpose()).eval();
  sol.P = factor_capacitance(C);
  sol.E = sol.P.solve(D);
  for (std::size_t i = 0; i < batch.size(); ++i)
    sol.blocks[i].x = sol.blocks[i].A - sol.blocks[i].B * sol.E;

  const double logdetIC = llt_logdet(sol.P);
  sol.delta_logdet = logdetM + logdetIC - llt_logdet(P_prev);
  sol.quad = fit - D.dot(sol.E) + D_prev.dot(E_prev);

  state.C = std::move(C);
  state.D = std::move(D);
  state.logdetM_running += logdetM;
  state.logdetIC_prev = logdetIC;
  ++state.batches;
  return sol;
}

double conditional_nmll(const BatchSolution &sol) {
  return 0.5 * sol.quad + 0.5 * sol.delta_logdet +
         0.5 * static_cast<double>(sol.n) * std::log(2.0 * std::numbers::pi);
}

std::vector<BlockGradient> conditional_nmll_gradient(const BatchSolution &sol) {
  std::vector<BlockGradient> out(sol.blocks.size());
  const auto q = sol.E.size();
  const Eigen::MatrixXd Pinv = sol.P.solve(Eigen::MatrixXd::Identity(q, q));
  parallel_for(sol.blocks.size(), [&](std::size_t i) {
    const auto &b = sol.blocks[i];
    const Eigen::MatrixXd BP = b.B * Pinv;
    out[i].Phi = BP - b.x * sol.E.transpose();
    out[i].M = 0.5 * (b.M.inverse() - BP * b.B.transpose() - b.x * b.x.transpose());
  });
  return out;
}

nlohmann::json AccumulatorState::to_json() const {
  std::vector<double> c(C.data(), C.data() + C.size());
  return {{"format", "structgp-accumulator"},
          {"version", kCheckpointVersion},
          {"q", width()},
          {"C", c},
          {"D", std::vector<double>(D.data(), D.data() + D.size())},
          {"logdetM_running", logdetM_running},
          {"logdetIC_prev", logdetIC_prev},
          {"beta", beta},
          {"epoch", epoch},
          {"batches", batches}};
}

AccumulatorState AccumulatorState::from_json(const nlohmann::json &j) {
  if (j.value("format", "") != "structgp-accumulator" || j.value("version", 0) != kCheckpointVersion)
    throw DataError("unsupported accumulator checkpoint");
  const int q = j.at("q").get<int>();
  auto s = fresh(q, j.at("beta").get<double>());
  const auto c = j.at("C").get<std::vector<double>>();
  const auto d = j.at("D").get<std::vector<double>>();
  if (static_cast<int>(c.size()) != q * q || static_cast<int>(d.size()) != q)
    throw DataError("accumulator checkpoint has inconsistent sizes");
  s.C = Eigen::Map<const Eigen::MatrixXd>(c.data(), q, q);
  s.D = Eigen::Map<const Eigen::VectorXd>(d.data(), q);
  s.logdetM_running = j.at("logdetM_running").get<double>();
  s.logdetIC_prev = j.at("logdetIC_prev").get<double>();
  s.epoch = j.at("epoch").get<long>();
  s.batches = j.at("batches").get<long>();
  return s;
}

void AccumulatorState::save(const std::filesystem::path &path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << to_json().dump();
}

AccumulatorState AccumulatorState::load(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return from_json(nlohmann::json::parse(in));
}

}  // namespace structgp
