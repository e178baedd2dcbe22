#include "structgp/gp.hpp"

#include <cmath>
#include <numbers>

#include "structgp/errors.hpp"
#include "structgp/parallel.hpp"

namespace structgp {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

Eigen::MatrixXd NmllTerms::weight() const {
  return 0.5 * (factor.inverse() - alpha * alpha.transpose());
}

NmllTerms nmll_terms(const Eigen::MatrixXd &K, const Eigen::VectorXd &y,
                     const std::string &context) {
  if (K.rows() != y.size()) throw DataError(context + ": covariance and targets differ in size");
  NmllTerms out;
  out.factor = robust_cholesky(K, context);
  out.alpha = out.factor.solve(y);
  out.value = 0.5 * y.dot(out.alpha) + 0.5 * out.factor.logdet() +
              static_cast<double>(y.size()) * kHalfLog2Pi;
  return out;
}

double nmll(const Eigen::MatrixXd &K, const Eigen::VectorXd &y) { return nmll_terms(K, y).value; }

void set_intervals(PosteriorForecast &f) {
  const Eigen::VectorXd sd = f.variance.array().sqrt();
  f.lo95 = f.mean - kZ95 * sd;
  f.hi95 = f.mean + kZ95 * sd;
}

PosteriorForecast posterior_predict(const Eigen::MatrixXd &K, const Eigen::MatrixXd &K_star,
                                    const Eigen::MatrixXd &K_starstar, const Eigen::VectorXd &y,
                                    const Eigen::VectorXd &query_noise, bool full) {
  PosteriorForecast f;
  const auto m = K_star.cols();
  if (K.rows() == 0) {
    f.mean = Eigen::VectorXd::Zero(m);
    f.covariance = K_starstar;
  } else {
    const auto chol = robust_cholesky(K, "training covariance");
    f.mean = K_star.transpose() * chol.solve(y);
    const Eigen::MatrixXd V = chol.llt.matrixL().solve(K_star);
    f.covariance = K_starstar - V.transpose() * V;
  }
  f.variance = f.covariance.diagonal().cwiseMax(0.0);
  if (query_noise.size() == m) f.variance += query_noise;
  if (!full) f.covariance.resize(0, 0);
  set_intervals(f);
  return f;
}

PosteriorForecast posterior_predict_diag(const Eigen::MatrixXd &K, const Eigen::MatrixXd &K_star,
                                         const Eigen::VectorXd &prior_var,
                                         const Eigen::VectorXd &y,
                                         const Eigen::VectorXd &query_noise) {
  PosteriorForecast f;
  if (K.rows() == 0) {
    f.mean = Eigen::VectorXd::Zero(K_star.cols());
    f.variance = prior_var;
  } else {
    const auto chol = robust_cholesky(K, "training covariance");
    f.mean = K_star.transpose() * chol.solve(y);
    const Eigen::MatrixXd V = chol.llt.matrixL().solve(K_star);
    f.variance = (prior_var - V.colwise().squaredNorm().transpose()).cwiseMax(0.0);
  }
  if (query_noise.size() == f.variance.size()) f.variance += query_noise;
  set_intervals(f);
  return f;
}

std::vector<TaskTime> task_times(std::span<const Observation> records) {
  std::vector<TaskTime> out(records.size());
  for (std::size_t a = 0; a < records.size(); ++a) out[a] = {records[a].task, records[a].time};
  return out;
}

Eigen::VectorXd values(std::span<const Observation> records) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(records.size()));
  for (std::size_t a = 0; a < records.size(); ++a)
    y(static_cast<Eigen::Index>(a)) = records[a].value;
  return y;
}

FitDiagnostics blockwise_nmll(const GraphParams &params, const ObservationSet &obs,
                              GraphGradient *grad, std::span<const int> subjects) {
  const StandardizedGraphParams sp = standardize(params);
  std::vector<int> ids(subjects.begin(), subjects.end());
  if (ids.empty())
    for (int s = 0; s < obs.num_subjects(); ++s) ids.push_back(s);
  const int k = params.num_tasks();
  std::vector<double> value(ids.size(), 0.0), jitter(ids.size(), 0.0);
  std::vector<StandardizedGradient> grads(grad ? ids.size() : 0, StandardizedGradient(k));
  parallel_for(ids.size(), [&](std::size_t n) {
    const auto recs = obs.subject_records(ids[n]);
    if (recs.empty()) return;
    const TaskBlocks blocks(task_times(recs), k);
    Eigen::VectorXd y(blocks.size());
    for (Eigen::Index a = 0; a < blocks.size(); ++a)
      y(a) = recs[static_cast<std::size_t>(blocks.order[static_cast<std::size_t>(a)])].value;
    BlockExponentials cache;
    const auto terms =
        nmll_terms(assemble_covariance(sp, blocks, grad ? &cache : nullptr), y,
                   "subject " + obs.subject_labels()[static_cast<std::size_t>(ids[n])]);
    value[n] = terms.value;
    jitter[n] = terms.factor.jitter;
    if (grad) accumulate_kernel_gradient(sp, blocks, terms.weight(), cache, grads[n]);
  });
  FitDiagnostics diag;
  diag.per_subject = value;
  for (std::size_t n = 0; n < ids.size(); ++n) {
    diag.nmll += value[n];
    diag.max_jitter = std::max(diag.max_jitter, jitter[n]);
  }
  if (grad) {
    StandardizedGradient total(k);
    for (const auto &g : grads) total += g;
    *grad += standardize_backward(params, sp, total);
  }
  return diag;
}

FitDiagnostics lp_exact_nmll(const GraphParams &params, const PathwayParams &pw,
                             const ObservationSet &obs, GraphGradient *grad,
                             PathwayGradient *pw_grad) {
  const StandardizedGraphParams sp = standardize(params);
  const auto &recs = obs.records();
  const auto terms =
      nmll_terms(assemble_lp_covariance(sp, pw, recs), values(recs), "joint LP covariance");
  FitDiagnostics diag;
  diag.nmll = terms.value;
  diag.max_jitter = terms.factor.jitter;
  if (grad || pw_grad) {
    const int k = params.num_tasks();
    StandardizedGradient g(k);
    PathwayGradient pg(pw.num_subjects(), pw.p);
    accumulate_lp_gradient(sp, pw, recs, terms.weight(), g, pg);
    if (grad) *grad += standardize_backward(params, sp, g);
    if (pw_grad) {
      pg.logits = softmax_backward(pw.weights(), pg.logits);
      *pw_grad += pg;
    }
  }
  return diag;
}

}  // namespace structgp
