#include "structgp/latent.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "structgp/errors.hpp"

namespace structgp {

namespace {

constexpr double kPi = std::numbers::pi;
const double kPi32 = std::pow(std::numbers::pi, 1.5);

Eigen::MatrixXd json_matrix(const nlohmann::json &j, int rows, int cols, const char *name) {
  const auto flat = j.get<std::vector<double>>();
  if (static_cast<int>(flat.size()) != rows * cols)
    throw ConfigError(std::string(name) + " must have r*p row-major entries");
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
  return m;
}

std::vector<double> row_major(const Eigen::MatrixXd &m) {
  std::vector<double> flat;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return flat;
}

// Pathway term for one (u, q) without the pi weights and S_tilde amplitudes:
// pi^{3/2} sqrt(ls1 l1 ls2 l2 / Lambda) exp(-z^2 / Lambda).
struct TripleTerm {
  double value, lambda, z;
};

TripleTerm triple(double ls1, double l1, double ls2, double l2, double dt, double dtau) {
  const double lambda = ls1 + l1 + ls2 + l2;
  const double z = dt - dtau;
  return {kPi32 * std::sqrt(ls1 * l1 * ls2 * l2 / lambda) * std::exp(-z * z / lambda), lambda,
          z};
}

}  // namespace

Eigen::MatrixXd PathwayParams::weights() const {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    out.row(i) = gating_weights(logits.row(i).transpose()).transpose();
  return out;
}

PathwayParams PathwayParams::uniform(int r, int p, double gamma) {
  PathwayParams pw;
  pw.p = p;
  pw.logits = Eigen::MatrixXd::Zero(r, p);
  pw.logL_sub = Eigen::MatrixXd::Zero(r, p);
  pw.tau = Eigen::MatrixXd::Zero(r, p);
  pw.gamma = gamma;
  return pw;
}

void PathwayParams::validate() const {
  if (p < 1) throw ConfigError("pathway count must be >= 1");
  if (logits.cols() != p || logL_sub.cols() != p || tau.cols() != p ||
      logL_sub.rows() != logits.rows() || tau.rows() != logits.rows())
    throw ConfigError("pathway parameter shapes are inconsistent");
  if (!logits.allFinite() || !logL_sub.allFinite() || !tau.allFinite())
    throw ConfigError("pathway parameters must be finite");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
}

nlohmann::json PathwayParams::to_json() const {
  return {{"p", p},
          {"r", num_subjects()},
          {"S_sub", row_major(logits)},
          {"logL_sub", row_major(logL_sub)},
          {"tau", row_major(tau)},
          {"gamma", gamma}};
}

PathwayParams PathwayParams::from_json(const nlohmann::json &j) {
  PathwayParams pw;
  pw.p = j.at("p").get<int>();
  const auto n_logits = j.at("S_sub").size();
  const int r = j.contains("r") ? j.at("r").get<int>()
                                : static_cast<int>(n_logits / static_cast<std::size_t>(pw.p));
  pw.logits = json_matrix(j.at("S_sub"), r, pw.p, "S_sub");
  pw.logL_sub = json_matrix(j.at("logL_sub"), r, pw.p, "logL_sub");
  pw.tau = json_matrix(j.at("tau"), r, pw.p, "tau");
  pw.gamma = j.at("gamma").get<double>();
  pw.validate();
  return pw;
}

void PathwayAssignment::write_csv(const std::filesystem::path &path,
                                  const std::vector<std::string> &subject_labels) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "subject_id,pathway_id";
  for (Eigen::Index u = 0; u < weights.cols(); ++u) out << ",pi_" << u;
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < pathway.size(); ++i) {
    out << (i < subject_labels.size() ? subject_labels[i] : std::to_string(i)) << ','
        << pathway[i];
    for (Eigen::Index u = 0; u < weights.cols(); ++u) {
      std::snprintf(buf, sizeof(buf), "%.17g", weights(static_cast<Eigen::Index>(i), u));
      out << ',' << buf;
    }
    out << '\n';
  }
}

double subject_filter(double amp, double ell, double tau, double t) {
  const double d = t - tau;
  return amp * std::exp(-d * d / ell);
}

Eigen::VectorXd gating_weights(const Eigen::VectorXd &logits) {
  const double top = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - top).exp();
  return e / e.sum();
}

PathwayAssignment assign_pathways(const PathwayParams &pw) {
  PathwayAssignment out;
  out.weights = pw.weights();
  out.pathway.resize(static_cast<std::size_t>(pw.num_subjects()));
  for (int i = 0; i < pw.num_subjects(); ++i) {
    int best = 0;
    for (int u = 1; u < pw.p; ++u)
      if (out.weights(i, u) > out.weights(i, best)) best = u;
    out.pathway[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

double pathway_cov(const StandardizedGraphParams &graph, const PathwayParams &pw, int i,
                   int i2, int v, int w, double t, double t2) {
  const Eigen::VectorXd pi1 = gating_weights(pw.logits.row(i).transpose());
  const Eigen::VectorXd pi2 = gating_weights(pw.logits.row(i2).transpose());
  const int k = graph.num_tasks();
  double sum = 0.0;
  for (int u = 0; u < pw.p; ++u) {
    const double ls1 = std::exp(pw.logL_sub(i, u));
    const double ls2 = std::exp(pw.logL_sub(i2, u));
    const double dtau = pw.tau(i, u) - pw.tau(i2, u);
    double inner = 0.0;
    for (int q = 0; q < k; ++q) {
      const double amp = graph.S_tilde(v, q) * graph.S_tilde(w, q);
      if (amp == 0.0) continue;
      inner += amp * triple(ls1, std::exp(graph.logL(v, q)), ls2, std::exp(graph.logL(w, q)),
                            t - t2, dtau)
                         .value;
    }
    sum += pi1(u) * pi2(u) * inner;
  }
  return sum;
}

double lp_cross_cov(const StandardizedGraphParams &graph, const PathwayParams &pw, int i,
                    int i2, int v, int w, double t, double t2) {
  double out = pw.gamma * pathway_cov(graph, pw, i, i2, v, w, t, t2);
  if (i == i2) out += (1.0 - pw.gamma) * cross_cov(graph, v, w, t - t2);
  return out;
}

Eigen::MatrixXd assemble_lp_covariance(const StandardizedGraphParams &graph,
                                       const PathwayParams &pw, std::span<const Observation> A,
                                       std::span<const Observation> B) {
  Eigen::MatrixXd K(static_cast<Eigen::Index>(A.size()), static_cast<Eigen::Index>(B.size()));
  for (std::size_t a = 0; a < A.size(); ++a)
    for (std::size_t b = 0; b < B.size(); ++b)
      K(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          lp_cross_cov(graph, pw, A[a].subject, B[b].subject, A[a].task, B[b].task, A[a].time,
                       B[b].time);
  return K;
}

Eigen::MatrixXd assemble_lp_covariance(const StandardizedGraphParams &graph,
                                       const PathwayParams &pw,
                                       std::span<const Observation> A) {
  Eigen::MatrixXd K = assemble_lp_covariance(graph, pw, A, A);
  K = 0.5 * (K + K.transpose()).eval();
  for (std::size_t a = 0; a < A.size(); ++a) {
    const double s = graph.noise(A[a].task);
    K(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) += s * s;
  }
  return K;
}

PathwayGradient &PathwayGradient::operator+=(const PathwayGradient &o) {
  logits += o.logits;
  logL_sub += o.logL_sub;
  tau += o.tau;
  return *this;
}

Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd &weights, const Eigen::MatrixXd &d_pi) {
  Eigen::MatrixXd out(weights.rows(), weights.cols());
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    const double dot = weights.row(i).dot(d_pi.row(i));
    out.row(i) = weights.row(i).array() * (d_pi.row(i).array() - dot);
  }
  return out;
}

void accumulate_lp_gradient(const StandardizedGraphParams &graph, const PathwayParams &pw,
                            std::span<const Observation> A, const Eigen::MatrixXd &W,
                            StandardizedGradient &graph_grad, PathwayGradient &pw_grad) {
  const int k = graph.num_tasks();
  const Eigen::MatrixXd pi = pw.weights();
  const double gamma = pw.gamma;

  // Subject-specific part: block-diagonal over subjects, scaled by 1 - gamma.
  {
    std::vector<TaskTime> coords(A.size());
    for (std::size_t a = 0; a < A.size(); ++a) coords[a] = {A[a].task, A[a].time};
    Eigen::MatrixXd W_block = W;
    for (std::size_t a = 0; a < A.size(); ++a)
      for (std::size_t b = 0; b < A.size(); ++b)
        if (A[a].subject != A[b].subject)
          W_block(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = 0.0;
    accumulate_kernel_gradient(graph, coords, W_block, 1.0 - gamma, graph_grad);
  }

  for (std::size_t a = 0; a < A.size(); ++a) {
    for (std::size_t b = 0; b <= a; ++b) {
      const double wgt = (a == b ? 1.0 : 2.0) * gamma *
                         W(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      if (wgt == 0.0) continue;
      const int i1 = A[a].subject, i2 = A[b].subject;
      const int v = A[a].task, w = A[b].task;
      const double dt = A[a].time - A[b].time;
      for (int u = 0; u < pw.p; ++u) {
        const double ls1 = std::exp(pw.logL_sub(i1, u));
        const double ls2 = std::exp(pw.logL_sub(i2, u));
        const double dtau = pw.tau(i1, u) - pw.tau(i2, u);
        const double p12 = pi(i1, u) * pi(i2, u);
        for (int q = 0; q < k; ++q) {
          const double sv = graph.S_tilde(v, q), sw = graph.S_tilde(w, q);
          const double l1 = std::exp(graph.logL(v, q)), l2 = std::exp(graph.logL(w, q));
          const auto tt = triple(ls1, l1, ls2, l2, dt, dtau);
          const double base = wgt * tt.value;  // without pi and S_tilde
          if (base == 0.0) continue;
          const double amp = sv * sw;
          const double full = base * amp * p12;
          pw_grad.logits(i1, u) += base * amp * pi(i2, u);
          pw_grad.logits(i2, u) += base * amp * pi(i1, u);
          graph_grad.S_tilde(v, q) += base * p12 * sw;
          graph_grad.S_tilde(w, q) += base * p12 * sv;
          const double common = -0.5 / tt.lambda + tt.z * tt.z / (tt.lambda * tt.lambda);
          graph_grad.ell(v, q) += full * (0.5 / l1 + common);
          graph_grad.ell(w, q) += full * (0.5 / l2 + common);
          pw_grad.logL_sub(i1, u) += full * (0.5 / ls1 + common) * ls1;
          pw_grad.logL_sub(i2, u) += full * (0.5 / ls2 + common) * ls2;
          const double d_tau = full * 2.0 * tt.z / tt.lambda;
          pw_grad.tau(i1, u) += d_tau;
          pw_grad.tau(i2, u) -= d_tau;
        }
      }
    }
  }
}

}  // namespace structgp
