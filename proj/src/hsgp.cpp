#include "structgp/hsgp.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "structgp/errors.hpp"

namespace structgp {

namespace {

constexpr double kPi = std::numbers::pi;

void check_inside(const HSGPDomain &domain, double t) {
  if (!domain.contains(t)) {
    std::ostringstream msg;
    msg << "time " << t << " lies outside the approximation domain [" << domain.center - domain.L
        << ", " << domain.center + domain.L << "]";
    throw DataError(msg.str());
  }
}

}  // namespace

HSGPDomain make_domain(const HSGPConfig &cfg, double t_min, double t_max, double margin) {
  if (cfg.m < 1) throw ConfigError("HSGP basis count must be >= 1");
  if (!(cfg.boundary_factor >= 1.0)) throw ConfigError("HSGP boundary factor must be >= 1");
  HSGPDomain d;
  d.m = cfg.m;
  d.center = 0.5 * (t_min + t_max);
  const double half = std::max(0.5 * (t_max - t_min) + margin, 1e-6);
  d.L = cfg.boundary_factor * half * (1.0 + 1e-9);
  return d;
}

double Eigenpair::operator()(double x) const { return std::sin(omega * (x + L)) / std::sqrt(L); }

double Eigenpair::derivative(double x) const {
  return omega * std::cos(omega * (x + L)) / std::sqrt(L);
}

Eigenpair eigenpair(int j, double L) {
  Eigenpair e;
  e.L = L;
  e.omega = kPi * j / (2.0 * L);
  e.lambda = e.omega * e.omega;
  return e;
}

double se_spectral_density(double alpha, double ell_se, double omega) {
  return alpha * std::sqrt(2.0 * kPi) * ell_se * std::exp(-0.5 * ell_se * ell_se * omega * omega);
}

double filter_spectrum(double amplitude, double ell, double omega) {
  return amplitude * std::sqrt(kPi * ell) * std::exp(-ell * omega * omega / 4.0);
}

FeatureMatrix structured_features(const StandardizedGraphParams &params,
                                  std::span<const TaskTime> coords, const HSGPDomain &domain) {
  const int k = params.num_tasks();
  const int m = domain.m;
  FeatureMatrix f;
  f.m = m;
  f.sources = k;
  f.Phi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(coords.size()), k * m);
  for (std::size_t a = 0; a < coords.size(); ++a) {
    const double x = coords[a].time - domain.center;
    check_inside(domain, coords[a].time);
    const int v = coords[a].task;
    for (int j = 1; j <= m; ++j) {
      const auto e = eigenpair(j, domain.L);
      const double phi = e(x);
      for (int u = 0; u < k; ++u) {
        const double s = params.S_tilde(v, u);
        if (s == 0.0) continue;
        f.Phi(static_cast<Eigen::Index>(a), u * m + j - 1) =
            filter_spectrum(s, std::exp(params.logL(v, u)), e.omega) * phi;
      }
    }
  }
  return f;
}

Eigen::MatrixXd lp_features(const StandardizedGraphParams &graph, const PathwayParams &pw,
                            std::span<const Observation> records, const HSGPDomain &domain) {
  const int k = graph.num_tasks();
  const int m = domain.m;
  const int p = pw.p;
  const double sg = std::sqrt(pw.gamma);
  const Eigen::MatrixXd pi = pw.weights();
  Eigen::MatrixXd Phi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(records.size()), p * k * m);
  std::vector<Eigenpair> eig(static_cast<std::size_t>(m));
  for (int j = 1; j <= m; ++j) eig[static_cast<std::size_t>(j - 1)] = eigenpair(j, domain.L);
  for (std::size_t a = 0; a < records.size(); ++a) {
    const int i = records[a].subject, v = records[a].task;
    const auto row = static_cast<Eigen::Index>(a);
    for (int u = 0; u < p; ++u) {
      const double shifted = records[a].time - pw.tau(i, u);
      check_inside(domain, shifted);
      const double x = shifted - domain.center;
      const double ls = std::exp(pw.logL_sub(i, u));
      for (int j = 0; j < m; ++j) {
        const auto &e = eig[static_cast<std::size_t>(j)];
        const double g = sg * pi(i, u) * filter_spectrum(1.0, ls, e.omega) * e(x);
        if (g == 0.0) continue;
        for (int q = 0; q < k; ++q) {
          const double s = graph.S_tilde(v, q);
          if (s == 0.0) continue;
          Phi(row, (u * k + q) * m + j) = g * filter_spectrum(s, std::exp(graph.logL(v, q)), e.omega);
        }
      }
    }
  }
  return Phi;
}

void accumulate_lp_feature_gradient(const StandardizedGraphParams &graph,
                                    const PathwayParams &pw, std::span<const Observation> records,
                                    const HSGPDomain &domain, const Eigen::MatrixXd &G,
                                    StandardizedGradient &graph_grad, PathwayGradient &pw_grad) {
  const int k = graph.num_tasks();
  const int m = domain.m;
  const int p = pw.p;
  const double sg = std::sqrt(pw.gamma);
  const Eigen::MatrixXd pi = pw.weights();
  std::vector<Eigenpair> eig(static_cast<std::size_t>(m));
  for (int j = 1; j <= m; ++j) eig[static_cast<std::size_t>(j - 1)] = eigenpair(j, domain.L);
  for (std::size_t a = 0; a < records.size(); ++a) {
    const int i = records[a].subject, v = records[a].task;
    const auto row = static_cast<Eigen::Index>(a);
    for (int u = 0; u < p; ++u) {
      const double x = records[a].time - pw.tau(i, u) - domain.center;
      const double ls = std::exp(pw.logL_sub(i, u));
      for (int j = 0; j < m; ++j) {
        const auto &e = eig[static_cast<std::size_t>(j)];
        const double w2 = e.omega * e.omega;
        const double gs = sg * filter_spectrum(1.0, ls, e.omega);
        const double phi = e(x), dphi = e.derivative(x);
        for (int q = 0; q < k; ++q) {
          const double s = graph.S_tilde(v, q);
          const double gcol = G(row, (u * k + q) * m + j);
          if (gcol == 0.0) continue;
          const double ell = std::exp(graph.logL(v, q));
          const double hq = filter_spectrum(1.0, ell, e.omega);  // per unit amplitude
          const double base = gs * hq * gcol;                     // without pi, S, phi
          const double f = base * pi(i, u) * s * phi;             // G * feature
          pw_grad.logits(i, u) += base * s * phi;
          graph_grad.S_tilde(v, q) += base * pi(i, u) * phi;
          graph_grad.ell(v, q) += f * (0.5 / ell - w2 / 4.0);
          pw_grad.logL_sub(i, u) += f * (0.5 - ls * w2 / 4.0);
          pw_grad.tau(i, u) -= base * pi(i, u) * s * dphi;
        }
      }
    }
  }
}

}  // namespace structgp
