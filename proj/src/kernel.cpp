#include "structgp/kernel.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "structgp/errors.hpp"

namespace structgp {

namespace {

constexpr double kPi = std::numbers::pi;

// sqrt(pi l1 l2 / (l1 + l2)) written through the harmonic mean so that it
// neither overflows nor loses precision when l1 and l2 differ by many orders
// of magnitude.
double pair_prefactor(double l1, double l2) { return std::sqrt(kPi / (1.0 / l1 + 1.0 / l2)); }

Eigen::MatrixXd json_matrix(const nlohmann::json &j, int k, const char *name) {
  const auto flat = j.get<std::vector<double>>();
  if (static_cast<int>(flat.size()) != k * k)
    throw ConfigError(std::string(name) + " must have k*k row-major entries");
  Eigen::MatrixXd m(k, k);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c) m(r, c) = flat[static_cast<std::size_t>(r * k + c)];
  return m;
}

std::vector<double> row_major(const Eigen::MatrixXd &m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return flat;
}

// Per (v, w, u) coefficients of the kernel K_ab = sum_u c exp(-dt^2 r).
struct PairTable {
  int k;
  std::vector<double> c, r;
  explicit PairTable(const StandardizedGraphParams &p) : k(p.num_tasks()) {
    c.resize(static_cast<std::size_t>(k * k * k));
    r.resize(c.size());
    for (int v = 0; v < k; ++v)
      for (int w = 0; w < k; ++w)
        for (int u = 0; u < k; ++u) {
          const double lv = std::exp(p.logL(v, u));
          const double lw = std::exp(p.logL(w, u));
          c[idx(v, w, u)] = p.S_tilde(v, u) * p.S_tilde(w, u) * pair_prefactor(lv, lw);
          r[idx(v, w, u)] = 1.0 / (lv + lw);
        }
  }
  std::size_t idx(int v, int w, int u) const {
    return static_cast<std::size_t>((v * k + w) * k + u);
  }
  double eval(int v, int w, double dt2) const {
    const std::size_t base = idx(v, w, 0);
    double sum = 0.0;
    for (int u = 0; u < k; ++u) sum += c[base + u] * std::exp(-dt2 * r[base + u]);
    return sum;
  }
};

}  // namespace

GraphParams GraphParams::identity(int k, double noise_std) {
  GraphParams p;
  p.S = Eigen::MatrixXd::Identity(k, k);
  p.logL = Eigen::MatrixXd::Zero(k, k);
  p.noise = Eigen::VectorXd::Constant(k, noise_std);
  return p;
}

void GraphParams::validate() const {
  const int k = num_tasks();
  if (S.cols() != k || logL.rows() != k || logL.cols() != k || noise.size() != k)
    throw ConfigError("graph parameter shapes are inconsistent");
  if (!S.allFinite() || !logL.allFinite() || !noise.allFinite())
    throw ConfigError("graph parameters must be finite");
  if ((noise.array() < 0.0).any()) throw ConfigError("noise standard deviations must be >= 0");
}

nlohmann::json GraphParams::to_json() const {
  return {{"k", num_tasks()},
          {"S", row_major(S)},
          {"logL", row_major(logL)},
          {"noise", std::vector<double>(noise.data(), noise.data() + noise.size())}};
}

GraphParams GraphParams::from_json(const nlohmann::json &j) {
  const auto noise = j.at("noise").get<std::vector<double>>();
  const int k = j.contains("k") ? j.at("k").get<int>() : static_cast<int>(noise.size());
  GraphParams p;
  p.S = json_matrix(j.at("S"), k, "S");
  p.logL = json_matrix(j.at("logL"), k, "logL");
  p.noise = Eigen::Map<const Eigen::VectorXd>(noise.data(), static_cast<Eigen::Index>(noise.size()));
  p.validate();
  return p;
}

double filter_value(double amplitude, double ell, double t) {
  return amplitude * std::exp(-t * t / ell);
}

double pair_term(double s_vu, double ell_vu, double s_wu, double ell_wu, double dt) {
  if (s_vu == 0.0 || s_wu == 0.0) return 0.0;
  return s_vu * s_wu * pair_prefactor(ell_vu, ell_wu) * std::exp(-dt * dt / (ell_vu + ell_wu));
}

double cross_cov(const StandardizedGraphParams &params, int v, int w, double dt) {
  double sum = 0.0;
  for (int u = 0; u < params.num_tasks(); ++u)
    sum += pair_term(params.S_tilde(v, u), std::exp(params.logL(v, u)), params.S_tilde(w, u),
                     std::exp(params.logL(w, u)), dt);
  return sum;
}

double prior_variance(const Eigen::MatrixXd &S, const Eigen::MatrixXd &logL, int v) {
  double var = 0.0;
  for (int u = 0; u < S.cols(); ++u)
    var += S(v, u) * S(v, u) * std::sqrt(kPi * std::exp(logL(v, u)) / 2.0);
  return var;
}

StandardizedGraphParams standardize(const GraphParams &params) {
  const int k = params.num_tasks();
  StandardizedGraphParams out;
  out.S_tilde.resize(k, k);
  out.logL = params.logL;
  out.scale.resize(k);
  out.noise = params.noise;
  for (int v = 0; v < k; ++v) {
    const double var = prior_variance(params.S, params.logL, v);
    if (!(var > 0.0))
      throw DataError("task " + std::to_string(v) + " has no incoming filter (all-zero row of S)");
    out.scale(v) = std::sqrt(var);
    out.S_tilde.row(v) = params.S.row(v) / out.scale(v);
  }
  return out;
}

Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params,
                                    std::span<const TaskTime> A, std::span<const TaskTime> B) {
  const PairTable table(params);
  Eigen::MatrixXd K(static_cast<Eigen::Index>(A.size()), static_cast<Eigen::Index>(B.size()));
  for (std::size_t a = 0; a < A.size(); ++a)
    for (std::size_t b = 0; b < B.size(); ++b) {
      const double dt = A[a].time - B[b].time;
      K(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          table.eval(A[a].task, B[b].task, dt * dt);
    }
  return K;
}

Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params,
                                    std::span<const TaskTime> A, double scale) {
  const PairTable table(params);
  const auto n = static_cast<Eigen::Index>(A.size());
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = 0; b < a; ++b) {
      const double dt = A[static_cast<std::size_t>(a)].time - A[static_cast<std::size_t>(b)].time;
      K(a, b) = scale * table.eval(A[static_cast<std::size_t>(a)].task,
                                   A[static_cast<std::size_t>(b)].task, dt * dt);
      K(b, a) = K(a, b);
    }
    const int v = A[static_cast<std::size_t>(a)].task;
    K(a, a) = scale * table.eval(v, v, 0.0) + params.noise(v) * params.noise(v);
  }
  return K;
}

StandardizedGradient &StandardizedGradient::operator+=(const StandardizedGradient &o) {
  S_tilde += o.S_tilde;
  ell += o.ell;
  noise += o.noise;
  return *this;
}

GraphGradient &GraphGradient::operator+=(const GraphGradient &o) {
  S += o.S;
  logL += o.logL;
  noise += o.noise;
  return *this;
}

void accumulate_kernel_gradient(const StandardizedGraphParams &params,
                                std::span<const TaskTime> A, const Eigen::MatrixXd &W,
                                double scale, StandardizedGradient &grad) {
  const PairTable table(params);
  const int k = table.k;
  std::vector<double> g_c(table.c.size(), 0.0), g_r(table.c.size(), 0.0);
  const auto n = static_cast<Eigen::Index>(A.size());
  for (Eigen::Index a = 0; a < n; ++a) {
    const int v = A[static_cast<std::size_t>(a)].task;
    for (Eigen::Index b = 0; b <= a; ++b) {
      const int w = A[static_cast<std::size_t>(b)].task;
      const double dt = A[static_cast<std::size_t>(a)].time - A[static_cast<std::size_t>(b)].time;
      const double dt2 = dt * dt;
      const double weight = (a == b ? 1.0 : 2.0) * scale * W(a, b);
      const std::size_t base = table.idx(v, w, 0);
      for (int u = 0; u < k; ++u) {
        const double e = std::exp(-dt2 * table.r[base + u]);
        g_c[base + u] += weight * e;
        g_r[base + u] -= weight * table.c[base + u] * e * dt2;
      }
    }
    grad.noise(v) += 2.0 * params.noise(v) * W(a, a);
  }
  for (int v = 0; v < k; ++v)
    for (int w = 0; w < k; ++w)
      for (int u = 0; u < k; ++u) {
        const std::size_t i = table.idx(v, w, u);
        if (g_c[i] == 0.0 && g_r[i] == 0.0) continue;
        const double lv = std::exp(params.logL(v, u));
        const double lw = std::exp(params.logL(w, u));
        const double q = pair_prefactor(lv, lw);
        const double sv = params.S_tilde(v, u);
        const double sw = params.S_tilde(w, u);
        grad.S_tilde(v, u) += g_c[i] * sw * q;
        grad.S_tilde(w, u) += g_c[i] * sv * q;
        const double c = sv * sw * q;
        const double r2 = table.r[i] * table.r[i];
        // d log q / d l1 = (1/2) l2 / (l1 (l1 + l2)); d r / d l = -r^2
        grad.ell(v, u) += g_c[i] * c * 0.5 * lw / (lv * (lv + lw)) - g_r[i] * r2;
        grad.ell(w, u) += g_c[i] * c * 0.5 * lv / (lw * (lv + lw)) - g_r[i] * r2;
      }
}

TaskBlocks::TaskBlocks(std::span<const TaskTime> coords, int k) {
  offset.assign(static_cast<std::size_t>(k + 1), 0);
  for (const auto &c : coords) {
    if (c.task < 0 || c.task >= k) throw DataError("task id out of range");
    ++offset[static_cast<std::size_t>(c.task + 1)];
  }
  for (int v = 0; v < k; ++v) offset[static_cast<std::size_t>(v + 1)] += offset[static_cast<std::size_t>(v)];
  order.resize(coords.size());
  std::vector<int> fill(offset.begin(), offset.end() - 1);
  for (std::size_t a = 0; a < coords.size(); ++a)
    order[static_cast<std::size_t>(fill[static_cast<std::size_t>(coords[a].task)]++)] = static_cast<int>(a);
  dt2.resize(static_cast<std::size_t>(k * k));
  for (int v = 0; v < k; ++v)
    for (int w = v; w < k; ++w) {
      auto &m = dt2[static_cast<std::size_t>(v * k + w)];
      m.resize(segment_size(v), segment_size(w));
      for (int a = 0; a < segment_size(v); ++a)
        for (int b = 0; b < segment_size(w); ++b) {
          const double dt = coords[static_cast<std::size_t>(order[static_cast<std::size_t>(offset[static_cast<std::size_t>(v)] + a)])].time -
                            coords[static_cast<std::size_t>(order[static_cast<std::size_t>(offset[static_cast<std::size_t>(w)] + b)])].time;
          m(a, b) = dt * dt;
        }
    }
}

Eigen::MatrixXd assemble_covariance(const StandardizedGraphParams &params, const TaskBlocks &blocks,
                                    BlockExponentials *cache, double scale) {
  const PairTable table(params);
  const int k = table.k;
  if (blocks.num_tasks() != k) throw DataError("task blocks were built for a different k");
  Eigen::MatrixXd K(blocks.size(), blocks.size());
  if (cache) cache->e.resize(static_cast<std::size_t>(k * k * k));
  for (int v = 0; v < k; ++v)
    for (int w = v; w < k; ++w) {
      const auto &d = blocks.dt2[static_cast<std::size_t>(v * k + w)];
      if (d.size() == 0) continue;
      Eigen::MatrixXd block = Eigen::MatrixXd::Zero(d.rows(), d.cols());
      for (int u = 0; u < k; ++u) {
        const std::size_t i = table.idx(v, w, u);
        if (table.c[i] == 0.0 && !cache) continue;
        Eigen::MatrixXd e = (-table.r[i] * d.array()).exp().matrix();
        block.noalias() += scale * table.c[i] * e;
        if (cache) cache->e[i] = std::move(e);
      }
      const int a0 = blocks.offset[static_cast<std::size_t>(v)], b0 = blocks.offset[static_cast<std::size_t>(w)];
      K.block(a0, b0, d.rows(), d.cols()) = block;
      if (v != w) K.block(b0, a0, d.cols(), d.rows()) = block.transpose();
    }
  for (int v = 0; v < k; ++v)
    for (int a = blocks.offset[static_cast<std::size_t>(v)]; a < blocks.offset[static_cast<std::size_t>(v + 1)]; ++a)
      K(a, a) += params.noise(v) * params.noise(v);
  return K;
}

void accumulate_kernel_gradient(const StandardizedGraphParams &params, const TaskBlocks &blocks,
                                const Eigen::MatrixXd &W, const BlockExponentials &cache,
                                StandardizedGradient &grad, double scale) {
  const PairTable table(params);
  const int k = table.k;
  for (int v = 0; v < k; ++v) {
    const int a0 = blocks.offset[static_cast<std::size_t>(v)];
    grad.noise(v) += 2.0 * params.noise(v) * W.diagonal().segment(a0, blocks.segment_size(v)).sum();
  }
  for (int v = 0; v < k; ++v)
    for (int w = v; w < k; ++w) {
      const auto &d = blocks.dt2[static_cast<std::size_t>(v * k + w)];
      if (d.size() == 0) continue;
      const auto Wb = W.block(blocks.offset[static_cast<std::size_t>(v)],
                              blocks.offset[static_cast<std::size_t>(w)], d.rows(), d.cols());
      const double mult = (v == w ? 1.0 : 2.0) * scale;
      for (int u = 0; u < k; ++u) {
        const std::size_t i = table.idx(v, w, u);
        const auto &e = cache.e[i];
        const Eigen::ArrayXXd we = Wb.array() * e.array();
        const double g_c = mult * we.sum();
        const double g_r = -mult * table.c[i] * (we * d.array()).sum();
        const double lv = std::exp(params.logL(v, u));
        const double lw = std::exp(params.logL(w, u));
        const double q = pair_prefactor(lv, lw);
        const double sv = params.S_tilde(v, u);
        const double sw = params.S_tilde(w, u);
        grad.S_tilde(v, u) += g_c * sw * q;
        grad.S_tilde(w, u) += g_c * sv * q;
        const double c = sv * sw * q;
        const double r2 = table.r[i] * table.r[i];
        grad.ell(v, u) += g_c * c * 0.5 * lw / (lv * (lv + lw)) - g_r * r2;
        grad.ell(w, u) += g_c * c * 0.5 * lv / (lw * (lv + lw)) - g_r * r2;
      }
    }
}

GraphGradient standardize_backward(const GraphParams &params,
                                   const StandardizedGraphParams &std_params,
                                   const StandardizedGradient &grad) {
  const int k = params.num_tasks();
  GraphGradient out(k);
  for (int v = 0; v < k; ++v) {
    const double s = std_params.scale(v);
    const double s3 = s * s * s;
    double a = 0.0;
    for (int u = 0; u < k; ++u) a += grad.S_tilde(v, u) * params.S(v, u);
    for (int x = 0; x < k; ++x) {
      const double ell = std::exp(params.logL(v, x));
      const double c = std::sqrt(kPi * ell / 2.0);
      out.S(v, x) = grad.S_tilde(v, x) / s - a * params.S(v, x) * c / s3;
      const double d_ell =
          grad.ell(v, x) - a * params.S(v, x) * params.S(v, x) * c / (4.0 * ell * s3);
      out.logL(v, x) = ell * d_ell;
    }
  }
  out.noise = grad.noise;
  return out;
}

}  // namespace structgp
