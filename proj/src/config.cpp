#include "structgp/config.hpp"

#include "structgp/errors.hpp"
#include "structgp/structure.hpp"

namespace structgp {

std::string to_string(FitMode mode) {
  switch (mode) {
    case FitMode::StructGP: return "structgp";
    case FitMode::LPStructGP: return "lp-structgp";
    case FitMode::LPFixed: return "lp-fixed";
    case FitMode::Independent: return "independent";
    case FitMode::NoStructure: return "no-structure";
  }
  return "structgp";
}

FitMode parse_mode(const std::string &name) {
  for (auto m : {FitMode::StructGP, FitMode::LPStructGP, FitMode::LPFixed, FitMode::Independent,
                 FitMode::NoStructure})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown mode '" + name + "'");
}

std::vector<double> RunConfig::lambda_grid() const {
  if (!lambdas.empty()) return lambdas;
  return log_spaced_grid(lambda_max, lambda_min, lambda_count);
}

void RunConfig::validate() const {
  if (lambdas.empty() && (!(lambda_max >= lambda_min) || lambda_min < 0.0 || lambda_count < 1))
    throw ConfigError("invalid lambda grid");
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    if (lambdas[i] < 0.0 || (i > 0 && lambdas[i] > lambdas[i - 1]))
      throw ConfigError("lambdas must be non-negative and descending");
  if (criterion != "aic" && criterion != "validation")
    throw ConfigError("criterion must be aic or validation");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in (0, 1)");
  if (!(beta_l1 > 0.0) || !(epsilon > 0.0) || !(rho_max >= 1.0))
    throw ConfigError("beta_l1, epsilon and rho_max must be positive");
  if (!(lr > 0.0) || !(lp_lr > 0.0) || inner_steps < 1 || max_outer < 1 || steps < 0)
    throw ConfigError("invalid optimizer settings");
  if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
  if (noise_mode != "per-task" && noise_mode != "shared")
    throw ConfigError("noise_mode must be per-task or shared");
  if (!(noise_init > 0.0)) throw ConfigError("noise_init must be positive");
  if (m < 1 || !(boundary_factor >= 1.0)) throw ConfigError("invalid basis settings");
  if (p < 1) throw ConfigError("p must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(beta_decay >= 0.0 && beta_decay <= 1.0)) throw ConfigError("beta_decay must lie in [0, 1]");
  if (epochs < 0 || tau_max < 0.0) throw ConfigError("invalid pathway settings");
  if (!(time_scale > 0.0)) throw ConfigError("time_scale must be positive");
  if (edge_tolerance < 0.0 || init_scale < 0.0) throw ConfigError("invalid tolerances");
  if (restarts < 1 || restart_steps < 0 || refit_steps < 0)
    throw ConfigError("restarts must be >= 1 and step counts non-negative");
}

nlohmann::json RunConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"lambda_max", lambda_max},
          {"lambda_min", lambda_min},
          {"lambda_count", lambda_count},
          {"lambdas", lambdas},
          {"criterion", criterion},
          {"validation_fraction", validation_fraction},
          {"beta_l1", beta_l1},
          {"epsilon", epsilon},
          {"rho_max", rho_max},
          {"lr", lr},
          {"inner_steps", inner_steps},
          {"max_outer", max_outer},
          {"lr_halving_rho", lr_halving_rho},
          {"steps", steps},
          {"init_scale", init_scale},
          {"edge_tolerance", edge_tolerance},
          {"restarts", restarts},
          {"grid_ascending", grid_ascending},
          {"restart_steps", restart_steps},
          {"refit_steps", refit_steps},
          {"batch_size", batch_size},
          {"noise_mode", noise_mode},
          {"noise_init", noise_init},
          {"fix_noise", fix_noise},
          {"m", m},
          {"boundary_factor", boundary_factor},
          {"p", p},
          {"gamma", gamma},
          {"beta_decay", beta_decay},
          {"epochs", epochs},
          {"lp_lr", lp_lr},
          {"tau_max", tau_max},
          {"init_logit_scale", init_logit_scale},
          {"time_scale", time_scale},
          {"transform", transform},
          {"constant_task", constant_task},
          {"lags", lags},
          {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json &j) {
  RunConfig c;
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  c.lambda_max = j.value("lambda_max", c.lambda_max);
  c.lambda_min = j.value("lambda_min", c.lambda_min);
  c.lambda_count = j.value("lambda_count", c.lambda_count);
  c.lambdas = j.value("lambdas", c.lambdas);
  c.criterion = j.value("criterion", c.criterion);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.beta_l1 = j.value("beta_l1", c.beta_l1);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.rho_max = j.value("rho_max", c.rho_max);
  c.lr = j.value("lr", c.lr);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.max_outer = j.value("max_outer", c.max_outer);
  c.lr_halving_rho = j.value("lr_halving_rho", c.lr_halving_rho);
  c.steps = j.value("steps", c.steps);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.edge_tolerance = j.value("edge_tolerance", c.edge_tolerance);
  c.restarts = j.value("restarts", c.restarts);
  c.grid_ascending = j.value("grid_ascending", c.grid_ascending);
  c.restart_steps = j.value("restart_steps", c.restart_steps);
  c.refit_steps = j.value("refit_steps", c.refit_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.noise_mode = j.value("noise_mode", c.noise_mode);
  c.noise_init = j.value("noise_init", c.noise_init);
  c.fix_noise = j.value("fix_noise", c.fix_noise);
  c.m = j.value("m", c.m);
  c.boundary_factor = j.value("boundary_factor", c.boundary_factor);
  c.p = j.value("p", c.p);
  c.gamma = j.value("gamma", c.gamma);
  c.beta_decay = j.value("beta_decay", c.beta_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.lp_lr = j.value("lp_lr", c.lp_lr);
  c.tau_max = j.value("tau_max", c.tau_max);
  c.init_logit_scale = j.value("init_logit_scale", c.init_logit_scale);
  c.time_scale = j.value("time_scale", c.time_scale);
  c.transform = j.value("transform", c.transform);
  c.constant_task = j.value("constant_task", c.constant_task);
  c.lags = j.value("lags", c.lags);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

}  // namespace structgp
