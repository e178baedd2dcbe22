#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace structgp {

enum class FitMode { StructGP, LPStructGP, LPFixed, Independent, NoStructure };

std::string to_string(FitMode mode);
FitMode parse_mode(const std::string &name);
inline bool is_lp(FitMode m) { return m == FitMode::LPStructGP || m == FitMode::LPFixed; }

/// Every hyperparameter of a fit. The resolved values are echoed into each
/// output artifact.
struct RunConfig {
  FitMode mode = FitMode::StructGP;

  // lambda grid, descending; an explicit list overrides the log-spaced one
  double lambda_max = 10.0;
  double lambda_min = 1e-3;
  int lambda_count = 20;
  std::vector<double> lambdas;
  bool grid_ascending = true;  // fit from the smallest lambda upwards
  std::string criterion = "aic";  // aic | validation
  double validation_fraction = 0.2;

  double beta_l1 = 100.0;
  double epsilon = 0.01;
  double rho_max = 1e8;
  double lr = 0.02;
  int inner_steps = 300;
  int max_outer = 100;
  double lr_halving_rho = 1e4;
  int steps = 600;  // Adam steps for the unconstrained modes
  double init_scale = 0.1;
  double edge_tolerance = 0.1;
  int restarts = 8;         // random topological orders tried before the grid
  int restart_steps = 200;  // Adam steps per restart pilot
  int refit_steps = 150;   // Adam steps on the thresholded support before scoring

  int batch_size = 32;  // subjects per mini-batch; 0 uses every subject
  std::string noise_mode = "per-task";  // per-task | shared
  double noise_init = 0.1;
  bool fix_noise = false;

  int m = 64;
  double boundary_factor = 1.5;
  int p = 2;
  double gamma = 0.3;
  double beta_decay = 0.9;
  int epochs = 10;
  double lp_lr = 0.05;
  double tau_max = 1.0;
  double init_logit_scale = 0.5;

  double time_scale = 1.0;  // input times are divided by this
  bool transform = true;
  bool constant_task = false;
  std::vector<double> lags;

  std::uint64_t seed = 0;

  std::vector<double> lambda_grid() const;
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json &j);
};

}  // namespace structgp
