#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "structgp/errors.hpp"
#include "structgp/pipeline.hpp"

namespace fs = std::filesystem;
using namespace structgp;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4 };

void add_run_options(CLI::App *cmd, RunConfig &c, std::string &mode) {
  cmd->add_option("--mode", mode, "structgp | lp-structgp | lp-fixed | independent | no-structure")
      ->capture_default_str();
  cmd->add_option("--lambda-max", c.lambda_max)->capture_default_str();
  cmd->add_option("--lambda-min", c.lambda_min)->capture_default_str();
  cmd->add_option("--lambda-count", c.lambda_count)->capture_default_str();
  cmd->add_option("--lambdas", c.lambdas, "explicit lambda grid")->delimiter(',');
  cmd->add_option("--criterion", c.criterion, "aic | validation")->capture_default_str();
  cmd->add_option("--validation-fraction", c.validation_fraction)->capture_default_str();
  cmd->add_option("--beta-l1", c.beta_l1)->capture_default_str();
  cmd->add_option("--epsilon", c.epsilon)->capture_default_str();
  cmd->add_option("--rho-max", c.rho_max)->capture_default_str();
  cmd->add_option("--lr", c.lr)->capture_default_str();
  cmd->add_option("--inner-steps", c.inner_steps)->capture_default_str();
  cmd->add_option("--max-outer", c.max_outer)->capture_default_str();
  cmd->add_option("--lr-halving-rho", c.lr_halving_rho)->capture_default_str();
  cmd->add_option("--steps", c.steps)->capture_default_str();
  cmd->add_option("--init-scale", c.init_scale)->capture_default_str();
  cmd->add_option("--edge-tolerance", c.edge_tolerance)->capture_default_str();
  cmd->add_option("--restarts", c.restarts)->capture_default_str();
  cmd->add_option("--grid-ascending", c.grid_ascending)->capture_default_str();
  cmd->add_option("--restart-steps", c.restart_steps)->capture_default_str();
  cmd->add_option("--refit-steps", c.refit_steps)->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size)->capture_default_str();
  cmd->add_option("--noise-mode", c.noise_mode, "per-task | shared")->capture_default_str();
  cmd->add_option("--noise-init", c.noise_init)->capture_default_str();
  cmd->add_option("--fix-noise", c.fix_noise)->capture_default_str();
  cmd->add_option("--m", c.m)->capture_default_str();
  cmd->add_option("--boundary-factor", c.boundary_factor)->capture_default_str();
  cmd->add_option("--p", c.p)->capture_default_str();
  cmd->add_option("--gamma", c.gamma)->capture_default_str();
  cmd->add_option("--beta-decay", c.beta_decay)->capture_default_str();
  cmd->add_option("--epochs", c.epochs)->capture_default_str();
  cmd->add_option("--lp-lr", c.lp_lr)->capture_default_str();
  cmd->add_option("--tau-max", c.tau_max)->capture_default_str();
  cmd->add_option("--init-logit-scale", c.init_logit_scale)->capture_default_str();
  cmd->add_option("--time-scale", c.time_scale, "input times are divided by this")
      ->capture_default_str();
  cmd->add_option("--transform", c.transform)->capture_default_str();
  cmd->add_option("--constant-task", c.constant_task)->capture_default_str();
  cmd->add_option("--lags", c.lags)->delimiter(',');
  cmd->add_option("--seed", c.seed)->capture_default_str();
}

void add_sim_options(CLI::App *cmd, SimConfig &s) {
  cmd->add_option("--k", s.k)->capture_default_str();
  cmd->add_option("--r", s.r)->capture_default_str();
  cmd->add_option("--obs-per-task", s.obs_per_task)->capture_default_str();
  cmd->add_option("--mean-degree", s.mean_degree)->capture_default_str();
  cmd->add_option("--weight-lo", s.weight_lo)->capture_default_str();
  cmd->add_option("--weight-hi", s.weight_hi)->capture_default_str();
  cmd->add_option("--logl-lo", s.logl_lo)->capture_default_str();
  cmd->add_option("--logl-hi", s.logl_hi)->capture_default_str();
  cmd->add_option("--t-lo", s.t_lo)->capture_default_str();
  cmd->add_option("--t-hi", s.t_hi)->capture_default_str();
  cmd->add_option("--noise-var", s.noise_var)->capture_default_str();
  cmd->add_option("--pathways", s.p, "0 simulates plain StructGP")->capture_default_str();
  cmd->add_option("--latent-weight", s.latent_weight)->capture_default_str();
  cmd->add_option("--individual-weight", s.individual_weight)->capture_default_str();
  cmd->add_option("--tau-range", s.tau_range)->capture_default_str();
  cmd->add_option("--logl-sub-lo", s.logl_sub_lo)->capture_default_str();
  cmd->add_option("--logl-sub-hi", s.logl_sub_hi)->capture_default_str();
  cmd->add_option("--exact-latent-max", s.exact_latent_max)->capture_default_str();
  cmd->add_option("--latent-basis", s.latent_basis)->capture_default_str();
  cmd->add_option("--sim-seed", s.seed)->capture_default_str();
  cmd->add_option("--repetitions", s.repetitions)->capture_default_str();
}

Logger stderr_logger(bool verbose) {
  if (!verbose) return {};
  return [](const std::string &msg) { std::cerr << msg << "\n"; };
}

std::string read_file(const fs::path &p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Structured multi-task Gaussian processes over irregular time series"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value configuration file; flags override it");
  bool verbose = false;
  app.add_flag("--verbose", verbose, "progress on stderr");
  app.fallthrough();

  RunConfig run;
  std::string mode = "structgp";
  SimConfig sim;

  auto *simulate = app.add_subcommand("simulate", "draw a synthetic data set");
  fs::path sim_out;
  bool recovery = false;
  std::vector<int> subject_counts;
  bool oracle_noise = true;
  simulate->add_option("--output", sim_out, "output directory")->required();
  simulate->add_flag("--recovery", recovery, "also run the structure recovery experiment");
  simulate->add_option("--subject-counts", subject_counts, "recovery subject counts (default: --r)")
      ->delimiter(',');
  simulate->add_option("--oracle-noise", oracle_noise)->capture_default_str();
  add_sim_options(simulate, sim);
  add_run_options(simulate, run, mode);

  auto *fit = app.add_subcommand("fit", "fit a model bundle");
  fs::path fit_data, fit_out, fit_init;
  fit->add_option("--data", fit_data, "observation CSV")->required()->check(CLI::ExistingFile);
  fit->add_option("--output", fit_out, "output directory")->required();
  fit->add_option("--init", fit_init, "StructGP bundle to start LP modes from")
      ->check(CLI::ExistingFile);
  add_run_options(fit, run, mode);

  auto *pred = app.add_subcommand("predict", "posterior predictive at query rows");
  fs::path pred_bundle, pred_query, pred_cond, pred_out;
  std::optional<double> cond_before, query_after;
  pred->add_option("--bundle", pred_bundle)->required()->check(CLI::ExistingFile);
  pred->add_option("--query", pred_query, "CSV with subject_id, task_id, time")
      ->required()
      ->check(CLI::ExistingFile);
  pred->add_option("--conditioning", pred_cond, "observation CSV")->check(CLI::ExistingFile);
  pred->add_option("--condition-before", cond_before, "keep conditioning times < t");
  pred->add_option("--query-after", query_after, "keep query times >= t");
  pred->add_option("--output", pred_out, "forecast CSV")->required();

  auto *ev = app.add_subcommand("eval", "score a forecast against truth");
  fs::path ev_forecast, ev_truth, ev_out;
  EvalOptions eopts;
  ev->add_option("--forecast", ev_forecast)->required()->check(CLI::ExistingFile);
  ev->add_option("--truth", ev_truth)->required()->check(CLI::ExistingFile);
  ev->add_option("--output", ev_out, "metrics JSON (stdout when omitted)");
  ev->add_option("--bootstrap", eopts.bootstrap)->capture_default_str();
  ev->add_option("--seed", eopts.seed)->capture_default_str();

  auto *exp = app.add_subcommand("export-graph", "write the learned DAG");
  fs::path exp_bundle, exp_out;
  std::string exp_format = "dot";
  exp->add_option("--bundle", exp_bundle)->required()->check(CLI::ExistingFile);
  exp->add_option("--output", exp_out, "stdout when omitted");
  exp->add_option("--format", exp_format, "dot | json")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const Logger log = stderr_logger(verbose);
  try {
    run.mode = parse_mode(mode);

    if (*simulate) {
      sim.validate();
      auto rng = repetition_rng(sim.seed, 0);
      const GroundTruth truth = sample_ground_truth(sim, rng);
      const ObservationSet obs = sample_trajectories(truth, sim, rng);
      fs::create_directories(sim_out);
      write_atomic(sim_out / "observations.csv", to_csv_string(obs));
      nlohmann::json tj = truth.to_json();
      tj["simulation"] = sim.to_json();
      write_atomic(sim_out / "truth.json", tj.dump(2));
      if (truth.pathways) {
        const auto a = assign_pathways(*truth.pathways);
        a.write_csv(sim_out / "truth_pathways.csv", obs.subject_labels());
      }
      if (recovery) {
        RecoveryOptions ro;
        ro.subject_counts = subject_counts.empty() ? std::vector<int>{sim.r} : subject_counts;
        ro.oracle_noise = oracle_noise;
        ro.output_dir = sim_out;
        const auto res = recovery_experiment(sim, run, ro, log);
        std::cout << res.summary.at("settings").dump(2) << "\n";
      }
      return kOk;
    }

    if (*fit) {
      run.validate();
      const ObservationSet raw = ingest_csv(fit_data);
      std::optional<ModelBundle> init;
      if (!fit_init.empty()) init = ModelBundle::load(fit_init);
      const ModelBundle b = fit_model(raw, run, init ? &*init : nullptr, log);
      fs::create_directories(fit_out);
      b.save(fit_out / "bundle.json");
      if (b.structure) write_atomic(fit_out / "graph.dot", b.structure->to_dot(b.catalog.names()));
      if (b.pathways) {
        assign_pathways(*b.pathways).write_csv(fit_out / "pathways.csv", b.subjects);
      }
      nlohmann::json summary = {{"config", b.config.to_json()}, {"diagnostics", b.diagnostics}};
      if (b.structure) summary["structure"] = b.structure->to_json(b.catalog.names());
      write_atomic(fit_out / "fit_summary.json", summary.dump(2));
      return kOk;
    }

    if (*pred) {
      const ModelBundle b = ModelBundle::load(pred_bundle);
      std::vector<std::string> raw_names(b.catalog.names().begin(),
                                         b.catalog.names().begin() + b.catalog.num_raw());
      TaskCatalog raw_catalog(raw_names);
      ObservationSet cond;
      if (!pred_cond.empty()) cond = ingest_csv(pred_cond, {}, &raw_catalog, &b.subjects);
      const auto &labels = cond.empty() ? b.subjects : cond.subject_labels();
      const ObservationSet query = ingest_csv(pred_query, {}, &raw_catalog, &labels, false);
      if (cond.empty())
        cond = ObservationSet({}, query.num_subjects(), b.catalog.num_raw(), query.subject_labels(),
                              raw_names);
      const Forecast fc = predict(b, cond, query, {cond_before, query_after});
      write_atomic(pred_out, fc.to_csv_string());
      nlohmann::json meta = {{"config", fc.config},
                             {"bundle", fs::absolute(pred_bundle).string()},
                             {"rows", fc.rows.size()}};
      if (cond_before) meta["condition_before"] = *cond_before;
      if (query_after) meta["query_after"] = *query_after;
      write_atomic(pred_out.string() + ".json", meta.dump(2));
      return kOk;
    }

    if (*ev) {
      const Forecast fc = Forecast::read_csv(ev_forecast);
      const ObservationSet truth = ingest_csv(ev_truth);
      nlohmann::json res = evaluate(fc, truth, eopts);
      const fs::path meta = ev_forecast.string() + ".json";
      if (fs::exists(meta)) res["config"] = nlohmann::json::parse(read_file(meta)).value("config", nlohmann::json());
      if (ev_out.empty())
        std::cout << res.dump(2) << "\n";
      else
        write_atomic(ev_out, res.dump(2));
      return kOk;
    }

    if (*exp) {
      const ModelBundle b = ModelBundle::load(exp_bundle);
      if (!b.structure) throw ConfigError("bundle has no learned structure (mode " + to_string(b.mode()) + ")");
      std::string text;
      if (exp_format == "dot") {
        text = b.structure->to_dot(b.catalog.names());
      } else if (exp_format == "json") {
        nlohmann::json j = b.structure->to_json(b.catalog.names());
        j["config"] = b.config.to_json();
        text = j.dump(2) + "\n";
      } else {
        throw ConfigError("unknown format '" + exp_format + "'");
      }
      if (exp_out.empty())
        std::cout << text;
      else
        write_atomic(exp_out, text);
      return kOk;
    }
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError &e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
