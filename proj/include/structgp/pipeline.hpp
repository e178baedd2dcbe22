#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "structgp/config.hpp"
#include "structgp/data.hpp"
#include "structgp/hsgp.hpp"
#include "structgp/kernel.hpp"
#include "structgp/latent.hpp"
#include "structgp/online.hpp"
#include "structgp/simulation.hpp"
#include "structgp/structure.hpp"

namespace structgp {

using Logger = std::function<void(const std::string &)>;

/// Everything needed to predict with a fitted model.
struct ModelBundle {
  RunConfig config;
  TaskCatalog catalog;
  std::vector<std::string> subjects;  // training subject labels
  std::optional<TransformState> transform;
  GraphParams graph;
  std::optional<LearnedStructure> structure;
  std::optional<PathwayParams> pathways;
  std::optional<HSGPDomain> domain;
  std::optional<AccumulatorState> accumulator;  // undiscounted pass at the final parameters
  nlohmann::json diagnostics = nlohmann::json::object();

  FitMode mode() const { return config.mode; }
  int num_tasks() const { return graph.num_tasks(); }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelBundle from_json(const nlohmann::json &j);
  void save(const std::filesystem::path &path) const;
  static ModelBundle load(const std::filesystem::path &path);
};

/// Training data after time scaling, the optional normal-score transform and
/// pseudo-task derivation.
struct PreparedData {
  ObservationSet obs;
  TaskCatalog catalog;
  std::optional<TransformState> transform;
};
PreparedData prepare_training(const ObservationSet &raw, const RunConfig &cfg);
/// Applies a bundle's preprocessing to new records of raw tasks.
ObservationSet prepare_like(const ObservationSet &raw, const ModelBundle &bundle);

/// Runs the configured pipeline. LP modes start from `init` when given (its
/// graph is kept bitwise in lp-fixed) and from an internal StructGP fit
/// otherwise.
ModelBundle fit_model(const ObservationSet &raw, const RunConfig &cfg,
                      const ModelBundle *init = nullptr, const Logger &log = {});
/// Same on already prepared data.
ModelBundle fit_prepared(const PreparedData &data, const RunConfig &cfg,
                         const ModelBundle *init = nullptr, const Logger &log = {});

/// NMLL of a bundle on prepared data (exact per-subject blocks; in LP modes an
/// undiscounted streaming pass).
double bundle_nmll(const ModelBundle &bundle, const ObservationSet &obs);

struct ForecastRow {
  std::string subject;
  std::string task;
  double time = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  double lo95 = 0.0;
  double hi95 = 0.0;
};

struct Forecast {
  std::vector<ForecastRow> rows;
  nlohmann::json config;

  void write_csv(const std::filesystem::path &path) const;
  std::string to_csv_string() const;
  static Forecast read_csv(const std::filesystem::path &path);
};

struct PredictWindow {
  std::optional<double> condition_before;  // keep conditioning times < t
  std::optional<double> query_after;       // keep query times >= t
};

/// Posterior predictive at the query rows, conditioning per subject on the
/// matching conditioning rows (and on the training pathway state in LP modes).
/// Values are mapped back through the inverse transform when one was fitted.
Forecast predict(const ModelBundle &bundle, const ObservationSet &conditioning,
                 const ObservationSet &query, const PredictWindow &window = {});

struct EvalOptions {
  int bootstrap = 1000;
  std::uint64_t seed = 0;
};

/// Per-task and macro RMSE, MAE, MSE and 95% coverage with bootstrap CIs over
/// subjects. Every forecast row needs a truth row with the same
/// (subject, task, time).
nlohmann::json evaluate(const Forecast &forecast, const ObservationSet &truth,
                        const EvalOptions &opts = {});

struct RecoveryOptions {
  std::vector<int> subject_counts{100};
  bool oracle_noise = true;  // hold the noise at the simulated value
  std::optional<std::filesystem::path> output_dir;
};

struct RecoveryRecord {
  int subjects = 0;
  int repetition = 0;
  bool ok = false;
  std::string error;
  double shd = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double ari = 0.0;
  double nmi = 0.0;
  int true_edges = 0;
  int est_edges = 0;
  double h_smooth = 0.0;
  double h_thresholded = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct RecoveryResult {
  std::vector<RecoveryRecord> records;
  nlohmann::json summary;
};

/// Simulate, fit and score every (subject count, repetition) pair.
RecoveryResult recovery_experiment(const SimConfig &sim, const RunConfig &run,
                                   const RecoveryOptions &opts, const Logger &log = {});

/// temp file + rename
void write_atomic(const std::filesystem::path &path, const std::string &content);

}  // namespace structgp
