#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace structgp {

/// One scalar measurement y(i, j, t).
struct Observation {
  int subject = 0;
  int task = 0;
  double time = 0.0;
  double value = 0.0;

  friend bool operator==(const Observation &, const Observation &) = default;
};

/// Half-open row range [begin, end) into ObservationSet::records().
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Immutable collection of irregularly sampled observations, stored sorted by
/// (subject, task, time) so that each subject occupies one contiguous range.
class ObservationSet {
 public:
  ObservationSet() = default;

  /// Validates ids, finiteness and uniqueness of (subject, task, time).
  /// Empty label vectors are filled with the decimal ids.
  ObservationSet(std::vector<Observation> records, int num_subjects, int num_tasks,
                 std::vector<std::string> subject_labels = {},
                 std::vector<std::string> task_names = {});

  const std::vector<Observation> &records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  int num_subjects() const { return num_subjects_; }
  int num_tasks() const { return num_tasks_; }
  RowRange subject_rows(int subject) const;
  std::span<const Observation> subject_records(int subject) const;
  const std::vector<std::string> &subject_labels() const { return subject_labels_; }
  const std::vector<std::string> &task_names() const { return task_names_; }

  /// Records of the listed subjects; ids and labels are kept.
  ObservationSet restrict_subjects(std::span<const int> subjects) const;
  /// Records satisfying keep(obs); ids and labels are kept.
  template <typename Pred>
  ObservationSet filter(Pred keep) const {
    std::vector<Observation> kept;
    for (const auto &o : records_)
      if (keep(o)) kept.push_back(o);
    return ObservationSet(std::move(kept), num_subjects_, num_tasks_, subject_labels_,
                          task_names_);
  }

  friend bool operator==(const ObservationSet &, const ObservationSet &) = default;

 private:
  std::vector<Observation> records_;
  int num_subjects_ = 0;
  int num_tasks_ = 0;
  std::vector<std::string> subject_labels_;
  std::vector<std::string> task_names_;
  std::vector<std::size_t> subject_offsets_;
};

enum class DerivedKind { Constant, Lag };

struct DerivedTask {
  DerivedKind kind = DerivedKind::Constant;
  int source = -1;  // raw task id for Lag
  double lag = 0.0;

  friend bool operator==(const DerivedTask &, const DerivedTask &) = default;
};

/// Task names; derived (pseudo) tasks are appended after the raw ones.
class TaskCatalog {
 public:
  TaskCatalog() = default;
  explicit TaskCatalog(std::vector<std::string> raw_names);

  int add_constant(const std::string &name = "1");
  int add_lag(int source, double lag, std::string name = {});

  int size() const { return static_cast<int>(names_.size()); }
  int num_raw() const { return num_raw_; }
  bool is_derived(int task) const { return task >= num_raw_; }
  const std::vector<std::string> &names() const { return names_; }
  const std::vector<DerivedTask> &derived() const { return derived_; }
  /// Task id for a name, or -1.
  int find(const std::string &name) const;

  nlohmann::json to_json() const;
  static TaskCatalog from_json(const nlohmann::json &j);

  friend bool operator==(const TaskCatalog &, const TaskCatalog &) = default;

 private:
  std::vector<std::string> names_;
  std::vector<DerivedTask> derived_;
  int num_raw_ = 0;
};

struct CsvSchema {
  std::string subject = "subject_id";
  std::string task = "task_id";
  std::string time = "time";
  std::string value = "value";
};

/// Reads an observation CSV. Subject labels are densified by first
/// appearance, after any `known_subjects` (which keep their positions). Task
/// labels use `catalog` when given; otherwise integer labels are used as ids
/// directly and any other labels are densified by first appearance. With
/// `require_value` false the value column is optional (query files).
/// Throws DataError with the offending line number.
ObservationSet ingest_csv(const std::filesystem::path &path, const CsvSchema &schema = {},
                          const TaskCatalog *catalog = nullptr,
                          const std::vector<std::string> *known_subjects = nullptr,
                          bool require_value = true);
ObservationSet parse_csv(const std::string &text, const CsvSchema &schema = {},
                         const TaskCatalog *catalog = nullptr,
                         const std::vector<std::string> *known_subjects = nullptr,
                         bool require_value = true);

/// Writes the canonical CSV (labels, %.17g numbers).
void write_csv(const ObservationSet &obs, const std::filesystem::path &path);
std::string to_csv_string(const ObservationSet &obs);

/// Fitted per-task quantile tables for the normal-score transform.
struct QuantileTable {
  std::vector<double> values;  // strictly increasing
  std::vector<double> scores;  // standard-normal scores of `values`
};

struct TransformState {
  std::vector<std::string> task_names;
  std::vector<QuantileTable> tables;  // one per transformed task

  double forward(int task, double x) const;
  double inverse(int task, double z) const;
  bool covers(int task) const { return task >= 0 && task < static_cast<int>(tables.size()); }

  nlohmann::json to_json() const;
  static TransformState from_json(const nlohmann::json &j);
};

/// Fits midpoint-plotting-position quantile tables on `fit_subjects` and maps
/// every record of every task to its normal score.
std::pair<ObservationSet, TransformState> normal_score_transform(
    const ObservationSet &obs, std::span<const int> fit_subjects);

/// Applies a fitted transform; tasks beyond the fitted tables pass through.
ObservationSet apply_transform(const ObservationSet &obs, const TransformState &state);

/// Appends the catalog's derived tasks: constants (1.0 at each distinct
/// observation time of a subject) and forward-shifted copies for lags.
ObservationSet derive_pseudo_tasks(const ObservationSet &obs, const TaskCatalog &catalog);

struct SubjectBatch {
  std::vector<int> subjects;
  std::vector<RowRange> rows;  // one per subject
};

/// Shuffles subjects under `seed` and cuts them into batches of at most
/// `batch_size` subjects. Subjects without records are still assigned.
std::vector<SubjectBatch> make_batches(const ObservationSet &obs, int batch_size,
                                       std::uint64_t seed);

}  // namespace structgp
