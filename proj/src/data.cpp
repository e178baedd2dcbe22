#include "structgp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include <boost/math/distributions/normal.hpp>

#include "structgp/errors.hpp"

namespace structgp {

namespace {

bool record_less(const Observation &a, const Observation &b) {
  return std::tie(a.subject, a.task, a.time) < std::tie(b.subject, b.task, b.time);
}

std::vector<std::string> decimal_labels(int n) {
  std::vector<std::string> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::to_string(i);
  return out;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_row(const std::string &line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(
        start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

bool parse_double(const std::string &s, double &out) {
  if (s.empty()) return false;
  const char *begin = s.data();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_index(const std::string &s, int &out) {
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && out >= 0;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

[[noreturn]] void fail_line(std::size_t line, const std::string &what) {
  throw DataError("line " + std::to_string(line) + ": " + what);
}

}  // namespace

ObservationSet::ObservationSet(std::vector<Observation> records, int num_subjects,
                               int num_tasks, std::vector<std::string> subject_labels,
                               std::vector<std::string> task_names)
    : records_(std::move(records)),
      num_subjects_(num_subjects),
      num_tasks_(num_tasks),
      subject_labels_(std::move(subject_labels)),
      task_names_(std::move(task_names)) {
  if (num_subjects_ < 0 || num_tasks_ < 0) throw DataError("negative subject or task count");
  if (subject_labels_.empty()) subject_labels_ = decimal_labels(num_subjects_);
  if (task_names_.empty()) task_names_ = decimal_labels(num_tasks_);
  if (static_cast<int>(subject_labels_.size()) != num_subjects_)
    throw DataError("subject label count does not match subject count");
  if (static_cast<int>(task_names_.size()) != num_tasks_)
    throw DataError("task name count does not match task count");
  for (const auto &o : records_) {
    if (o.subject < 0 || o.subject >= num_subjects_)
      throw DataError("subject id " + std::to_string(o.subject) + " out of range");
    if (o.task < 0 || o.task >= num_tasks_)
      throw DataError("task id " + std::to_string(o.task) + " out of range");
    if (!std::isfinite(o.time) || o.time < 0.0)
      throw DataError("time must be finite and non-negative");
    if (!std::isfinite(o.value)) throw DataError("value must be finite");
  }
  std::stable_sort(records_.begin(), records_.end(), record_less);
  for (std::size_t r = 1; r < records_.size(); ++r) {
    const auto &a = records_[r - 1];
    const auto &b = records_[r];
    if (a.subject == b.subject && a.task == b.task && a.time == b.time)
      throw DataError("duplicate observation (subject " + subject_labels_[a.subject] +
                      ", task " + task_names_[a.task] + ", time " + format_double(a.time) +
                      ")");
  }
  subject_offsets_.assign(static_cast<std::size_t>(num_subjects_) + 1, 0);
  for (const auto &o : records_) ++subject_offsets_[static_cast<std::size_t>(o.subject) + 1];
  std::partial_sum(subject_offsets_.begin(), subject_offsets_.end(), subject_offsets_.begin());
}

RowRange ObservationSet::subject_rows(int subject) const {
  if (subject < 0 || subject >= num_subjects_) throw DataError("subject id out of range");
  return {subject_offsets_[static_cast<std::size_t>(subject)],
          subject_offsets_[static_cast<std::size_t>(subject) + 1]};
}

std::span<const Observation> ObservationSet::subject_records(int subject) const {
  const auto rows = subject_rows(subject);
  return std::span<const Observation>(records_).subspan(rows.begin, rows.size());
}

ObservationSet ObservationSet::restrict_subjects(std::span<const int> subjects) const {
  std::vector<Observation> kept;
  for (int s : subjects) {
    const auto rec = subject_records(s);
    kept.insert(kept.end(), rec.begin(), rec.end());
  }
  return ObservationSet(std::move(kept), num_subjects_, num_tasks_, subject_labels_,
                        task_names_);
}

// ---------------------------------------------------------------------------
// TaskCatalog

TaskCatalog::TaskCatalog(std::vector<std::string> raw_names)
    : names_(std::move(raw_names)), num_raw_(static_cast<int>(names_.size())) {}

int TaskCatalog::add_constant(const std::string &name) {
  if (find(name) >= 0) throw ConfigError("duplicate task name '" + name + "'");
  names_.push_back(name);
  derived_.push_back({DerivedKind::Constant, -1, 0.0});
  return size() - 1;
}

int TaskCatalog::add_lag(int source, double lag, std::string name) {
  if (source < 0 || source >= num_raw_)
    throw DataError("lag source task " + std::to_string(source) + " does not exist");
  if (!(lag >= 0.0) || !std::isfinite(lag)) throw ConfigError("lag must be finite and >= 0");
  if (name.empty()) {
    std::ostringstream os;
    os << names_[static_cast<std::size_t>(source)] << "-" << lag;
    name = os.str();
  }
  if (find(name) >= 0) throw ConfigError("duplicate task name '" + name + "'");
  names_.push_back(name);
  derived_.push_back({DerivedKind::Lag, source, lag});
  return size() - 1;
}

int TaskCatalog::find(const std::string &name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  return it == names_.end() ? -1 : static_cast<int>(it - names_.begin());
}

nlohmann::json TaskCatalog::to_json() const {
  nlohmann::json derived = nlohmann::json::array();
  for (std::size_t d = 0; d < derived_.size(); ++d) {
    const auto &t = derived_[d];
    derived.push_back({{"name", names_[static_cast<std::size_t>(num_raw_) + d]},
                       {"kind", t.kind == DerivedKind::Constant ? "constant" : "lag"},
                       {"source", t.source},
                       {"lag", t.lag}});
  }
  std::vector<std::string> raw(names_.begin(), names_.begin() + num_raw_);
  return {{"names", raw}, {"derived", derived}};
}

TaskCatalog TaskCatalog::from_json(const nlohmann::json &j) {
  TaskCatalog cat(j.at("names").get<std::vector<std::string>>());
  for (const auto &d : j.value("derived", nlohmann::json::array())) {
    const auto kind = d.at("kind").get<std::string>();
    if (kind == "constant")
      cat.add_constant(d.at("name").get<std::string>());
    else if (kind == "lag")
      cat.add_lag(d.at("source").get<int>(), d.at("lag").get<double>(),
                  d.at("name").get<std::string>());
    else
      throw ConfigError("unknown derived task kind '" + kind + "'");
  }
  return cat;
}

// ---------------------------------------------------------------------------
// CSV

ObservationSet parse_csv(const std::string &text, const CsvSchema &schema,
                         const TaskCatalog *catalog,
                         const std::vector<std::string> *known_subjects,
                         bool require_value) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_row(line);
      break;
    }
  }
  if (header.empty()) throw DataError("CSV has no header row");
  if (!header.empty() && header[0].size() >= 3 &&
      header[0].compare(0, 3, "\xEF\xBB\xBF") == 0)
    header[0].erase(0, 3);
  auto column = [&](const std::string &name) {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int c_subject = column(schema.subject);
  int c_task = column(schema.task);
  if (c_task < 0) c_task = column("task");
  const int c_time = column(schema.time);
  const int c_value = column(schema.value);
  if (c_subject < 0 || c_task < 0 || c_time < 0 || (require_value && c_value < 0))
    throw DataError("CSV header must contain " + schema.subject + ", " + schema.task + ", " +
                    schema.time + (require_value ? ", " + schema.value : std::string()));

  struct Raw {
    std::string subject, task;
    double time, value;
    std::size_t line;
  };
  std::vector<Raw> rows;
  const std::size_t needed =
      static_cast<std::size_t>(std::max({c_subject, c_task, c_time, c_value})) + 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_row(line);
    if (fields.size() < needed || fields.size() != header.size())
      fail_line(line_no, "expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
    Raw r{fields[static_cast<std::size_t>(c_subject)], fields[static_cast<std::size_t>(c_task)],
          0.0, 0.0, line_no};
    if (r.subject.empty()) fail_line(line_no, "empty subject id");
    if (r.task.empty()) fail_line(line_no, "empty task id");
    if (!parse_double(fields[static_cast<std::size_t>(c_time)], r.time))
      fail_line(line_no, "malformed time '" + fields[static_cast<std::size_t>(c_time)] + "'");
    if (!std::isfinite(r.time) || r.time < 0.0)
      fail_line(line_no, "time must be finite and non-negative");
    if (c_value >= 0) {
      if (!parse_double(fields[static_cast<std::size_t>(c_value)], r.value))
        fail_line(line_no,
                  "malformed value '" + fields[static_cast<std::size_t>(c_value)] + "'");
      if (!std::isfinite(r.value)) fail_line(line_no, "non-finite value");
    }
    rows.push_back(std::move(r));
  }

  std::vector<std::string> subjects = known_subjects ? *known_subjects : std::vector<std::string>{};
  std::unordered_map<std::string, int> subject_ids;
  for (std::size_t i = 0; i < subjects.size(); ++i) subject_ids.emplace(subjects[i], static_cast<int>(i));

  std::vector<std::string> task_names;
  std::unordered_map<std::string, int> task_ids;
  bool numeric_tasks = false;
  if (catalog) {
    task_names = catalog->names();
  } else {
    numeric_tasks = !rows.empty();
    int max_id = -1;
    for (const auto &r : rows) {
      int id;
      if (!parse_index(r.task, id)) {
        numeric_tasks = false;
        break;
      }
      max_id = std::max(max_id, id);
    }
    if (numeric_tasks) task_names = decimal_labels(max_id + 1);
  }
  for (std::size_t i = 0; i < task_names.size(); ++i) task_ids.emplace(task_names[i], static_cast<int>(i));

  std::vector<Observation> records;
  records.reserve(rows.size());
  std::map<std::tuple<int, int, double>, std::size_t> seen;
  for (const auto &r : rows) {
    auto [sit, s_new] = subject_ids.emplace(r.subject, static_cast<int>(subjects.size()));
    if (s_new) subjects.push_back(r.subject);
    int task;
    if (numeric_tasks) {
      parse_index(r.task, task);
    } else {
      auto tit = task_ids.find(r.task);
      if (tit == task_ids.end()) {
        if (catalog) fail_line(r.line, "unknown task '" + r.task + "'");
        tit = task_ids.emplace(r.task, static_cast<int>(task_names.size())).first;
        task_names.push_back(r.task);
      }
      task = tit->second;
    }
    const auto key = std::make_tuple(sit->second, task, r.time);
    const auto [dup, inserted] = seen.emplace(key, r.line);
    if (!inserted)
      fail_line(r.line, "duplicate (subject, task, time) = (" + r.subject + ", " + r.task + ", " +
                            format_double(r.time) + "), first seen on line " +
                            std::to_string(dup->second));
    records.push_back({sit->second, task, r.time, r.value});
  }
  const int r_count = static_cast<int>(subjects.size());
  const int k_count = static_cast<int>(task_names.size());
  return ObservationSet(std::move(records), r_count, k_count, std::move(subjects),
                        std::move(task_names));
}

ObservationSet ingest_csv(const std::filesystem::path &path, const CsvSchema &schema,
                          const TaskCatalog *catalog,
                          const std::vector<std::string> *known_subjects,
                          bool require_value) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str(), schema, catalog, known_subjects, require_value);
}

std::string to_csv_string(const ObservationSet &obs) {
  std::ostringstream out;
  out << "subject_id,task_id,time,value\n";
  for (const auto &o : obs.records())
    out << obs.subject_labels()[static_cast<std::size_t>(o.subject)] << ','
        << obs.task_names()[static_cast<std::size_t>(o.task)] << ',' << format_double(o.time)
        << ',' << format_double(o.value) << '\n';
  return out.str();
}

void write_csv(const ObservationSet &obs, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << to_csv_string(obs);
}

// ---------------------------------------------------------------------------
// Normal-score transform

namespace {

double interpolate(const std::vector<double> &xs, const std::vector<double> &ys, double x) {
  if (xs.size() == 1 || x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
  const auto lo = hi - 1;
  const double w = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + w * (ys[hi] - ys[lo]);
}

QuantileTable fit_table(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  const boost::math::normal standard;
  QuantileTable t;
  std::size_t i = 0;
  while (i < values.size()) {
    std::size_t j = i;
    while (j < values.size() && values[j] == values[i]) ++j;
    // Tied values share the mean plotting position of their ranks.
    const double mean_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    t.values.push_back(values[i]);
    t.scores.push_back(boost::math::quantile(standard, (mean_rank - 0.5) / n));
    i = j;
  }
  return t;
}

}  // namespace

double TransformState::forward(int task, double x) const {
  if (!covers(task)) return x;
  const auto &t = tables[static_cast<std::size_t>(task)];
  return interpolate(t.values, t.scores, x);
}

double TransformState::inverse(int task, double z) const {
  if (!covers(task)) return z;
  const auto &t = tables[static_cast<std::size_t>(task)];
  return interpolate(t.scores, t.values, z);
}

nlohmann::json TransformState::to_json() const {
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t j = 0; j < tables.size(); ++j)
    tasks.push_back({{"name", j < task_names.size() ? task_names[j] : std::to_string(j)},
                     {"values", tables[j].values},
                     {"scores", tables[j].scores}});
  return {{"kind", "normal_score"}, {"plotting_position", "(rank-0.5)/n"}, {"tasks", tasks}};
}

TransformState TransformState::from_json(const nlohmann::json &j) {
  TransformState s;
  for (const auto &t : j.at("tasks")) {
    s.task_names.push_back(t.at("name").get<std::string>());
    s.tables.push_back({t.at("values").get<std::vector<double>>(),
                        t.at("scores").get<std::vector<double>>()});
    if (s.tables.back().values.empty() ||
        s.tables.back().values.size() != s.tables.back().scores.size())
      throw DataError("malformed quantile table for task '" + s.task_names.back() + "'");
  }
  return s;
}

std::pair<ObservationSet, TransformState> normal_score_transform(
    const ObservationSet &obs, std::span<const int> fit_subjects) {
  std::vector<std::vector<double>> per_task(static_cast<std::size_t>(obs.num_tasks()));
  for (int s : fit_subjects)
    for (const auto &o : obs.subject_records(s))
      per_task[static_cast<std::size_t>(o.task)].push_back(o.value);
  TransformState state;
  state.task_names = obs.task_names();
  for (int j = 0; j < obs.num_tasks(); ++j) {
    auto &vals = per_task[static_cast<std::size_t>(j)];
    if (vals.empty())
      throw DataError("task '" + obs.task_names()[static_cast<std::size_t>(j)] +
                      "' has no observations in the fit subset");
    state.tables.push_back(fit_table(std::move(vals)));
  }
  return {apply_transform(obs, state), std::move(state)};
}

ObservationSet apply_transform(const ObservationSet &obs, const TransformState &state) {
  std::vector<Observation> out = obs.records();
  for (auto &o : out) o.value = state.forward(o.task, o.value);
  return ObservationSet(std::move(out), obs.num_subjects(), obs.num_tasks(),
                        obs.subject_labels(), obs.task_names());
}

// ---------------------------------------------------------------------------
// Pseudo tasks

ObservationSet derive_pseudo_tasks(const ObservationSet &obs, const TaskCatalog &catalog) {
  if (catalog.num_raw() != obs.num_tasks())
    throw DataError("catalog has " + std::to_string(catalog.num_raw()) +
                    " raw tasks but data has " + std::to_string(obs.num_tasks()));
  std::vector<Observation> out = obs.records();
  for (std::size_t d = 0; d < catalog.derived().size(); ++d) {
    const auto &spec = catalog.derived()[d];
    const int id = catalog.num_raw() + static_cast<int>(d);
    if (spec.kind == DerivedKind::Lag) {
      if (spec.source < 0 || spec.source >= obs.num_tasks())
        throw DataError("lag source task " + std::to_string(spec.source) + " does not exist");
      for (const auto &o : obs.records())
        if (o.task == spec.source) out.push_back({o.subject, id, o.time + spec.lag, o.value});
    } else {
      for (int s = 0; s < obs.num_subjects(); ++s) {
        std::set<double> times;
        for (const auto &o : obs.subject_records(s)) times.insert(o.time);
        for (double t : times) out.push_back({s, id, t, 1.0});
      }
    }
  }
  return ObservationSet(std::move(out), obs.num_subjects(), catalog.size(),
                        obs.subject_labels(), catalog.names());
}

// ---------------------------------------------------------------------------
// Batching

std::vector<SubjectBatch> make_batches(const ObservationSet &obs, int batch_size,
                                       std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(obs.num_subjects()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<SubjectBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    SubjectBatch b;
    const auto stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    for (auto i = start; i < stop; ++i) {
      b.subjects.push_back(order[i]);
      b.rows.push_back(obs.subject_rows(order[i]));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace structgp
