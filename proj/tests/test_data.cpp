#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "structgp/data.hpp"
#include "structgp/errors.hpp"

using namespace structgp;

namespace {

std::vector<int> all_subjects(const ObservationSet &obs) {
  std::vector<int> s(static_cast<std::size_t>(obs.num_subjects()));
  std::iota(s.begin(), s.end(), 0);
  return s;
}

}  // namespace

TEST_CASE("parse three rows from two subjects") {
  const auto obs = parse_csv(
      "subject_id,task_id,time,value\n"
      "0,0,1.0,0.5\n"
      "1,0,2.0,0.25\n"
      "0,1,1.5,-1\n");
  CHECK(obs.num_subjects() == 2);
  CHECK(obs.num_tasks() == 2);
  CHECK(obs.size() == 3);
  CHECK(obs.subject_records(0).size() == 2);
}

TEST_CASE("string subject and task labels are densified by first appearance") {
  const auto obs = parse_csv(
      "subject_id,task_id,time,value\n"
      "b,NE,1.0,0.5\n"
      "a,NE,1.0,0.5\n"
      "b,MAP,2.0,1.0\n");
  REQUIRE(obs.num_subjects() == 2);
  CHECK(obs.subject_labels()[0] == "b");
  CHECK(obs.subject_labels()[1] == "a");
  CHECK(obs.task_names()[0] == "NE");
  CHECK(obs.task_names()[1] == "MAP");
  const auto again = parse_csv(
      "subject_id,task_id,time,value\n"
      "b,NE,1.0,0.5\n"
      "a,NE,1.0,0.5\n"
      "b,MAP,2.0,1.0\n");
  CHECK(obs == again);
}

TEST_CASE("duplicate triple names the offending line") {
  const std::string text =
      "subject_id,task_id,time,value\n"
      "0,0,1.5,1\n"
      "0,1,1.5,1\n"
      "0,0,1.5,2\n";
  try {
    parse_csv(text);
    FAIL("expected a DataError");
  } catch (const DataError &e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
}

TEST_CASE("malformed rows and non-finite values are rejected with line numbers") {
  CHECK_THROWS_AS(parse_csv("subject_id,task_id,time,value\n0,0,x,1\n"), DataError);
  CHECK_THROWS_AS(parse_csv("subject_id,task_id,time,value\n0,0,1,nan\n"), DataError);
  CHECK_THROWS_AS(parse_csv("subject_id,task_id,time,value\n0,0,1\n"), DataError);
  CHECK_THROWS_AS(parse_csv("subject_id,time,value\n0,1,1\n"), DataError);
  try {
    parse_csv("subject_id,task_id,time,value\n0,0,1,1\n0,0,2,inf\n");
  } catch (const DataError &e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("csv roundtrip is canonical") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> t(0.0, 10.0), y(-3.0, 3.0);
  std::vector<Observation> recs;
  for (int s = 0; s < 4; ++s)
    for (int j = 0; j < 3; ++j)
      for (int n = 0; n < 5; ++n) recs.push_back({s, j, t(rng), y(rng)});
  const ObservationSet obs(recs, 4, 3);
  const auto path = std::filesystem::temp_directory_path() / "structgp_roundtrip.csv";
  write_csv(obs, path);
  const auto back = ingest_csv(path);
  CHECK(back == obs);
  std::filesystem::remove(path);
}

TEST_CASE("normal score transform") {
  SUBCASE("median of three maps to zero") {
    const ObservationSet obs({{0, 0, 0.0, 1.0}, {0, 0, 1.0, 2.0}, {0, 0, 2.0, 3.0}}, 1, 1);
    const auto subjects = all_subjects(obs);
    const auto [z, state] = normal_score_transform(obs, subjects);
    CHECK(z.records()[1].value == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(state.forward(0, 2.0) == doctest::Approx(0.0));
  }
  SUBCASE("order preserving, invertible, roughly standard") {
    std::mt19937_64 rng(3);
    std::lognormal_distribution<double> dist(0.0, 1.0);
    std::vector<Observation> recs;
    for (int s = 0; s < 20; ++s)
      for (int n = 0; n < 10; ++n) recs.push_back({s, 0, static_cast<double>(n), dist(rng)});
    const ObservationSet obs(recs, 20, 1);
    const auto subjects = all_subjects(obs);
    const auto [z, state] = normal_score_transform(obs, subjects);
    double mean = 0.0, sq = 0.0;
    for (std::size_t a = 0; a < obs.size(); ++a) {
      for (std::size_t b = 0; b < obs.size(); ++b)
        if (obs.records()[a].value < obs.records()[b].value)
          REQUIRE(z.records()[a].value < z.records()[b].value);
      CHECK(std::abs(state.inverse(0, z.records()[a].value) - obs.records()[a].value) < 1e-9);
      mean += z.records()[a].value;
    }
    mean /= static_cast<double>(obs.size());
    for (const auto &o : z.records()) sq += (o.value - mean) * (o.value - mean);
    const double var = sq / static_cast<double>(obs.size());
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.1);
  }
  SUBCASE("out of range values clamp to the extreme quantiles") {
    const ObservationSet obs({{0, 0, 0.0, 1.0}, {0, 0, 1.0, 2.0}, {0, 0, 2.0, 3.0}}, 1, 1);
    const auto subjects = all_subjects(obs);
    const auto [z, state] = normal_score_transform(obs, subjects);
    CHECK(state.forward(0, 100.0) == state.forward(0, 3.0));
    CHECK(std::isfinite(state.forward(0, -100.0)));
  }
  SUBCASE("task without fit observations is named") {
    const ObservationSet obs({{0, 0, 0.0, 1.0}, {1, 1, 0.0, 2.0}}, 2, 2,
                             {}, {"HR", "MAP"});
    const std::vector<int> fit{0};
    try {
      normal_score_transform(obs, fit);
      FAIL("expected a DataError");
    } catch (const DataError &e) {
      CHECK(std::string(e.what()).find("MAP") != std::string::npos);
    }
  }
  SUBCASE("json roundtrip") {
    const ObservationSet obs({{0, 0, 0.0, 1.0}, {0, 0, 1.0, 2.5}, {0, 0, 2.0, 3.0}}, 1, 1);
    const auto subjects = all_subjects(obs);
    const auto state = normal_score_transform(obs, subjects).second;
    const auto back = TransformState::from_json(state.to_json());
    CHECK(back.forward(0, 2.2) == state.forward(0, 2.2));
  }
}

TEST_CASE("pseudo tasks") {
  const ObservationSet obs({{0, 0, 2.0, 5.0},
                            {0, 0, 3.0, 6.0},
                            {0, 1, 3.0, 7.0},
                            {0, 1, 4.0, 8.0},
                            {0, 1, 5.0, 9.0},
                            {0, 0, 6.0, 1.0}},
                           1, 2);
  SUBCASE("lag zero copies the source") {
    TaskCatalog cat({"a", "b"});
    const int id = cat.add_lag(0, 0.0);
    const auto out = derive_pseudo_tasks(obs, cat);
    std::vector<Observation> src, copy;
    for (const auto &o : out.records()) {
      if (o.task == 0) src.push_back({0, id, o.time, o.value});
      if (o.task == id) copy.push_back(o);
    }
    CHECK(src == copy);
  }
  SUBCASE("lag shifts forward") {
    TaskCatalog cat({"a", "b"});
    const int id = cat.add_lag(0, 2.0);
    const auto out = derive_pseudo_tasks(obs, cat);
    bool found = false;
    for (const auto &o : out.records())
      if (o.task == id && o.time == 4.0) found = o.value == 5.0;
    CHECK(found);
  }
  SUBCASE("constant task at every distinct time") {
    TaskCatalog cat({"a", "b"});
    const int id = cat.add_constant();
    const auto out = derive_pseudo_tasks(obs, cat);
    int count = 0;
    for (const auto &o : out.records())
      if (o.task == id) {
        ++count;
        CHECK(o.value == 1.0);
      }
    CHECK(count == 5);
  }
  SUBCASE("raw records untouched and derived ids contiguous") {
    TaskCatalog cat({"a", "b"});
    CHECK(cat.add_constant() == 2);
    CHECK(cat.add_lag(1, 1.5) == 3);
    const auto out = derive_pseudo_tasks(obs, cat);
    std::vector<Observation> raw;
    for (const auto &o : out.records())
      if (o.task < 2) raw.push_back(o);
    CHECK(raw == obs.records());
    CHECK(TaskCatalog::from_json(cat.to_json()) == cat);
  }
  SUBCASE("missing lag source") {
    TaskCatalog cat({"a", "b"});
    CHECK_THROWS_AS(cat.add_lag(5, 1.0), DataError);
  }
}

TEST_CASE("batches partition subjects") {
  auto make = [](int r) {
    std::vector<Observation> recs;
    for (int s = 0; s < r; ++s) recs.push_back({s, 0, 0.0, 1.0});
    return ObservationSet(recs, r, 1);
  };
  const auto four = make_batches(make(4), 2, 1);
  CHECK(four.size() == 2);
  CHECK(four[0].subjects.size() == 2);
  const auto five = make_batches(make(5), 2, 1);
  REQUIRE(five.size() == 3);
  CHECK(five[0].subjects.size() == 2);
  CHECK(five[1].subjects.size() == 2);
  CHECK(five[2].subjects.size() == 1);
  std::set<int> seen;
  for (const auto &b : five)
    for (int s : b.subjects) CHECK(seen.insert(s).second);
  CHECK(seen.size() == 5);
  const auto again = make_batches(make(5), 2, 1);
  for (std::size_t i = 0; i < five.size(); ++i) CHECK(five[i].subjects == again[i].subjects);
  CHECK_THROWS_AS(make_batches(make(3), 0, 1), ConfigError);
}
