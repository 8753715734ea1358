#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedseq/data.hpp"
#include "fedseq/ingest.hpp"
#include "fedseq/partition.hpp"
#include "fedseq/rng.hpp"

using namespace fedseq;

namespace {

Visit visit(std::vector<std::string> dx, std::int64_t t, int age, int year) {
  return Visit{std::move(dx), t, age, year};
}

PatientRecord patient(std::string id, std::vector<Visit> visits) {
  return PatientRecord{std::move(id), std::move(visits)};
}

// Vocabulary whose disease ids are 5.."g5"..9: labels sorted as a,b,g7,g8,g9.
Vocabulary tiny_vocab() {
  return Vocabulary({"a", "b", "g7", "g8", "g9"});
}

std::vector<PatientRecord> numbered_cohort(int n, int visits_per_patient = 1) {
  std::vector<PatientRecord> cohort;
  for (int i = 0; i < n; ++i) {
    std::vector<Visit> vs;
    for (int v = 0; v < visits_per_patient; ++v)
      vs.push_back(visit({"g" + std::to_string(i % 7)}, v * 24, 40 + v, 2000 + v));
    cohort.push_back(patient("p" + std::to_string(i), std::move(vs)));
  }
  return cohort;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name, const std::string& contents) const {
    const std::string full = (path / name).string();
    std::ofstream out(full);
    out << contents;
    return full;
  }
};

}  // namespace

TEST_CASE("map_code_to_group hits the table and falls back to the unknown group") {
  GroupTable table{{"I10", "HTN"}};
  CHECK(map_code_to_group("I10", table) == "HTN");
  CHECK(map_code_to_group("Z99X", table) == kUnknownGroup);
}

TEST_CASE("group table image equals its distinct values") {
  GroupTable table;
  for (int i = 0; i < 1000; ++i) table["code" + std::to_string(i)] = "G" + std::to_string(i % 37);
  std::set<std::string> image;
  for (const auto& [code, group] : table) image.insert(map_code_to_group(code, table));
  CHECK(image.size() == 37);
}

TEST_CASE("validate_record rejects broken records") {
  CHECK_NOTHROW(validate_record(patient("p", {visit({"a"}, 0, 50, 2000)})));
  CHECK_THROWS_AS(validate_record(patient("p", {})), std::invalid_argument);
  CHECK_THROWS_AS(validate_record(patient("p", {visit({}, 0, 50, 2000)})),
                  std::invalid_argument);
  // unsorted admissions
  CHECK_THROWS_AS(
      validate_record(patient("p", {visit({"a"}, 10, 50, 2000), visit({"a"}, 5, 50, 2000)})),
      std::invalid_argument);
  // decreasing age
  CHECK_THROWS_AS(
      validate_record(patient("p", {visit({"a"}, 0, 50, 2000), visit({"a"}, 9, 49, 2000)})),
      std::invalid_argument);
}

TEST_CASE("vocabulary layout: specials then sorted disease labels") {
  std::vector<PatientRecord> cohort = {patient("p1", {visit({"B"}, 0, 40, 2000)}),
                                       patient("p2", {visit({"A"}, 0, 41, 2001)})};
  Vocabulary v = build_vocabulary(cohort);
  CHECK(v.size() == 7);
  CHECK(v.id("A") == 5);
  CHECK(v.id("B") == 6);
  CHECK(v.id("missing") == -1);
  CHECK(v.token(Vocabulary::kPad) == "[PAD]");
  CHECK(Vocabulary::is_disease(5));
  CHECK_FALSE(Vocabulary::is_disease(4));
  CHECK(Vocabulary::label_index(7) == 2);
  CHECK(Vocabulary::disease_id(2) == 7);

  std::swap(cohort[0], cohort[1]);
  Vocabulary again = build_vocabulary(cohort);
  CHECK(again.size() == v.size());
  for (int id = 0; id < v.size(); ++id) CHECK(again.token(id) == v.token(id));
}

TEST_CASE("vocabulary size is group count plus five specials") {
  for (int g : {1, 2, 41, 416}) {
    std::vector<std::string> labels;
    for (int i = 0; i < g; ++i) labels.push_back("grp" + std::to_string(i));
    CHECK(build_vocabulary(labels).size() == g + 5);
  }
}

TEST_CASE("vocabulary rejects empty input and duplicate labels") {
  CHECK_THROWS(build_vocabulary(std::vector<PatientRecord>{}));
  CHECK_THROWS(build_vocabulary(std::vector<std::string>{}));
  CHECK_THROWS(Vocabulary({"A", "A"}));
  // the label-universe overload dedupes instead
  std::vector<std::string> dup = {"B", "A", "B"};
  Vocabulary v = build_vocabulary(dup);
  CHECK(v.size() == 7);
  CHECK(v.id("A") == 5);
}

TEST_CASE("encode_history lays out CLS, visit tokens, and SEPs") {
  Vocabulary v = tiny_vocab();
  PatientRecord p = patient("p", {visit({"g7", "g9"}, 0, 50, 2010), visit({"g7"}, 24, 51, 2011)});
  EncodingConfig cfg;
  cfg.max_len = 10;

  InputSequence s = encode_history(p, 2, v, cfg);
  CHECK(s.token_ids ==
        std::vector<std::int32_t>{2, 7, 9, 3, 7, 3, 0, 0, 0, 0});
  CHECK(s.segment_ids == std::vector<std::int32_t>{0, 0, 0, 0, 1, 1, 0, 0, 0, 0});
  CHECK(s.position_ids == std::vector<std::int32_t>{0, 0, 1, 2, 0, 1, 0, 0, 0, 0});
  CHECK(s.attention_mask == std::vector<std::int32_t>{1, 1, 1, 1, 1, 1, 0, 0, 0, 0});
  // CLS inherits visit 1's age/year buckets; PAD lanes are 0
  CHECK(s.age_ids[0] == 50);
  CHECK(s.age_ids[4] == 51);
  CHECK(s.age_ids[6] == 0);
  CHECK(s.year_ids[0] == 2010 - cfg.year_base);
  CHECK(s.year_ids[4] == 2011 - cfg.year_base);
  CHECK_FALSE(s.truncated);

  InputSequence prefix = encode_history(p, 1, v, cfg);
  CHECK(prefix.token_ids == std::vector<std::int32_t>{2, 7, 9, 3, 0, 0, 0, 0, 0, 0});
}

TEST_CASE("encode_history drops oldest visits when the layout overflows") {
  Vocabulary v = tiny_vocab();
  // three visits of two diagnoses each: 1 + 3*(2+1) = 10 > 8, so visit 1 goes
  PatientRecord p = patient("p", {visit({"g7", "g8"}, 0, 50, 2000),
                                  visit({"g8", "g9"}, 24, 51, 2001),
                                  visit({"g9", "g7"}, 48, 52, 2002)});
  EncodingConfig cfg;
  cfg.max_len = 8;
  InputSequence s = encode_history(p, 3, v, cfg);
  CHECK(s.token_ids == std::vector<std::int32_t>{2, 8, 9, 3, 9, 7, 3, 0});
  CHECK_FALSE(s.truncated);
  // CLS takes the first kept visit's values
  CHECK(s.age_ids[0] == 51);
}

TEST_CASE("encode_history cuts an oversized single visit and flags it") {
  Vocabulary v = tiny_vocab();
  PatientRecord p = patient("p", {visit({"g7", "g8", "g9", "a", "b"}, 0, 50, 2000)});
  EncodingConfig cfg;
  cfg.max_len = 5;  // room for CLS + 3 tokens + SEP
  InputSequence s = encode_history(p, 1, v, cfg);
  CHECK(s.truncated);
  CHECK(s.token_ids == std::vector<std::int32_t>{2, 7, 8, 9, 3});
  CHECK(s.attention_mask == std::vector<std::int32_t>{1, 1, 1, 1, 1});
}

TEST_CASE("encode_history bounds and bucket clamps") {
  Vocabulary v = tiny_vocab();
  PatientRecord p = patient("p", {visit({"g7"}, 0, 300, 3000)});
  EncodingConfig cfg;
  cfg.max_len = 8;
  CHECK_THROWS(encode_history(p, 0, v, cfg));
  CHECK_THROWS(encode_history(p, 2, v, cfg));
  InputSequence s = encode_history(p, 1, v, cfg);
  CHECK(s.age_ids[1] == cfg.age_buckets - 1);
  CHECK(s.year_ids[1] == cfg.year_buckets - 1);
  PatientRecord old = patient("q", {visit({"g7"}, 0, 30, 1800)});
  CHECK(encode_history(old, 1, v, cfg).year_ids[1] == 0);
}

TEST_CASE("encoding invariants hold on random patients") {
  Vocabulary v = tiny_vocab();
  const std::vector<std::string> labels = {"a", "b", "g7", "g8", "g9"};
  Rng rng(99);
  EncodingConfig cfg;
  cfg.max_len = 16;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Visit> visits;
    int age = 20 + static_cast<int>(rng.bounded(50));
    int year = 1990 + static_cast<int>(rng.bounded(20));
    const int n = 1 + static_cast<int>(rng.bounded(6));
    for (int i = 0; i < n; ++i) {
      std::vector<std::string> dx;
      const int k = 1 + static_cast<int>(rng.bounded(3));
      for (int d = 0; d < k; ++d) dx.push_back(labels[rng.bounded(labels.size())]);
      dx.erase(std::unique(dx.begin(), dx.end()), dx.end());
      visits.push_back(visit(dx, i * 24, age, year));
      const int bump = static_cast<int>(rng.bounded(3));
      age += bump;
      year += bump;
    }
    PatientRecord p = patient("p", visits);
    const int j = 1 + static_cast<int>(rng.bounded(n));
    InputSequence s = encode_history(p, j, v, cfg);

    REQUIRE(s.length() == cfg.max_len);
    for (int i = 0; i < s.length(); ++i) {
      CHECK((s.attention_mask[i] == 0) == (s.token_ids[i] == Vocabulary::kPad));
      if (i == 0 || s.token_ids[i - 1] == Vocabulary::kSep)
        if (s.attention_mask[i] == 1) CHECK(s.position_ids[i] == 0);
    }

    // round-trip: strip specials, split on SEP, compare with the kept visits
    std::vector<std::vector<std::int32_t>> decoded(1);
    for (int i = 1; i < s.length(); ++i) {
      if (s.token_ids[i] == Vocabulary::kSep)
        decoded.emplace_back();
      else if (s.token_ids[i] != Vocabulary::kPad)
        decoded.back().push_back(s.token_ids[i]);
    }
    while (!decoded.empty() && decoded.back().empty()) decoded.pop_back();
    REQUIRE(decoded.size() <= static_cast<std::size_t>(j));
    const int first_kept = j - static_cast<int>(decoded.size());
    for (std::size_t d = 0; d < decoded.size(); ++d) {
      const Visit& orig = p.visits[first_kept + d];
      std::vector<std::int32_t> expect;
      for (const auto& g : orig.diagnoses) expect.push_back(v.id(g));
      if (s.truncated && d + 1 == decoded.size())
        expect.resize(decoded[d].size());
      CHECK(decoded[d] == expect);
    }
  }
}

TEST_CASE("make_nextvisit_example targets the following visit") {
  Vocabulary v = tiny_vocab();
  PatientRecord p = patient("p", {visit({"g8"}, 0, 50, 2000), visit({"g7"}, 24, 51, 2001),
                                  visit({"g7", "g9"}, 48, 52, 2002)});
  EncodingConfig cfg;
  cfg.max_len = 12;

  NextVisitExample one = make_nextvisit_example(p, 1, v, cfg);
  CHECK(one.pivot_j == 1);
  REQUIRE(one.labels.size() == static_cast<std::size_t>(v.num_disease_tokens()));
  CHECK(std::count(one.labels.begin(), one.labels.end(), 1) == 1);
  CHECK(one.labels[Vocabulary::label_index(v.id("g7"))] == 1);

  NextVisitExample two = make_nextvisit_example(p, 2, v, cfg);
  CHECK(std::count(two.labels.begin(), two.labels.end(), 1) == 2);
  CHECK(two.labels[Vocabulary::label_index(v.id("g7"))] == 1);
  CHECK(two.labels[Vocabulary::label_index(v.id("g9"))] == 1);

  CHECK_THROWS(make_nextvisit_example(p, 3, v, cfg));
  PatientRecord single = patient("s", {visit({"g7"}, 0, 50, 2000)});
  CHECK_THROWS(make_nextvisit_example(single, 1, v, cfg));
}

TEST_CASE("filter_min_visits keeps exactly the long-enough patients") {
  std::vector<PatientRecord> cohort;
  for (int n : {1, 3, 5, 16}) cohort.push_back(numbered_cohort(1, n)[0]);
  for (std::size_t i = 0; i < cohort.size(); ++i) cohort[i].patient_id = "p" + std::to_string(i);

  CHECK(filter_min_visits(cohort, 1).size() == 4);
  auto t15 = filter_min_visits(cohort, 15);
  REQUIRE(t15.size() == 1);
  CHECK(t15[0].num_visits() == 16);

  auto once = filter_min_visits(cohort, 3);
  auto twice = filter_min_visits(once, 3);
  REQUIRE(once.size() == twice.size());
  for (std::size_t i = 0; i < once.size(); ++i)
    CHECK(once[i].patient_id == twice[i].patient_id);
}

TEST_CASE("split_cohort partitions patients deterministically") {
  auto cohort = numbered_cohort(10);
  auto [train, test] = split_cohort(cohort, 0.8, 42);
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);

  auto [train2, test2] = split_cohort(cohort, 0.8, 42);
  for (std::size_t i = 0; i < train.size(); ++i)
    CHECK(train[i].patient_id == train2[i].patient_id);

  std::set<std::string> seen;
  for (const auto& p : train) seen.insert(p.patient_id);
  for (const auto& p : test) CHECK(seen.insert(p.patient_id).second);
  CHECK(seen.size() == cohort.size());

  CHECK_THROWS(split_cohort(numbered_cohort(1), 0.8, 1));
}

TEST_CASE("split sizes follow round(fraction * n)") {
  auto cohort = numbered_cohort(7);
  CHECK(split_cohort(cohort, 0.5, 3).first.size() == 4);   // round(3.5)
  CHECK(split_cohort(cohort, 0.2, 3).first.size() == 1);   // round(1.4)
  CHECK(split_cohort(cohort, 0.92, 3).first.size() == 6);  // round(6.44)
}

TEST_CASE("assign_center picks the longest cumulative stay") {
  auto rec = [](const char* unit, double hours) {
    return TransferRecord{"p", unit, hours};
  };
  CHECK(assign_center(std::vector<TransferRecord>{rec("ICU", 48), rec("Ward", 72)}) == "Ward");
  CHECK(assign_center(std::vector<TransferRecord>{rec("ICU", 10), rec("Ward", 8),
                                                  rec("ICU", 1)}) == "ICU");
  CHECK(assign_center(std::vector<TransferRecord>{rec("A", 5), rec("B", 5)}) == "A");
  CHECK_THROWS(assign_center(std::vector<TransferRecord>{}));
}

TEST_CASE("assign_center equals brute force and ignores record order") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TransferRecord> transfers;
    const int n = 1 + static_cast<int>(rng.bounded(6));
    for (int i = 0; i < n; ++i) {
      const std::string unit = "U" + std::to_string(rng.bounded(4));
      // durations from a small grid so ties actually occur
      transfers.push_back({"p", unit, 1.0 + static_cast<double>(rng.bounded(4))});
    }

    std::map<std::string, double> sums;
    for (const auto& t : transfers) sums[t.care_unit] += t.duration_hours;
    std::string expect = sums.begin()->first;
    for (const auto& [unit, total] : sums)
      if (total > sums[expect] || (total == sums[expect] && unit < expect)) expect = unit;

    CHECK(assign_center(transfers) == expect);
    rng.shuffle(transfers);
    CHECK(assign_center(transfers) == expect);
  }
}

TEST_CASE("partition_cohort shards every patient exactly once") {
  auto cohort = numbered_cohort(20);
  std::vector<TransferRecord> transfers;
  Rng rng(11);
  for (const auto& p : cohort) {
    const int n = 1 + static_cast<int>(rng.bounded(3));
    for (int i = 0; i < n; ++i)
      transfers.push_back(
          {p.patient_id, "C" + std::to_string(rng.bounded(3)), 1.0 + rng.u01() * 10});
  }
  // one patient with no transfers at all
  cohort.push_back(patient("orphan", {visit({"g0"}, 0, 44, 2000)}));

  PartitionResult result = partition_cohort(cohort, transfers);
  std::size_t total = 0;
  std::set<std::string> seen;
  for (const auto& shard : result.clients) {
    total += shard.patients.size();
    for (const auto& p : shard.patients) CHECK(seen.insert(p.patient_id).second);
  }
  CHECK(total == 20);
  REQUIRE(result.missing_transfer_patients.size() == 1);
  CHECK(result.missing_transfer_patients[0] == "orphan");
  CHECK(std::is_sorted(result.clients.begin(), result.clients.end(),
                       [](const auto& a, const auto& b) { return a.center_id < b.center_id; }));

  // permuting the transfer table changes nothing
  rng.shuffle(transfers);
  PartitionResult again = partition_cohort(cohort, transfers);
  REQUIRE(again.clients.size() == result.clients.size());
  for (std::size_t i = 0; i < again.clients.size(); ++i) {
    CHECK(again.clients[i].center_id == result.clients[i].center_id);
    CHECK(again.clients[i].patients.size() == result.clients[i].patients.size());
  }
}

TEST_CASE("partition_cohort with a single unit returns one shard") {
  auto cohort = numbered_cohort(5);
  std::vector<TransferRecord> transfers;
  for (const auto& p : cohort) transfers.push_back({p.patient_id, "only", 5.0});
  PartitionResult result = partition_cohort(cohort, transfers);
  REQUIRE(result.clients.size() == 1);
  CHECK(result.clients[0].center_id == "only");
  CHECK(result.clients[0].patients.size() == 5);
  CHECK(result.missing_transfer_patients.empty());
}

TEST_CASE("partition summary is a flat center-to-count object") {
  PartitionResult result;
  result.clients.push_back({"A", numbered_cohort(2)});
  result.clients.push_back({"B", numbered_cohort(1)});
  const auto j = nlohmann::json::parse(partition_summary_json(result));
  CHECK(j == nlohmann::json{{"A", 2}, {"B", 1}});
}

TEST_CASE("ingestion reads the three CSVs and reports bad rows with line numbers") {
  TempDir dir("fedseq_ingest_test");
  const std::string groups = dir.file("groups.csv",
                                      "raw_code,group\n"
                                      "I10,HTN\n"
                                      "E11,DM\n"
                                      "bad_row_only_one_field\n");
  const std::string visits = dir.file("visits.csv",
                                      "patient_id,admit_time_hours,age_years,calendar_year,raw_code\n"
                                      "p1,0,50,2010,I10\n"
                                      "p1,0,50,2010,E11\n"
                                      "p1,24,51,2011,I10\n"
                                      "p2,0,not_a_number,2010,I10\n"
                                      "p3,0,40,2005,XXX\n");
  const std::string transfers = dir.file("transfers.csv",
                                         "patient_id,care_unit,duration_hours\n"
                                         "p1,ICU,10\n"
                                         "p1,Ward,3.5\n"
                                         "p9,ICU,-4\n");

  IngestReport report;
  GroupTable table = read_group_table(groups, report);
  CHECK(table.size() == 2);
  REQUIRE(report.issues.size() == 1);
  CHECK(report.issues[0].find(":4:") != std::string::npos);

  IngestReport vreport;
  auto cohort = read_visits(visits, table, vreport);
  REQUIRE(cohort.size() == 2);  // p2's only row is malformed, so p2 is gone
  CHECK(cohort[0].patient_id == "p1");
  REQUIRE(cohort[0].visits.size() == 2);
  CHECK(cohort[0].visits[0].diagnoses == std::vector<std::string>{"HTN", "DM"});
  CHECK(cohort[1].visits[0].diagnoses == std::vector<std::string>{kUnknownGroup});
  REQUIRE(vreport.issues.size() == 1);
  CHECK(vreport.issues[0].find(":5:") != std::string::npos);

  IngestReport treport;
  auto trecords = read_transfers(transfers, treport);
  CHECK(trecords.size() == 2);
  REQUIRE(treport.issues.size() == 1);
  CHECK(treport.issues[0].find(":4:") != std::string::npos);
}

TEST_CASE("ingestion rejects duplicate raw codes and drops invariant-breaking patients") {
  TempDir dir("fedseq_ingest_test2");
  const std::string groups = dir.file("groups.csv",
                                      "raw_code,group\n"
                                      "I10,HTN\n"
                                      "I10,OTHER\n");
  IngestReport report;
  GroupTable table = read_group_table(groups, report);
  CHECK(table.size() == 1);
  CHECK(table.at("I10") == "HTN");
  REQUIRE(report.issues.size() == 1);

  // age decreasing across visits breaks the record invariant
  const std::string visits = dir.file("visits.csv",
                                      "patient_id,admit_time_hours,age_years,calendar_year,raw_code\n"
                                      "p1,0,50,2010,I10\n"
                                      "p1,24,49,2011,I10\n"
                                      "p2,0,30,2000,I10\n");
  IngestReport vreport;
  auto cohort = read_visits(visits, table, vreport);
  REQUIRE(cohort.size() == 1);
  CHECK(cohort[0].patient_id == "p2");
  CHECK(vreport.issues.size() == 1);
}
