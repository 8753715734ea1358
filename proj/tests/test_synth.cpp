#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/ingest.hpp"
#include "fedseq/partition.hpp"
#include "fedseq/rng.hpp"
#include "fedseq/synth.hpp"

using namespace fedseq;

namespace {

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig c;
  c.num_patients = 300;
  c.num_centers = 4;
  c.num_groups = 20;
  c.mean_visits = 4.0;
  c.heterogeneity_alpha = 0.1;
  c.seed = seed;
  return c;
}

std::string cohort_fingerprint(const SynthOutput& out) {
  std::string s;
  for (const auto& p : out.cohort) {
    s += p.patient_id + "|";
    for (const auto& v : p.visits) {
      s += std::to_string(v.admit_time_hours) + "," + std::to_string(v.age_years) + "," +
           std::to_string(v.calendar_year) + ":";
      for (const auto& d : v.diagnoses) s += d + ";";
    }
  }
  for (const auto& t : out.transfers)
    s += t.patient_id + "/" + t.care_unit + "/" + std::to_string(t.duration_hours);
  return s;
}

double mean_tv(const SynthOutput& out) {
  PartitionResult part = partition_cohort(out.cohort, out.transfers);
  return heterogeneity_report(part.clients).mean_tv;
}

}  // namespace

TEST_CASE("generate_cohort honors counts and record invariants") {
  SynthOutput out = generate_cohort(small_config());
  CHECK(out.cohort.size() == 300);
  CHECK(out.home_center.size() == out.cohort.size());
  CHECK(out.center_ids.size() == 4);
  CHECK(out.group_labels.size() == 20);
  CHECK(std::is_sorted(out.group_labels.begin(), out.group_labels.end()));

  std::set<std::string> with_transfers;
  for (const auto& t : out.transfers) {
    CHECK(t.duration_hours > 0.0);
    with_transfers.insert(t.patient_id);
  }
  CHECK(with_transfers.size() == out.cohort.size());

  for (const auto& p : out.cohort) {
    REQUIRE(p.num_visits() >= 1);
    CHECK_NOTHROW(validate_record(p));
    for (const auto& v : p.visits) {
      CHECK(v.diagnoses.size() >= 1);
      CHECK(v.diagnoses.size() <= static_cast<std::size_t>(small_config().max_dx_per_visit));
      std::set<std::string> uniq(v.diagnoses.begin(), v.diagnoses.end());
      CHECK(uniq.size() == v.diagnoses.size());
      CHECK(v.age_years >= 18);
    }
  }
}

TEST_CASE("generate_cohort is deterministic per seed and distinct across seeds") {
  SynthOutput a = generate_cohort(small_config(7));
  SynthOutput b = generate_cohort(small_config(7));
  CHECK(cohort_fingerprint(a) == cohort_fingerprint(b));

  int distinct = 0;
  const int pairs = 20;
  for (int s = 0; s < pairs; ++s) {
    SynthOutput x = generate_cohort(small_config(100 + s));
    SynthOutput y = generate_cohort(small_config(200 + s));
    if (cohort_fingerprint(x) != cohort_fingerprint(y)) ++distinct;
  }
  CHECK(distinct == pairs);
}

TEST_CASE("small alpha produces more divergent centers than large alpha") {
  SynthConfig skewed = small_config(3);
  skewed.heterogeneity_alpha = 0.1;
  SynthConfig flat = small_config(3);
  flat.heterogeneity_alpha = 100.0;
  const double tv_skewed = mean_tv(generate_cohort(skewed));
  const double tv_flat = mean_tv(generate_cohort(flat));
  CHECK(tv_skewed > tv_flat);
  CHECK(tv_skewed > 0.5);
  CHECK(tv_flat < 0.35);
}

TEST_CASE("longest-stay assignment recovers the home center on the default config") {
  SynthConfig c;  // default: home_stay_bias = 3
  c.num_patients = 500;
  c.seed = 5;
  SynthOutput out = generate_cohort(c);

  std::map<std::string, std::vector<TransferRecord>> by_patient;
  for (const auto& t : out.transfers) by_patient[t.patient_id].push_back(t);

  int recovered = 0;
  for (std::size_t i = 0; i < out.cohort.size(); ++i) {
    const auto& ts = by_patient.at(out.cohort[i].patient_id);
    CHECK(ts.size() >= 1);
    CHECK(ts.size() <= 3);
    if (assign_center(ts) == out.home_center[i]) ++recovered;
  }
  CHECK(recovered >= 475);  // >= 95%
}

TEST_CASE("recurrence replays groups from the patient's own history") {
  // flat profiles so chance repeats stay rare and the knob's effect is visible
  SynthConfig with = small_config(11);
  with.recurrence = 0.9;
  with.mean_visits = 6.0;
  with.heterogeneity_alpha = 100.0;
  SynthConfig without = with;
  without.recurrence = 0.0;

  auto repeat_rate = [](const SynthOutput& out) {
    std::int64_t repeats = 0, total = 0;
    for (const auto& p : out.cohort) {
      std::set<std::string> seen;
      for (const auto& v : p.visits) {
        for (const auto& d : v.diagnoses) {
          if (!seen.empty()) {
            ++total;
            if (seen.count(d)) ++repeats;
          }
        }
        for (const auto& d : v.diagnoses) seen.insert(d);
      }
    }
    return total == 0 ? 0.0 : static_cast<double>(repeats) / static_cast<double>(total);
  };

  CHECK(repeat_rate(generate_cohort(with)) > repeat_rate(generate_cohort(without)) + 0.2);
}

TEST_CASE("heterogeneity_report computes pairwise total variation") {
  auto shard = [](const char* id, std::vector<std::string> groups) {
    ClientDataset c;
    c.center_id = id;
    for (const auto& g : groups)
      c.patients.push_back({std::string("p") + id + g, {Visit{{g}, 0, 50, 2000}}});
    return c;
  };

  SUBCASE("identical shards have distance zero") {
    std::vector<ClientDataset> clients = {shard("A", {"x", "y"}), shard("B", {"x", "y"})};
    auto rep = heterogeneity_report(clients);
    REQUIRE(rep.pairs.size() == 1);
    CHECK(rep.pairs[0].tv == doctest::Approx(0.0));
  }
  SUBCASE("disjoint single-group shards have distance one") {
    std::vector<ClientDataset> clients = {shard("A", {"x"}), shard("B", {"y"})};
    auto rep = heterogeneity_report(clients);
    CHECK(rep.pairs[0].tv == doctest::Approx(1.0));
    CHECK(rep.mean_tv == doctest::Approx(1.0));
  }
  SUBCASE("half overlap gives one half") {
    // p = (0.5, 0.5) vs q = (1, 0)
    std::vector<ClientDataset> clients = {shard("A", {"x", "y"}), shard("B", {"x"})};
    auto rep = heterogeneity_report(clients);
    CHECK(rep.pairs[0].tv == doctest::Approx(0.5));
  }
  SUBCASE("empty shards are skipped with a warning") {
    std::vector<ClientDataset> clients = {shard("A", {"x"}), ClientDataset{"B", {}},
                                          shard("C", {"y"})};
    auto rep = heterogeneity_report(clients);
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].find("B") != std::string::npos);
    CHECK(rep.pairs.size() == 1);  // only A-C remains
  }
}

TEST_CASE("written CSVs ingest back into the same cohort") {
  SynthOutput out = generate_cohort(small_config(21));
  const auto dir = std::filesystem::temp_directory_path() / "fedseq_synth_roundtrip";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_cohort_csvs(out, dir.string());

  IngestReport report;
  GroupTable table = read_group_table((dir / "groups.csv").string(), report);
  auto cohort = read_visits((dir / "visits.csv").string(), table, report);
  auto transfers = read_transfers((dir / "transfers.csv").string(), report);
  CHECK(report.clean());

  REQUIRE(cohort.size() == out.cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    CHECK(cohort[i].patient_id == out.cohort[i].patient_id);
    REQUIRE(cohort[i].visits.size() == out.cohort[i].visits.size());
    for (std::size_t v = 0; v < cohort[i].visits.size(); ++v)
      CHECK(cohort[i].visits[v].diagnoses == out.cohort[i].visits[v].diagnoses);
  }
  REQUIRE(transfers.size() == out.transfers.size());
  for (std::size_t i = 0; i < transfers.size(); ++i) {
    CHECK(transfers[i].patient_id == out.transfers[i].patient_id);
    CHECK(transfers[i].care_unit == out.transfers[i].care_unit);
    CHECK(transfers[i].duration_hours == doctest::Approx(out.transfers[i].duration_hours));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation rejects bad settings") {
  SynthConfig c = small_config();
  c.num_patients = 0;
  CHECK_THROWS(generate_cohort(c));
  c = small_config();
  c.num_groups = 1;
  CHECK_THROWS(generate_cohort(c));
  c = small_config();
  c.heterogeneity_alpha = 0.0;
  CHECK_THROWS(generate_cohort(c));
  c = small_config();
  c.mean_visits = 1.0;
  CHECK_THROWS(generate_cohort(c));
  c = small_config();
  c.home_stay_bias = 0.5;
  CHECK_THROWS(generate_cohort(c));
  c = small_config();
  c.recurrence = 1.5;
  CHECK_THROWS(generate_cohort(c));
}
