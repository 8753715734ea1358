#include "fedseq/ingest.hpp"

#include <algorithm>
#include <map>
#include <unordered_set>

#include "fedseq/csv.hpp"

namespace fedseq {

namespace {

std::string at_line(const std::string& path, long line) {
  return path + ":" + std::to_string(line) + ": ";
}

}  // namespace

GroupTable read_group_table(const std::string& path, IngestReport& report) {
  GroupTable table;
  for (const auto& row : csv::read_file(path, {"raw_code", "group"})) {
    if (row.fields.size() != 2 || row.fields[0].empty() || row.fields[1].empty()) {
      report.issues.push_back(at_line(path, row.line_number) + "malformed group row");
      continue;
    }
    auto [it, inserted] = table.emplace(row.fields[0], row.fields[1]);
    if (!inserted && it->second != row.fields[1])
      report.issues.push_back(at_line(path, row.line_number) + "conflicting group for code " +
                              row.fields[0]);
  }
  return table;
}

std::vector<PatientRecord> read_visits(const std::string& path, const GroupTable& groups,
                                       IngestReport& report) {
  struct RawRow {
    std::int64_t admit = 0;
    int age = 0;
    int year = 0;
    std::string code;
  };
  // patient -> rows, keyed in first-seen order for stable output
  std::vector<std::string> patient_order;
  std::map<std::string, std::vector<RawRow>> rows_by_patient;

  const std::vector<std::string> header = {"patient_id", "admit_time_hours", "age_years",
                                           "calendar_year", "raw_code"};
  for (const auto& row : csv::read_file(path, header)) {
    if (row.fields.size() != 5) {
      report.issues.push_back(at_line(path, row.line_number) + "expected 5 fields");
      continue;
    }
    RawRow r;
    std::int64_t age = 0, year = 0;
    if (row.fields[0].empty() || row.fields[4].empty() ||
        !csv::parse_int64(row.fields[1], r.admit) || !csv::parse_int64(row.fields[2], age) ||
        !csv::parse_int64(row.fields[3], year) || age < 0) {
      report.issues.push_back(at_line(path, row.line_number) + "malformed visit row");
      continue;
    }
    r.age = static_cast<int>(age);
    r.year = static_cast<int>(year);
    r.code = row.fields[4];
    auto [it, inserted] = rows_by_patient.try_emplace(row.fields[0]);
    if (inserted) patient_order.push_back(row.fields[0]);
    it->second.push_back(std::move(r));
  }

  std::vector<PatientRecord> cohort;
  for (const auto& pid : patient_order) {
    auto& raw = rows_by_patient[pid];
    std::stable_sort(raw.begin(), raw.end(),
                     [](const RawRow& a, const RawRow& b) { return a.admit < b.admit; });
    PatientRecord rec;
    rec.patient_id = pid;
    for (const auto& r : raw) {
      if (rec.visits.empty() || rec.visits.back().admit_time_hours != r.admit) {
        rec.visits.push_back(Visit{{}, r.admit, r.age, r.year});
      }
      Visit& v = rec.visits.back();
      std::string g = map_code_to_group(r.code, groups);
      if (std::find(v.diagnoses.begin(), v.diagnoses.end(), g) == v.diagnoses.end())
        v.diagnoses.push_back(std::move(g));
    }
    try {
      validate_record(rec);
      cohort.push_back(std::move(rec));
    } catch (const std::exception& e) {
      report.issues.push_back(path + ": dropped patient " + pid + ": " + e.what());
    }
  }
  return cohort;
}

std::vector<TransferRecord> read_transfers(const std::string& path, IngestReport& report) {
  std::vector<TransferRecord> out;
  for (const auto& row : csv::read_file(path, {"patient_id", "care_unit", "duration_hours"})) {
    double dur = 0.0;
    if (row.fields.size() != 3 || row.fields[0].empty() || row.fields[1].empty() ||
        !csv::parse_double(row.fields[2], dur) || !(dur > 0.0)) {
      report.issues.push_back(at_line(path, row.line_number) + "malformed transfer row");
      continue;
    }
    out.push_back(TransferRecord{row.fields[0], row.fields[1], dur});
  }
  return out;
}

}  // namespace fedseq
