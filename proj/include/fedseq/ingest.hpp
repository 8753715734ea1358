#pragma once

#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/partition.hpp"

namespace fedseq {

// Result of reading one of the ingestion CSVs. Malformed rows never abort the
// load; they are reported with their line numbers and skipped. Patients whose
// assembled record breaks the PatientRecord invariants are dropped the same
// way.
struct IngestReport {
  std::vector<std::string> issues;

  bool clean() const { return issues.empty(); }
};

// groups.csv: raw_code,group. Duplicate raw codes are rejected.
GroupTable read_group_table(const std::string& path, IngestReport& report);

// visits.csv: patient_id,admit_time_hours,age_years,calendar_year,raw_code.
// Rows sharing (patient_id, admit_time_hours) form one visit; codes are
// mapped through the group table with duplicates within a visit removed.
std::vector<PatientRecord> read_visits(const std::string& path, const GroupTable& groups,
                                       IngestReport& report);

// transfers.csv: patient_id,care_unit,duration_hours (duration > 0).
std::vector<TransferRecord> read_transfers(const std::string& path, IngestReport& report);

}  // namespace fedseq
