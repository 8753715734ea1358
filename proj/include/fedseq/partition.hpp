#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedseq/data.hpp"

namespace fedseq {

// One stay interval in some care unit, taken from the transfers table.
struct TransferRecord {
  std::string patient_id;
  std::string care_unit;
  double duration_hours = 0.0;  // strictly positive
};

// A center's local shard. Across a partition every patient appears in
// exactly one shard.
struct ClientDataset {
  std::string center_id;
  std::vector<PatientRecord> patients;
};

// Longest cumulative stay wins; ties go to the lexicographically smallest
// unit id. All records must belong to the same patient.
std::string assign_center(std::span<const TransferRecord> transfers);

struct PartitionResult {
  std::vector<ClientDataset> clients;  // sorted by center_id
  std::vector<std::string> missing_transfer_patients;
};

PartitionResult partition_cohort(std::span<const PatientRecord> cohort,
                                 std::span<const TransferRecord> transfers);

// Flat JSON object {center_id: patient_count}.
std::string partition_summary_json(const PartitionResult& result);

}  // namespace fedseq
