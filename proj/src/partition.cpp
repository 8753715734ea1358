#include "fedseq/partition.hpp"

#include <map>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace fedseq {

std::string assign_center(std::span<const TransferRecord> transfers) {
  if (transfers.empty()) throw std::invalid_argument("patient has no transfers");
  // std::map keeps units in lexicographic order, which is exactly the
  // tie-break rule: the first unit reaching the maximum wins.
  std::map<std::string, double> totals;
  for (const auto& t : transfers) {
    if (!(t.duration_hours > 0.0))
      throw std::invalid_argument("transfer duration must be positive (patient " +
                                  t.patient_id + ", unit " + t.care_unit + ")");
    totals[t.care_unit] += t.duration_hours;
  }
  const std::string* best = nullptr;
  double best_total = 0.0;
  for (const auto& [unit, total] : totals) {
    if (best == nullptr || total > best_total) {
      best = &unit;
      best_total = total;
    }
  }
  return *best;
}

PartitionResult partition_cohort(std::span<const PatientRecord> cohort,
                                 std::span<const TransferRecord> transfers) {
  std::unordered_map<std::string, std::vector<TransferRecord>> by_patient;
  for (const auto& t : transfers) by_patient[t.patient_id].push_back(t);

  PartitionResult result;
  std::map<std::string, std::vector<PatientRecord>> shards;
  for (const auto& p : cohort) {
    auto it = by_patient.find(p.patient_id);
    if (it == by_patient.end() || it->second.empty()) {
      result.missing_transfer_patients.push_back(p.patient_id);
      continue;
    }
    shards[assign_center(it->second)].push_back(p);
  }
  for (auto& [center, patients] : shards)
    result.clients.push_back(ClientDataset{center, std::move(patients)});
  return result;
}

std::string partition_summary_json(const PartitionResult& result) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& c : result.clients) j[c.center_id] = c.patients.size();
  return j.dump(2);
}

}  // namespace fedseq
