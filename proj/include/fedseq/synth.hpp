#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/partition.hpp"

namespace fedseq {

// Controls for the seeded synthetic cohort. Small heterogeneity_alpha makes
// the per-center diagnosis distributions diverge; home_stay_bias scales the
// home center's stay so longest-stay assignment recovers it. recurrence mixes
// a patient's own past diagnoses back into later visits (chronic-condition
// structure); the per-center marginals are unchanged because past diagnoses
// are themselves center-distributed.
struct SynthConfig {
  int num_patients = 2000;
  int num_centers = 8;
  int num_groups = 100;
  double mean_visits = 5.0;
  int max_dx_per_visit = 4;
  double heterogeneity_alpha = 0.1;
  double home_stay_bias = 3.0;
  double recurrence = 0.6;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SynthOutput {
  std::vector<PatientRecord> cohort;
  std::vector<TransferRecord> transfers;
  std::vector<std::string> group_labels;  // sorted
  std::vector<std::string> center_ids;    // sorted
  std::vector<std::string> home_center;   // parallel to cohort
};

SynthOutput generate_cohort(const SynthConfig& config);

// Writes visits.csv, groups.csv (identity grouping) and transfers.csv in the
// ingestion schema so synthetic and real data share one path.
void write_cohort_csvs(const SynthOutput& out, const std::string& directory);

struct HeterogeneityReport {
  struct PairDistance {
    std::string center_a;
    std::string center_b;
    double tv = 0.0;
  };
  std::vector<PairDistance> pairs;
  double mean_tv = 0.0;
  std::vector<std::string> warnings;  // skipped empty shards
};

// Pairwise total-variation distances between the centers' empirical
// diagnosis-group frequencies.
HeterogeneityReport heterogeneity_report(std::span<const ClientDataset> clients);

std::string heterogeneity_report_json(const HeterogeneityReport& report);

}  // namespace fedseq
