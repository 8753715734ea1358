#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedseq/hyper.hpp"
#include "fedseq/synth.hpp"

namespace fedseq {

// Data source for one experiment: either the seeded generator (the cohort is
// regenerated per experiment seed) or a fixed trio of ingestion CSVs shared
// by every seed.
struct DataSourceConfig {
  bool synthetic = true;
  SynthConfig synth;  // synth.seed is overwritten by the experiment seed
  std::string visits_csv;
  std::string groups_csv;
  std::string transfers_csv;
};

struct ExperimentConfig {
  std::vector<int> thresholds = {1, 3, 5, 15};  // min-visit filters, ascending
  std::vector<std::string> regimes = {"FL", "CENTRALIZED", "LOCAL"};
  std::vector<std::string> pretraining = {"FL_MLM"};  // NONE | FL_MLM | CENTRAL_MLM
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  DataSourceConfig data;
  HyperParams hyper;  // vocab/groups are filled from the data per seed

  double client_fraction = 0.1;
  double ft_client_fraction = -1.0;  // < 0 means "same as client_fraction"
  int local_epochs = 1;
  int mlm_rounds = 30;
  int ft_rounds = 30;

  double resolved_ft_fraction() const {
    return ft_client_fraction < 0.0 ? client_fraction : ft_client_fraction;
  }

  int central_mlm_epochs = 500;
  int central_ft_epochs = 30;

  int local_mlm_epochs = 20;
  int local_ft_epochs = 20;

  double train_fraction = 0.8;  // patient-level test holdout
  double val_fraction = 0.1;    // carved out of the training portion

  std::string output_root = "runs";

  // mode is "experiment" (regime comparison, one pretraining condition) or
  // "compare" (FL only, several pretraining conditions including NONE).
  void validate(const std::string& mode) const;
};

struct ParsedExperiment {
  ExperimentConfig config;
  std::string mode;
};

// Accepts either a bare config object or a stored run.json wrapper
// {"run_id":..., "mode":..., "config":{...}}. Unknown keys are rejected with
// their full path.
ParsedExperiment parse_experiment_json(const nlohmann::json& j, const std::string& default_mode);

// Canonical snapshot with a fixed key order; equal configs serialize to equal
// strings.
nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& config);

// "run-" + 16 hex digits hashed from the canonical snapshot (minus
// output_root) and the mode. Identical configs always map to the same id.
std::string compute_run_id(const ExperimentConfig& config, const std::string& mode);

// Output root, with the FEDSEQ_RUN_DIR environment variable taking precedence
// over config.output_root when set and non-empty.
std::string resolve_output_root(const ExperimentConfig& config);

struct MeasurementRow {
  std::string run_id;
  std::string regime;       // FL | CENTRALIZED | LOCAL
  std::string pretraining;  // condition label, e.g. FL_MLM or NONE
  int min_visits = 0;
  std::uint64_t seed = 0;
  std::string split;        // test
  std::string metric_name;  // micro_ap, or "failure" for a failed cell
  double value = 0.0;       // NaN on failure
};

struct SummaryRow {
  std::string regime;
  std::string pretraining;
  int min_visits = 0;
  std::string metric_name;
  int n_seeds = 0;
  double mean = 0.0;
  double ci95_low = 0.0;   // valid only when has_ci
  double ci95_high = 0.0;  // valid only when has_ci
  bool has_ci = false;     // false for a single seed
};

// Per-group mean and normal-approximation 95% interval over seeds, grouping
// by (regime, pretraining, min_visits, metric_name) in first-appearance
// order. Failure rows are excluded.
std::vector<SummaryRow> summarize_rows(std::span<const MeasurementRow> rows);

struct MetricsReport {
  std::string run_id;
  std::string run_dir;  // directory holding run.json/metrics.csv/summary.csv
  std::vector<MeasurementRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<std::string> failures;  // one message per failed cell
};

void write_metrics_csv(const std::string& path, std::span<const MeasurementRow> rows);
void write_summary_csv(const std::string& path, std::span<const SummaryRow> rows);

// Full grid: seeds x thresholds x regimes under one pretraining condition.
// A failing cell is recorded (failure row + message) without aborting the
// rest of the grid.
MetricsReport run_experiment(const ExperimentConfig& config);

// FL fine-tuning from each pretraining condition on the same grid of seeds
// and thresholds.
MetricsReport compare_pretraining(const ExperimentConfig& config);

// Reloads a finished run directory and re-derives the summary from
// metrics.csv, verifying it matches summary.csv.
MetricsReport load_run(const std::string& run_dir);

}  // namespace fedseq
