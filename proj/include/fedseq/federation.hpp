#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/model.hpp"
#include "fedseq/rng.hpp"
#include "fedseq/training.hpp"

namespace fedseq {

enum class Task { kMlm, kNextVisit };

struct FederationConfig {
  double client_fraction = 0.1;
  int rounds = 1;
  int local_epochs = 1;
  Task task = Task::kMlm;
  HyperParams hyper;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainData {
  std::vector<InputSequence> mlm_sequences;   // full-history encodings
  std::vector<PatientRecord> ft_patients;     // all with >= 2 visits
};

struct EvalData {
  std::vector<InputSequence> mlm_sequences;
  std::vector<NextVisitExample> next_examples;  // fixed pivots
};

struct FedClient {
  std::string client_id;
  TrainData train;

  std::size_t num_examples(Task task) const {
    return task == Task::kMlm ? train.mlm_sequences.size() : train.ft_patients.size();
  }
};

struct ClientUpdate {
  ModelParams<float> params;
  std::int64_t num_examples = 0;
  std::string client_id;
};

struct RoundLog {
  int round = 0;
  std::vector<std::string> client_ids;
  std::vector<std::int64_t> n_examples;
  std::vector<double> local_losses;
  double val_metric = 0.0;
};

void write_round_log(const std::string& path, std::span<const RoundLog> rounds);

// Uniform sample without replacement of size max(1, round(C*K)), returned in
// ascending id order.
std::vector<std::string> select_clients(std::span<const std::string> client_ids, double fraction,
                                        Rng& rng);

// E local epochs from the global snapshot. The epoch RNG is keyed on the
// global epoch index (round-1)*E+e and the client's rank in the sorted id
// list, so results are independent of execution order. The Adam state
// persists across the client's rounds. mean_loss receives the last epoch's
// training loss.
ClientUpdate local_update(const ModelParams<float>& global, const FedClient& client,
                          const Vocabulary& vocab, const FederationConfig& config, int round,
                          int client_rank, AdamState<float>& adam, double* mean_loss);

// Sample-size-weighted average, accumulated in double.
ModelParams<float> aggregate(std::span<const ClientUpdate> updates);

struct FedResult {
  ModelParams<float> params;  // best validation round
  std::vector<RoundLog> rounds;
  int selected_round = 0;  // 1-based
};

FedResult run_fedavg(std::span<const FedClient> clients, const Vocabulary& vocab,
                     const FederationConfig& config, const EvalData& val,
                     const ModelParams<float>* init);

// Pooled-data training with the same seed/RNG schedule as the task loops.
TrainResult run_centralized(const TrainData& train, const EvalData& val, const Vocabulary& vocab,
                            const ModelParams<float>* ft_init, const FederationConfig& config,
                            int epochs);

struct LocalBaselineConfig {
  HyperParams hyper;
  int mlm_epochs = 1;  // 0 skips pretraining; fine-tune starts from a fresh init
  int ft_epochs = 1;
  std::uint64_t seed = 1;
};

struct LocalClientSplit {
  std::string client_id;
  TrainData train;
  EvalData val;
  EvalData test;
};

struct LocalOutcome {
  std::string client_id;
  std::int64_t n_train = 0;
  double ap = 0.0;
  bool evaluated = false;
  std::string note;  // reason when skipped
  std::optional<ModelParams<float>> params;
};

struct LocalBaselineResult {
  std::vector<LocalOutcome> clients;
  double weighted_ap = 0.0;  // sum n_k * ap_k / sum n_k over evaluated clients
};

// Per-client MLM pretraining plus fine-tuning, all local; clients without a
// usable test set are skipped and reported.
LocalBaselineResult run_local_baseline(std::span<const LocalClientSplit> clients,
                                       const Vocabulary& vocab,
                                       const LocalBaselineConfig& config);

}  // namespace fedseq
