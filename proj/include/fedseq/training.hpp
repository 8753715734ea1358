#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/model.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {

struct MaskedBatch {
  Batch batch;  // tokens corrupted in place, other lanes untouched
  MlmTargets targets;
};

// 80/10/10 masking over disease-token positions. Zero-selection batches are
// re-drawn once, then one random disease position is force-selected. Throws
// when the batch holds no disease tokens.
MaskedBatch mask_batch(const Batch& batch, int vocab_size, double mask_prob, Rng& rng);

struct TrainLog {
  struct Row {
    int epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;
  };
  std::vector<Row> rows;
  int selected_epoch = 0;  // 1-based; argmax of val_metric, first on ties
};

void write_train_log(const std::string& path, const TrainLog& log);

// Argmax index, first occurrence on ties. Throws on empty input.
std::size_t select_best(std::span<const double> metrics);

// One shuffled pass of masked-LM training; returns the example-weighted mean
// batch loss. The rng drives the shuffle and the masking draws in order.
double run_mlm_epoch(ModelParams<float>& params, AdamState<float>& adam,
                     std::span<const InputSequence> train, Rng& rng);

// One pass of next-visit training with pivots resampled per patient from the
// rng (dataset order), then shuffled into mini-batches.
double run_nextvisit_epoch(ModelParams<float>& params, AdamState<float>& adam,
                           std::span<const PatientRecord> train, const Vocabulary& vocab,
                           Rng& rng);

// Fraction of masked positions whose argmax logit equals the original token,
// under masking fixed by eval_seed.
double mlm_precision(const ModelParams<float>& params, std::span<const InputSequence> dataset,
                     double mask_prob, std::uint64_t eval_seed);

// Micro AP over the flattened (example x label) logits of the whole dataset.
double evaluate_nextvisit_ap(const ModelParams<float>& params,
                             std::span<const NextVisitExample> dataset);

struct TrainResult {
  ModelParams<float> params;
  TrainLog log;
};

TrainResult train_mlm(std::span<const InputSequence> train, std::span<const InputSequence> val,
                      const HyperParams& hyper, int epochs, std::uint64_t seed);

// Copies every tensor from init except the next-visit head, which is redrawn
// from init_params(init.hyper, seed).
ModelParams<float> transfer_pretrained(const ModelParams<float>& init, std::uint64_t seed);

TrainResult train_nextvisit(std::span<const PatientRecord> train,
                            std::span<const NextVisitExample> val, const Vocabulary& vocab,
                            const ModelParams<float>& init, const HyperParams& hyper, int epochs,
                            std::uint64_t seed);

// Full-history encoding per patient.
std::vector<InputSequence> build_mlm_dataset(std::span<const PatientRecord> cohort,
                                             const Vocabulary& vocab, const EncodingConfig& cfg);

// Patients admitting a next-visit example (n >= 2), order preserved.
std::vector<PatientRecord> eligible_ft_patients(std::span<const PatientRecord> cohort);

// One example per eligible patient with the pivot fixed from seed.
std::vector<NextVisitExample> build_eval_examples(std::span<const PatientRecord> cohort,
                                                  const Vocabulary& vocab,
                                                  const EncodingConfig& cfg, std::uint64_t seed);

}  // namespace fedseq
