#include "fedseq/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedseq/csv.hpp"
#include "fedseq/metrics.hpp"

namespace fedseq {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::vector<const InputSequence*> gather(std::span<const InputSequence> data,
                                         std::span<const std::size_t> order, std::size_t begin,
                                         std::size_t end) {
  std::vector<const InputSequence*> ptrs;
  ptrs.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k) ptrs.push_back(&data[order[k]]);
  return ptrs;
}

Mat<float> label_matrix(std::span<const NextVisitExample* const> examples, int groups) {
  Mat<float> labels(static_cast<Eigen::Index>(examples.size()), groups);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& lab = examples[i]->labels;
    if (static_cast<int>(lab.size()) != groups)
      throw std::invalid_argument("label vector length does not match group count");
    for (int g = 0; g < groups; ++g)
      labels(static_cast<Eigen::Index>(i), g) = lab[static_cast<std::size_t>(g)] ? 1.0f : 0.0f;
  }
  return labels;
}

}  // namespace

MaskedBatch mask_batch(const Batch& batch, int vocab_size, double mask_prob, Rng& rng) {
  if (mask_prob < 0.0 || mask_prob >= 1.0)
    throw std::invalid_argument("mask_batch: mask_prob must lie in [0, 1)");
  const int num_disease = vocab_size - Vocabulary::kFirstDisease;
  if (num_disease <= 0) throw std::invalid_argument("mask_batch: vocabulary has no disease tokens");

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < batch.tokens.size(); ++i)
    if (Vocabulary::is_disease(batch.tokens[i])) eligible.push_back(i);
  if (eligible.empty()) throw std::invalid_argument("mask_batch: batch has no disease tokens");

  MaskedBatch out;
  out.batch = batch;

  auto corrupt = [&](std::size_t idx) {
    out.targets.seq_index.push_back(static_cast<std::int32_t>(idx / batch.len));
    out.targets.position.push_back(static_cast<std::int32_t>(idx % batch.len));
    out.targets.token.push_back(batch.tokens[idx]);
    double u = rng.u01();
    if (u < 0.8) {
      out.batch.tokens[idx] = Vocabulary::kMask;
    } else if (u < 0.9) {
      out.batch.tokens[idx] =
          Vocabulary::kFirstDisease +
          static_cast<std::int32_t>(rng.bounded(static_cast<std::uint64_t>(num_disease)));
    }  // else left unchanged
  };

  auto pass = [&]() {
    for (std::size_t idx : eligible)
      if (rng.u01() < mask_prob) corrupt(idx);
  };
  pass();
  if (out.targets.size() == 0) pass();
  if (out.targets.size() == 0) corrupt(eligible[rng.bounded(eligible.size())]);
  return out;
}

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,train_loss,val_metric\n";
  for (const auto& row : log.rows)
    out << row.epoch << ',' << csv::format_double(row.train_loss) << ','
        << csv::format_double(row.val_metric) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::size_t select_best(std::span<const double> metrics) {
  if (metrics.empty()) throw std::invalid_argument("select_best: empty metric history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < metrics.size(); ++i)
    if (metrics[i] > metrics[best]) best = i;
  return best;
}

double run_mlm_epoch(ModelParams<float>& params, AdamState<float>& adam,
                     std::span<const InputSequence> train, Rng& rng) {
  if (train.empty()) throw std::invalid_argument("run_mlm_epoch: empty training set");
  const HyperParams& h = params.hyper;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  double weighted = 0.0;
  std::size_t total = 0;
  const std::size_t bs = static_cast<std::size_t>(h.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(start + bs, order.size());
    auto ptrs = gather(train, order, start, end);
    Batch batch = Batch::from(std::span<const InputSequence* const>(ptrs));
    MaskedBatch masked = mask_batch(batch, h.vocab, h.mask_prob, rng);
    auto res = backward(params, masked.batch, masked.targets);
    adam_step(params, res.grads, adam, h);
    weighted += res.loss * static_cast<double>(ptrs.size());
    total += ptrs.size();
  }
  return weighted / static_cast<double>(total);
}

double run_nextvisit_epoch(ModelParams<float>& params, AdamState<float>& adam,
                           std::span<const PatientRecord> train, const Vocabulary& vocab,
                           Rng& rng) {
  if (train.empty()) throw std::invalid_argument("run_nextvisit_epoch: empty training set");
  const HyperParams& h = params.hyper;
  const EncodingConfig enc = h.encoding();

  std::vector<NextVisitExample> examples;
  examples.reserve(train.size());
  for (const PatientRecord& p : train) {
    const int n = p.num_visits();
    if (n < 2)
      throw std::invalid_argument("run_nextvisit_epoch: patient " + p.patient_id +
                                  " has no next visit");
    const int j = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n - 1)));
    examples.push_back(make_nextvisit_example(p, j, vocab, enc));
  }

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);

  double weighted = 0.0;
  std::size_t total = 0;
  const std::size_t bs = static_cast<std::size_t>(h.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(start + bs, order.size());
    std::vector<const NextVisitExample*> chunk;
    std::vector<const InputSequence*> inputs;
    chunk.reserve(end - start);
    inputs.reserve(end - start);
    for (std::size_t k = start; k < end; ++k) {
      chunk.push_back(&examples[order[k]]);
      inputs.push_back(&examples[order[k]].input);
    }
    Batch batch = Batch::from(std::span<const InputSequence* const>(inputs));
    Mat<float> labels = label_matrix(chunk, h.groups);
    auto res = backward(params, batch, labels);
    adam_step(params, res.grads, adam, h);
    weighted += res.loss * static_cast<double>(chunk.size());
    total += chunk.size();
  }
  return weighted / static_cast<double>(total);
}

double mlm_precision(const ModelParams<float>& params, std::span<const InputSequence> dataset,
                     double mask_prob, std::uint64_t eval_seed) {
  if (dataset.empty()) throw std::invalid_argument("mlm_precision: empty dataset");
  const HyperParams& h = params.hyper;
  Rng rng(substream(eval_seed, Stream::kMask));

  std::size_t correct = 0, total = 0;
  const std::size_t bs = static_cast<std::size_t>(h.batch_size);
  for (std::size_t start = 0; start < dataset.size(); start += bs) {
    const std::size_t end = std::min(start + bs, dataset.size());
    std::vector<const InputSequence*> ptrs;
    ptrs.reserve(end - start);
    for (std::size_t k = start; k < end; ++k) ptrs.push_back(&dataset[k]);
    Batch batch = Batch::from(std::span<const InputSequence* const>(ptrs));
    MaskedBatch masked = mask_batch(batch, h.vocab, mask_prob, rng);
    Mat<float> logits = forward(params, masked.batch, Head::kMlm);
    for (std::size_t t = 0; t < masked.targets.size(); ++t) {
      const Eigen::Index row =
          static_cast<Eigen::Index>(masked.targets.seq_index[t]) * batch.len +
          masked.targets.position[t];
      Eigen::Index argmax = 0;
      for (Eigen::Index i = 1; i < logits.cols(); ++i)
        if (logits(row, i) > logits(row, argmax)) argmax = i;
      if (argmax == masked.targets.token[t]) ++correct;
    }
    total += masked.targets.size();
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double evaluate_nextvisit_ap(const ModelParams<float>& params,
                             std::span<const NextVisitExample> dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate_nextvisit_ap: empty dataset");
  const HyperParams& h = params.hyper;

  std::vector<double> scores;
  std::vector<std::uint8_t> relevance;
  scores.reserve(dataset.size() * static_cast<std::size_t>(h.groups));
  relevance.reserve(scores.capacity());

  const std::size_t bs = static_cast<std::size_t>(h.batch_size);
  for (std::size_t start = 0; start < dataset.size(); start += bs) {
    const std::size_t end = std::min(start + bs, dataset.size());
    std::vector<const InputSequence*> inputs;
    inputs.reserve(end - start);
    for (std::size_t k = start; k < end; ++k) inputs.push_back(&dataset[k].input);
    Batch batch = Batch::from(std::span<const InputSequence* const>(inputs));
    Mat<float> logits = forward(params, batch, Head::kNextVisit);
    for (std::size_t k = start; k < end; ++k) {
      const auto& lab = dataset[k].labels;
      if (static_cast<int>(lab.size()) != h.groups)
        throw std::invalid_argument("evaluate_nextvisit_ap: label length mismatch");
      for (int g = 0; g < h.groups; ++g) {
        scores.push_back(static_cast<double>(logits(static_cast<Eigen::Index>(k - start), g)));
        relevance.push_back(lab[static_cast<std::size_t>(g)]);
      }
    }
  }
  return average_precision(scores, relevance);
}

TrainResult train_mlm(std::span<const InputSequence> train, std::span<const InputSequence> val,
                      const HyperParams& hyper, int epochs, std::uint64_t seed) {
  if (epochs < 1) throw std::invalid_argument("train_mlm: epochs must be >= 1");
  hyper.validate();
  ModelParams<float> params = init_params<float>(hyper, seed);
  AdamState<float> adam(hyper);

  TrainResult out{params, {}};
  double best = -std::numeric_limits<double>::infinity();
  for (int e = 1; e <= epochs; ++e) {
    Rng rng(substream(seed, Stream::kEpoch, static_cast<std::uint64_t>(e), 0));
    double loss = run_mlm_epoch(params, adam, train, rng);
    double metric = kNan;
    if (!val.empty())
      metric = mlm_precision(params, val, hyper.mask_prob,
                             substream(seed, Stream::kEval, static_cast<std::uint64_t>(e), 0));
    out.log.rows.push_back({e, loss, metric});
    if (val.empty() || metric > best) {
      best = metric;
      out.params = params;
      out.log.selected_epoch = e;
    }
  }
  return out;
}

ModelParams<float> transfer_pretrained(const ModelParams<float>& init, std::uint64_t seed) {
  ModelParams<float> out = init;
  ModelParams<float> fresh = init_params<float>(init.hyper, seed);
  const ParamLayout lo = out.layout();
  out.at(lo.next_w()) = fresh.at(lo.next_w());
  out.at(lo.next_b()) = fresh.at(lo.next_b());
  return out;
}

TrainResult train_nextvisit(std::span<const PatientRecord> train,
                            std::span<const NextVisitExample> val, const Vocabulary& vocab,
                            const ModelParams<float>& init, const HyperParams& hyper, int epochs,
                            std::uint64_t seed) {
  if (epochs < 1) throw std::invalid_argument("train_nextvisit: epochs must be >= 1");
  hyper.validate();
  {
    const auto want = tensor_specs(hyper);
    const auto have = tensor_specs(init.hyper);
    if (want.size() != have.size())
      throw std::invalid_argument("train_nextvisit: init params not shape-congruent");
    for (std::size_t i = 0; i < want.size(); ++i)
      if (want[i].rows != have[i].rows || want[i].cols != have[i].cols)
        throw std::invalid_argument("train_nextvisit: init params not shape-congruent in " +
                                    want[i].name);
  }

  ModelParams<float> params = transfer_pretrained(init, seed);
  params.hyper = hyper;
  AdamState<float> adam(hyper);

  TrainResult out{params, {}};
  double best = -std::numeric_limits<double>::infinity();
  for (int e = 1; e <= epochs; ++e) {
    Rng rng(substream(seed, Stream::kEpoch, static_cast<std::uint64_t>(e), 0));
    double loss = run_nextvisit_epoch(params, adam, train, vocab, rng);
    double metric = val.empty() ? kNan : evaluate_nextvisit_ap(params, val);
    out.log.rows.push_back({e, loss, metric});
    if (val.empty() || metric > best) {
      best = metric;
      out.params = params;
      out.log.selected_epoch = e;
    }
  }
  return out;
}

std::vector<InputSequence> build_mlm_dataset(std::span<const PatientRecord> cohort,
                                             const Vocabulary& vocab, const EncodingConfig& cfg) {
  std::vector<InputSequence> out;
  out.reserve(cohort.size());
  for (const PatientRecord& p : cohort)
    out.push_back(encode_history(p, p.num_visits(), vocab, cfg));
  return out;
}

std::vector<PatientRecord> eligible_ft_patients(std::span<const PatientRecord> cohort) {
  std::vector<PatientRecord> out;
  for (const PatientRecord& p : cohort)
    if (p.num_visits() >= 2) out.push_back(p);
  return out;
}

std::vector<NextVisitExample> build_eval_examples(std::span<const PatientRecord> cohort,
                                                  const Vocabulary& vocab,
                                                  const EncodingConfig& cfg, std::uint64_t seed) {
  Rng rng(substream(seed, Stream::kPivot));
  std::vector<NextVisitExample> out;
  for (const PatientRecord& p : cohort) {
    const int n = p.num_visits();
    if (n < 2) continue;
    const int j = 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n - 1)));
    out.push_back(make_nextvisit_example(p, j, vocab, cfg));
  }
  return out;
}

}  // namespace fedseq
