#include "fedseq/federation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include "fedseq/csv.hpp"

namespace fedseq {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double round_metric(const ModelParams<float>& global, const EvalData& val,
                    const FederationConfig& config, int round) {
  if (config.task == Task::kMlm) {
    if (val.mlm_sequences.empty()) return kNan;
    return mlm_precision(global, val.mlm_sequences, config.hyper.mask_prob,
                         substream(config.seed, Stream::kEval,
                                   static_cast<std::uint64_t>(round), 0));
  }
  if (val.next_examples.empty()) return kNan;
  return evaluate_nextvisit_ap(global, val.next_examples);
}

}  // namespace

void FederationConfig::validate() const {
  if (!(client_fraction > 0.0 && client_fraction <= 1.0))
    throw std::invalid_argument("federation: client_fraction must lie in (0, 1]");
  if (rounds < 1) throw std::invalid_argument("federation: rounds must be >= 1");
  if (local_epochs < 1) throw std::invalid_argument("federation: local_epochs must be >= 1");
  hyper.validate();
}

void write_round_log(const std::string& path, std::span<const RoundLog> rounds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "round,client_id,n_examples,local_loss,global_val_metric\n";
  for (const RoundLog& r : rounds) {
    for (std::size_t i = 0; i < r.client_ids.size(); ++i)
      out << r.round << ',' << r.client_ids[i] << ',' << r.n_examples[i] << ','
          << csv::format_double(r.local_losses[i]) << ','
          << csv::format_double(r.val_metric) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::string> select_clients(std::span<const std::string> client_ids, double fraction,
                                        Rng& rng) {
  if (client_ids.empty()) throw std::invalid_argument("select_clients: no clients");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("select_clients: fraction must lie in (0, 1]");
  const std::size_t k = client_ids.size();
  const std::size_t m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(k))));
  std::vector<std::string> pool(client_ids.begin(), client_ids.end());
  rng.shuffle(pool);
  pool.resize(std::min(m, k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

ClientUpdate local_update(const ModelParams<float>& global, const FedClient& client,
                          const Vocabulary& vocab, const FederationConfig& config, int round,
                          int client_rank, AdamState<float>& adam, double* mean_loss) {
  if (client.num_examples(config.task) == 0)
    throw std::invalid_argument("local_update: client " + client.client_id +
                                " has no training examples");
  ClientUpdate update;
  update.client_id = client.client_id;
  update.num_examples = static_cast<std::int64_t>(client.num_examples(config.task));
  update.params = global;

  double last_loss = 0.0;
  for (int e = 1; e <= config.local_epochs; ++e) {
    const std::uint64_t global_epoch =
        static_cast<std::uint64_t>(round - 1) * static_cast<std::uint64_t>(config.local_epochs) +
        static_cast<std::uint64_t>(e);
    Rng rng(substream(config.seed, Stream::kEpoch, global_epoch,
                      static_cast<std::uint64_t>(client_rank)));
    if (config.task == Task::kMlm)
      last_loss = run_mlm_epoch(update.params, adam, client.train.mlm_sequences, rng);
    else
      last_loss = run_nextvisit_epoch(update.params, adam, client.train.ft_patients, vocab, rng);
  }
  if (mean_loss) *mean_loss = last_loss;
  return update;
}

ModelParams<float> aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  const ModelParams<float>& first = updates[0].params;
  const auto specs = tensor_specs(first.hyper);

  std::int64_t total = 0;
  for (const ClientUpdate& u : updates) {
    if (u.num_examples <= 0)
      throw std::invalid_argument("aggregate: client " + u.client_id +
                                  " has non-positive sample count");
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (i >= u.params.tensors.size() ||
          u.params.tensors[i].rows() != first.tensors[i].rows() ||
          u.params.tensors[i].cols() != first.tensors[i].cols())
        throw std::invalid_argument("aggregate: shape mismatch in tensor " + specs[i].name +
                                    " from client " + u.client_id);
    }
    total += u.num_examples;
  }

  ModelParams<float> out(first.hyper);
  const double denom = static_cast<double>(total);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Mat<double> acc = Mat<double>::Zero(first.tensors[i].rows(), first.tensors[i].cols());
    for (const ClientUpdate& u : updates)
      acc += static_cast<double>(u.num_examples) * u.params.tensors[i].cast<double>();
    out.tensors[i] = (acc / denom).cast<float>();
  }
  return out;
}

FedResult run_fedavg(std::span<const FedClient> clients, const Vocabulary& vocab,
                     const FederationConfig& config, const EvalData& val,
                     const ModelParams<float>* init) {
  config.validate();

  std::map<std::string, const FedClient*> active;
  for (const FedClient& c : clients)
    if (c.num_examples(config.task) > 0) active.emplace(c.client_id, &c);
  if (active.empty()) throw std::invalid_argument("run_fedavg: no client has training examples");

  std::vector<std::string> ids;
  std::map<std::string, int> rank;
  for (const auto& [id, ptr] : active) {
    rank.emplace(id, static_cast<int>(ids.size()));
    ids.push_back(id);
  }

  ModelParams<float> global =
      init ? *init : init_params<float>(config.hyper, config.seed);
  std::map<std::string, AdamState<float>> adam_states;

  FedResult result{global, {}, 0};
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 1; r <= config.rounds; ++r) {
    Rng sel_rng(substream(config.seed, Stream::kSelect, static_cast<std::uint64_t>(r), 0));
    const auto selected = select_clients(ids, config.client_fraction, sel_rng);

    RoundLog log;
    log.round = r;
    std::vector<ClientUpdate> updates;
    updates.reserve(selected.size());
    for (const std::string& id : selected) {
      const FedClient& client = *active.at(id);
      AdamState<float>& adam =
          adam_states.try_emplace(id, config.hyper).first->second;
      double loss = 0.0;
      updates.push_back(local_update(global, client, vocab, config, r, rank.at(id), adam, &loss));
      log.client_ids.push_back(id);
      log.n_examples.push_back(updates.back().num_examples);
      log.local_losses.push_back(loss);
    }
    global = aggregate(updates);
    log.val_metric = round_metric(global, val, config, r);
    result.rounds.push_back(log);

    const bool no_val = std::isnan(log.val_metric);
    if (no_val || log.val_metric > best) {
      best = log.val_metric;
      result.params = global;
      result.selected_round = r;
    }
  }
  return result;
}

TrainResult run_centralized(const TrainData& train, const EvalData& val, const Vocabulary& vocab,
                            const ModelParams<float>* ft_init, const FederationConfig& config,
                            int epochs) {
  if (config.task == Task::kMlm)
    return train_mlm(train.mlm_sequences, val.mlm_sequences, config.hyper, epochs, config.seed);
  ModelParams<float> init =
      ft_init ? *ft_init : init_params<float>(config.hyper, config.seed);
  return train_nextvisit(train.ft_patients, val.next_examples, vocab, init, config.hyper, epochs,
                         config.seed);
}

LocalBaselineResult run_local_baseline(std::span<const LocalClientSplit> clients,
                                       const Vocabulary& vocab,
                                       const LocalBaselineConfig& config) {
  if (clients.empty()) throw std::invalid_argument("local baseline: no clients");
  config.hyper.validate();

  LocalBaselineResult result;
  double weighted = 0.0;
  std::int64_t total = 0;
  for (const LocalClientSplit& client : clients) {
    LocalOutcome outcome;
    outcome.client_id = client.client_id;
    outcome.n_train = static_cast<std::int64_t>(client.train.ft_patients.size());
    const std::uint64_t client_seed = mix_seed(config.seed, hash_string(client.client_id));

    if (client.train.mlm_sequences.empty() || client.train.ft_patients.empty()) {
      outcome.note = "no training examples";
      result.clients.push_back(std::move(outcome));
      continue;
    }
    if (client.test.next_examples.empty()) {
      outcome.note = "no test examples";
      result.clients.push_back(std::move(outcome));
      continue;
    }

    ModelParams<float> ft_init =
        config.mlm_epochs > 0
            ? train_mlm(client.train.mlm_sequences, client.val.mlm_sequences, config.hyper,
                        config.mlm_epochs, client_seed)
                  .params
            : init_params<float>(config.hyper, client_seed);
    TrainResult ft =
        train_nextvisit(client.train.ft_patients, client.val.next_examples, vocab, ft_init,
                        config.hyper, config.ft_epochs, client_seed);
    try {
      outcome.ap = evaluate_nextvisit_ap(ft.params, client.test.next_examples);
    } catch (const std::invalid_argument& e) {
      outcome.note = std::string("test AP undefined: ") + e.what();
      result.clients.push_back(std::move(outcome));
      continue;
    }
    outcome.evaluated = true;
    outcome.params = std::move(ft.params);
    weighted += static_cast<double>(outcome.n_train) * outcome.ap;
    total += outcome.n_train;
    result.clients.push_back(std::move(outcome));
  }
  if (total == 0)
    throw std::runtime_error("local baseline: no client produced a test AP");
  result.weighted_ap = weighted / static_cast<double>(total);
  return result;
}

}  // namespace fedseq
