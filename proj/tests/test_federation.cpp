#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "fedseq/data.hpp"
#include "fedseq/federation.hpp"
#include "fedseq/model.hpp"
#include "fedseq/rng.hpp"
#include "fedseq/synth.hpp"
#include "fedseq/training.hpp"

using namespace fedseq;

namespace {

std::vector<std::string> client_names(int k) {
  std::vector<std::string> ids;
  for (int i = 0; i < k; ++i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "c%02d", i);
    ids.emplace_back(buf);
  }
  return ids;
}

HyperParams unit_hyper(int groups) {
  HyperParams h;
  h.hidden = 8;
  h.layers = 1;
  h.heads = 2;
  h.ffn_dim = 16;
  h.max_len = 16;
  h.vocab = Vocabulary::kFirstDisease + groups;
  h.groups = groups;
  h.batch_size = 4;
  return h;
}

ModelParams<float> constant_params(const HyperParams& h, float value) {
  ModelParams<float> p(h);
  for (auto& t : p.tensors) t.setConstant(value);
  return p;
}

ClientUpdate make_update(const HyperParams& h, float value, std::int64_t n,
                         const std::string& id) {
  ClientUpdate u;
  u.params = constant_params(h, value);
  u.num_examples = n;
  u.client_id = id;
  return u;
}

// Cohort-backed federation fixture: one shard per center.
struct FedFixture {
  SynthOutput synth;
  Vocabulary vocab;
  HyperParams hyper;
  std::vector<FedClient> clients;
  EvalData val;

  explicit FedFixture(int patients, std::uint64_t seed, int centers = 3) {
    SynthConfig cfg;
    cfg.num_patients = patients;
    cfg.num_centers = centers;
    cfg.num_groups = 12;
    cfg.mean_visits = 4.0;
    cfg.max_dx_per_visit = 3;
    cfg.heterogeneity_alpha = 1.0;
    cfg.seed = seed;
    synth = generate_cohort(cfg);
    vocab = build_vocabulary(synth.group_labels);
    hyper = unit_hyper(vocab.num_disease_tokens());
    hyper.max_len = 24;

    auto [train, test] = split_cohort(synth.cohort, 0.8, seed);
    PartitionResult part = partition_cohort(train, synth.transfers);
    for (const ClientDataset& shard : part.clients) {
      FedClient c;
      c.client_id = shard.center_id;
      c.train.mlm_sequences = build_mlm_dataset(shard.patients, vocab, hyper.encoding());
      c.train.ft_patients = eligible_ft_patients(shard.patients);
      if (c.num_examples(Task::kMlm) > 0) clients.push_back(std::move(c));
    }
    val.mlm_sequences = build_mlm_dataset(test, vocab, hyper.encoding());
    val.next_examples =
        build_eval_examples(eligible_ft_patients(test), vocab, hyper.encoding(), seed);
  }
};

}  // namespace

TEST_CASE("select_clients samples max(1, round(C*K)) ids in ascending order") {
  Rng rng(5);
  const auto ids39 = client_names(39);
  auto picked = select_clients(ids39, 0.1, rng);
  CHECK(picked.size() == 4);  // round(3.9)
  CHECK(std::is_sorted(picked.begin(), picked.end()));
  CHECK(std::set<std::string>(picked.begin(), picked.end()).size() == picked.size());
  for (const auto& id : picked)
    CHECK(std::find(ids39.begin(), ids39.end(), id) != ids39.end());

  const auto ids3 = client_names(3);
  CHECK(select_clients(ids3, 0.01, rng).size() == 1);  // floor is 1
  CHECK(select_clients(ids3, 1.0, rng) == ids3);       // everyone, sorted

  const auto ids10 = client_names(10);
  CHECK(select_clients(ids10, 0.25, rng).size() == 3);  // llround(2.5) rounds up
  CHECK(select_clients(ids10, 0.24, rng).size() == 2);

  CHECK_THROWS_AS(select_clients(std::vector<std::string>{}, 0.5, rng), std::invalid_argument);
  CHECK_THROWS_AS(select_clients(ids3, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(select_clients(ids3, 1.5, rng), std::invalid_argument);
}

TEST_CASE("select_clients draws vary over rounds but replay exactly") {
  const auto ids = client_names(20);
  Rng a(9), b(9);
  std::set<std::vector<std::string>> seen;
  for (int round = 0; round < 30; ++round) {
    auto pa = select_clients(ids, 0.25, a);
    auto pb = select_clients(ids, 0.25, b);
    CHECK(pa == pb);
    seen.insert(pa);
  }
  CHECK(seen.size() > 5);  // 5 of 20 has many possible draws
}

TEST_CASE("aggregate computes the sample-weighted mean") {
  HyperParams h = unit_hyper(6);
  std::vector<ClientUpdate> updates;
  updates.push_back(make_update(h, 1.0f, 1, "a"));
  updates.push_back(make_update(h, 4.0f, 3, "b"));
  ModelParams<float> mean = aggregate(updates);
  for (const auto& t : mean.tensors) CHECK((t.array() == 3.25f).all());
}

TEST_CASE("aggregate of identical updates is bit-exact idempotent") {
  HyperParams h = unit_hyper(6);
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    ModelParams<float> x = init_params<float>(h, seed);
    std::vector<ClientUpdate> updates;
    Rng rng(seed);
    const int k = 2 + static_cast<int>(rng.bounded(5));
    for (int i = 0; i < k; ++i) {
      ClientUpdate u;
      u.params = x;
      u.num_examples = 1 + static_cast<std::int64_t>(rng.bounded(100000));
      u.client_id = "c" + std::to_string(i);
      updates.push_back(std::move(u));
    }
    ModelParams<float> out = aggregate(updates);
    CHECK(max_abs_diff(out, x) == 0.0);
  }
}

TEST_CASE("aggregate is order-invariant, n-scale-invariant, and hull-bounded") {
  HyperParams h = unit_hyper(4);
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.bounded(4));
    std::vector<ClientUpdate> updates;
    for (int i = 0; i < k; ++i) {
      ClientUpdate u;
      u.params = init_params<float>(h, rng.next());
      u.num_examples = 1 + static_cast<std::int64_t>(rng.bounded(500));
      u.client_id = "c" + std::to_string(i);
      updates.push_back(std::move(u));
    }
    ModelParams<float> base = aggregate(updates);

    std::vector<ClientUpdate> reversed(updates.rbegin(), updates.rend());
    CHECK(max_abs_diff(aggregate(reversed), base) <= 1e-12);

    std::vector<ClientUpdate> scaled = updates;
    for (auto& u : scaled) u.num_examples *= 10;
    CHECK(max_abs_diff(aggregate(scaled), base) <= 1e-12);

    for (std::size_t t = 0; t < base.tensors.size(); ++t) {
      Mat<float> lo = updates[0].params.tensors[t];
      Mat<float> hi = updates[0].params.tensors[t];
      for (const auto& u : updates) {
        lo = lo.cwiseMin(u.params.tensors[t]);
        hi = hi.cwiseMax(u.params.tensors[t]);
      }
      CHECK(((base.tensors[t] - lo).array() >= -1e-12f).all());
      CHECK(((hi - base.tensors[t]).array() >= -1e-12f).all());
    }
  }
}

TEST_CASE("aggregate rejects malformed update sets") {
  HyperParams h = unit_hyper(4);
  CHECK_THROWS_AS(aggregate(std::vector<ClientUpdate>{}), std::invalid_argument);

  std::vector<ClientUpdate> zero;
  zero.push_back(make_update(h, 1.0f, 0, "a"));
  CHECK_THROWS_AS(aggregate(zero), std::invalid_argument);

  HyperParams other = unit_hyper(9);
  std::vector<ClientUpdate> mixed;
  mixed.push_back(make_update(h, 1.0f, 1, "a"));
  mixed.push_back(make_update(other, 1.0f, 1, "b"));
  CHECK_THROWS_WITH_AS(aggregate(mixed), doctest::Contains("emb.tok"), std::invalid_argument);
}

TEST_CASE("local_update is a pure function of its seed schedule") {
  FedFixture fx(40, 3);
  REQUIRE(!fx.clients.empty());
  FederationConfig cfg;
  cfg.client_fraction = 1.0;
  cfg.rounds = 1;
  cfg.local_epochs = 2;
  cfg.task = Task::kMlm;
  cfg.hyper = fx.hyper;
  cfg.seed = 7;

  ModelParams<float> global = init_params<float>(fx.hyper, 7);
  AdamState<float> adam1(fx.hyper), adam2(fx.hyper);
  double loss1 = 0.0, loss2 = 0.0;
  ClientUpdate u1 = local_update(global, fx.clients[0], fx.vocab, cfg, 1, 0, adam1, &loss1);
  ClientUpdate u2 = local_update(global, fx.clients[0], fx.vocab, cfg, 1, 0, adam2, &loss2);
  CHECK(max_abs_diff(u1.params, u2.params) == 0.0);
  CHECK(loss1 == loss2);
  CHECK(u1.num_examples == static_cast<std::int64_t>(fx.clients[0].train.mlm_sequences.size()));
  CHECK(max_abs_diff(u1.params, global) > 0.0);

  // a different client rank re-keys the epoch stream
  AdamState<float> adam3(fx.hyper);
  double loss3 = 0.0;
  ClientUpdate u3 = local_update(global, fx.clients[0], fx.vocab, cfg, 1, 1, adam3, &loss3);
  CHECK(max_abs_diff(u1.params, u3.params) > 0.0);

  FedClient empty;
  empty.client_id = "empty";
  AdamState<float> adam4(fx.hyper);
  CHECK_THROWS_AS(local_update(global, empty, fx.vocab, cfg, 1, 0, adam4, nullptr),
                  std::invalid_argument);
}

TEST_CASE("single-client full-participation FedAvg equals centralized training") {
  FedFixture fx(40, 5, 1);
  REQUIRE(fx.clients.size() == 1);

  for (Task task : {Task::kMlm, Task::kNextVisit}) {
    FederationConfig cfg;
    cfg.client_fraction = 1.0;
    cfg.rounds = 4;
    cfg.local_epochs = 1;
    cfg.task = task;
    cfg.hyper = fx.hyper;
    cfg.seed = 11;

    FedResult fed = run_fedavg(fx.clients, fx.vocab, cfg, fx.val, nullptr);
    TrainResult central = run_centralized(fx.clients[0].train, fx.val, fx.vocab, nullptr, cfg, 4);
    CHECK(max_abs_diff(fed.params, central.params) <= 1e-6);
    CHECK(fed.selected_round == central.log.selected_epoch);
    REQUIRE(fed.rounds.size() == 4);
    for (std::size_t r = 0; r < 4; ++r)
      CHECK(fed.rounds[r].val_metric == central.log.rows[r].val_metric);
  }
}

TEST_CASE("run_fedavg logs every round and replays bit-identically") {
  FedFixture fx(60, 9, 3);
  REQUIRE(fx.clients.size() == 3);
  FederationConfig cfg;
  cfg.client_fraction = 0.5;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.task = Task::kMlm;
  cfg.hyper = fx.hyper;
  cfg.seed = 13;

  FedResult a = run_fedavg(fx.clients, fx.vocab, cfg, fx.val, nullptr);
  FedResult b = run_fedavg(fx.clients, fx.vocab, cfg, fx.val, nullptr);
  CHECK(max_abs_diff(a.params, b.params) == 0.0);
  CHECK(a.selected_round == b.selected_round);
  REQUIRE(a.rounds.size() == 3);
  std::vector<double> metrics;
  for (std::size_t r = 0; r < 3; ++r) {
    const RoundLog& log = a.rounds[r];
    CHECK(log.round == static_cast<int>(r) + 1);
    CHECK(log.client_ids.size() == 2);  // round(0.5 * 3) with a floor of 1
    CHECK(std::is_sorted(log.client_ids.begin(), log.client_ids.end()));
    REQUIRE(log.n_examples.size() == log.client_ids.size());
    REQUIRE(log.local_losses.size() == log.client_ids.size());
    for (double loss : log.local_losses) CHECK(std::isfinite(loss));
    CHECK(log.val_metric == b.rounds[r].val_metric);
    metrics.push_back(log.val_metric);
  }
  CHECK(a.selected_round == static_cast<int>(select_best(metrics)) + 1);

  // a supplied initialization changes the trajectory
  ModelParams<float> init = init_params<float>(fx.hyper, 99);
  FedResult c = run_fedavg(fx.clients, fx.vocab, cfg, fx.val, &init);
  CHECK(max_abs_diff(a.params, c.params) > 0.0);
}

TEST_CASE("run_local_baseline reports per-client APs and their weighted mean") {
  FedFixture fx(80, 21, 3);
  LocalBaselineConfig cfg;
  cfg.hyper = fx.hyper;
  cfg.mlm_epochs = 1;
  cfg.ft_epochs = 1;
  cfg.seed = 4;

  std::vector<LocalClientSplit> splits;
  auto [train, test] = split_cohort(fx.synth.cohort, 0.8, 21);
  PartitionResult train_part = partition_cohort(train, fx.synth.transfers);
  PartitionResult test_part = partition_cohort(test, fx.synth.transfers);
  for (const ClientDataset& shard : train_part.clients) {
    LocalClientSplit split;
    split.client_id = shard.center_id;
    auto [tr, va] = split_cohort(shard.patients, 0.9, 4);
    split.train.mlm_sequences = build_mlm_dataset(tr, fx.vocab, fx.hyper.encoding());
    split.train.ft_patients = eligible_ft_patients(tr);
    split.val.mlm_sequences = build_mlm_dataset(va, fx.vocab, fx.hyper.encoding());
    split.val.next_examples =
        build_eval_examples(eligible_ft_patients(va), fx.vocab, fx.hyper.encoding(), 4);
    for (const ClientDataset& ts : test_part.clients)
      if (ts.center_id == shard.center_id)
        split.test.next_examples =
            build_eval_examples(eligible_ft_patients(ts.patients), fx.vocab,
                                fx.hyper.encoding(), 5);
    splits.push_back(std::move(split));
  }
  // a client with no test examples must be skipped, not scored
  LocalClientSplit orphan;
  orphan.client_id = "zz-empty";
  orphan.train = splits[0].train;
  orphan.val = splits[0].val;
  splits.push_back(std::move(orphan));

  LocalBaselineResult r1 = run_local_baseline(splits, fx.vocab, cfg);
  LocalBaselineResult r2 = run_local_baseline(splits, fx.vocab, cfg);
  REQUIRE(r1.clients.size() == splits.size());

  double weighted = 0.0;
  std::int64_t total = 0;
  int evaluated = 0;
  for (const LocalOutcome& o : r1.clients) {
    if (o.client_id == "zz-empty") {
      CHECK(!o.evaluated);
      CHECK(!o.note.empty());
      continue;
    }
    if (!o.evaluated) continue;
    ++evaluated;
    CHECK(o.ap >= 0.0);
    CHECK(o.ap <= 1.0);
    weighted += static_cast<double>(o.n_train) * o.ap;
    total += o.n_train;
  }
  REQUIRE(evaluated >= 2);
  CHECK(r1.weighted_ap == doctest::Approx(weighted / static_cast<double>(total)).epsilon(1e-12));
  CHECK(r1.weighted_ap == r2.weighted_ap);
}

TEST_CASE("round logs serialize one CSV row per sampled client") {
  RoundLog r1;
  r1.round = 1;
  r1.client_ids = {"icu", "ward"};
  r1.n_examples = {12, 30};
  r1.local_losses = {2.5, 1.25};
  r1.val_metric = 0.5;
  RoundLog r2;
  r2.round = 2;
  r2.client_ids = {"ward"};
  r2.n_examples = {30};
  r2.local_losses = {0.75};
  r2.val_metric = 0.625;

  const auto dir = std::filesystem::temp_directory_path() / "fedseq_roundlog";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "round_log.csv").string();
  write_round_log(path, std::vector<RoundLog>{r1, r2});

  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "round,client_id,n_examples,local_loss,global_val_metric");
  CHECK(lines[1] == "1,icu,12,2.5,0.5");
  CHECK(lines[2] == "1,ward,30,1.25,0.5");
  CHECK(lines[3] == "2,ward,30,0.75,0.625");
  std::filesystem::remove_all(dir);
}

TEST_CASE("federation config validation") {
  FederationConfig cfg;
  cfg.hyper = unit_hyper(4);
  CHECK_NOTHROW(cfg.validate());
  cfg.client_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.client_fraction = 0.5;
  cfg.rounds = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.rounds = 2;
  cfg.local_epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
