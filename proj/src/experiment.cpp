#include "fedseq/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>

#include "fedseq/checkpoint.hpp"
#include "fedseq/csv.hpp"
#include "fedseq/federation.hpp"
#include "fedseq/ingest.hpp"
#include "fedseq/metrics.hpp"
#include "fedseq/partition.hpp"
#include "fedseq/rng.hpp"
#include "fedseq/training.hpp"

namespace fedseq {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void fail_cfg(const std::string& msg) {
  throw std::invalid_argument("config: " + msg);
}

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail_cfg((path.empty() ? std::string("document") : path) + " must be an object");
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) fail_cfg("unknown key \"" + join_path(path, it.key()) + "\"");
  }
}

int get_int(const json& j, const char* key, const std::string& path, int fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail_cfg(join_path(path, key) + " must be an integer");
  return v.get<int>();
}

double get_num(const json& j, const char* key, const std::string& path, double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number()) fail_cfg(join_path(path, key) + " must be a number");
  return v.get<double>();
}

std::string get_str(const json& j, const char* key, const std::string& path,
                    const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_string()) fail_cfg(join_path(path, key) + " must be a string");
  return v.get<std::string>();
}

std::vector<std::string> get_str_array(const json& j, const char* key, const std::string& path,
                                       std::vector<std::string> fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_array()) fail_cfg(join_path(path, key) + " must be an array");
  std::vector<std::string> out;
  for (const json& e : v) {
    if (!e.is_string()) fail_cfg(join_path(path, key) + " entries must be strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

void parse_hyper_overrides(const json& j, const std::string& path, HyperParams& h) {
  require_object(j, path);
  if (j.contains("vocab") || j.contains("groups"))
    fail_cfg(path + ": vocab and groups are derived from the data");
  check_keys(j, path,
             {"hidden", "layers", "heads", "ffn_dim", "max_len", "age_buckets", "year_buckets",
              "year_base", "learning_rate", "beta1", "beta2", "epsilon", "batch_size", "mask_prob",
              "dropout"});
  h.hidden = get_int(j, "hidden", path, h.hidden);
  h.layers = get_int(j, "layers", path, h.layers);
  h.heads = get_int(j, "heads", path, h.heads);
  h.ffn_dim = get_int(j, "ffn_dim", path, h.ffn_dim);
  h.max_len = get_int(j, "max_len", path, h.max_len);
  h.age_buckets = get_int(j, "age_buckets", path, h.age_buckets);
  h.year_buckets = get_int(j, "year_buckets", path, h.year_buckets);
  h.year_base = get_int(j, "year_base", path, h.year_base);
  h.learning_rate = get_num(j, "learning_rate", path, h.learning_rate);
  h.beta1 = get_num(j, "beta1", path, h.beta1);
  h.beta2 = get_num(j, "beta2", path, h.beta2);
  h.epsilon = get_num(j, "epsilon", path, h.epsilon);
  h.batch_size = get_int(j, "batch_size", path, h.batch_size);
  h.mask_prob = get_num(j, "mask_prob", path, h.mask_prob);
  h.dropout = get_num(j, "dropout", path, h.dropout);
}

void parse_data(const json& j, DataSourceConfig& data) {
  require_object(j, "data");
  check_keys(j, "data", {"synthetic", "csv"});
  if (j.contains("synthetic") && j.contains("csv"))
    fail_cfg("data: synthetic and csv are mutually exclusive");
  if (j.contains("csv")) {
    const json& c = j.at("csv");
    require_object(c, "data.csv");
    check_keys(c, "data.csv", {"visits", "groups", "transfers"});
    data.synthetic = false;
    data.visits_csv = get_str(c, "visits", "data.csv", "");
    data.groups_csv = get_str(c, "groups", "data.csv", "");
    data.transfers_csv = get_str(c, "transfers", "data.csv", "");
    return;
  }
  data.synthetic = true;
  if (!j.contains("synthetic")) return;
  const json& s = j.at("synthetic");
  require_object(s, "data.synthetic");
  check_keys(s, "data.synthetic",
             {"num_patients", "num_centers", "num_groups", "mean_visits", "max_dx_per_visit",
              "heterogeneity_alpha", "home_stay_bias", "recurrence"});
  SynthConfig& sc = data.synth;
  sc.num_patients = get_int(s, "num_patients", "data.synthetic", sc.num_patients);
  sc.num_centers = get_int(s, "num_centers", "data.synthetic", sc.num_centers);
  sc.num_groups = get_int(s, "num_groups", "data.synthetic", sc.num_groups);
  sc.mean_visits = get_num(s, "mean_visits", "data.synthetic", sc.mean_visits);
  sc.max_dx_per_visit = get_int(s, "max_dx_per_visit", "data.synthetic", sc.max_dx_per_visit);
  sc.heterogeneity_alpha = get_num(s, "heterogeneity_alpha", "data.synthetic", sc.heterogeneity_alpha);
  sc.home_stay_bias = get_num(s, "home_stay_bias", "data.synthetic", sc.home_stay_bias);
  sc.recurrence = get_num(s, "recurrence", "data.synthetic", sc.recurrence);
}

ExperimentConfig config_from_json(const json& j, const std::string& mode) {
  require_object(j, "");
  check_keys(j, "",
             {"thresholds", "regimes", "pretraining", "seeds", "data", "hyper", "federation",
              "centralized", "local", "split", "output_root"});

  ExperimentConfig cfg;
  if (j.contains("thresholds")) {
    const json& v = j.at("thresholds");
    if (!v.is_array()) fail_cfg("thresholds must be an array");
    cfg.thresholds.clear();
    for (const json& e : v) {
      if (!e.is_number_integer()) fail_cfg("thresholds entries must be integers");
      cfg.thresholds.push_back(e.get<int>());
    }
  }
  cfg.regimes = get_str_array(j, "regimes", "", cfg.regimes);
  if (mode == "compare" && !j.contains("regimes")) cfg.regimes = {"FL"};
  cfg.pretraining = get_str_array(j, "pretraining", "", cfg.pretraining);
  if (j.contains("seeds")) {
    const json& v = j.at("seeds");
    if (!v.is_array()) fail_cfg("seeds must be an array");
    cfg.seeds.clear();
    for (const json& e : v) {
      const bool ok =
          e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0);
      if (!ok) fail_cfg("seeds entries must be non-negative integers");
      cfg.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  if (j.contains("data")) parse_data(j.at("data"), cfg.data);
  if (j.contains("hyper")) parse_hyper_overrides(j.at("hyper"), "hyper", cfg.hyper);
  if (j.contains("federation")) {
    const json& f = j.at("federation");
    require_object(f, "federation");
    check_keys(f, "federation",
               {"client_fraction", "ft_client_fraction", "local_epochs", "mlm_rounds",
                "ft_rounds"});
    cfg.client_fraction = get_num(f, "client_fraction", "federation", cfg.client_fraction);
    cfg.ft_client_fraction =
        get_num(f, "ft_client_fraction", "federation", cfg.ft_client_fraction);
    cfg.local_epochs = get_int(f, "local_epochs", "federation", cfg.local_epochs);
    cfg.mlm_rounds = get_int(f, "mlm_rounds", "federation", cfg.mlm_rounds);
    cfg.ft_rounds = get_int(f, "ft_rounds", "federation", cfg.ft_rounds);
  }
  if (j.contains("centralized")) {
    const json& c = j.at("centralized");
    require_object(c, "centralized");
    check_keys(c, "centralized", {"mlm_epochs", "ft_epochs"});
    cfg.central_mlm_epochs = get_int(c, "mlm_epochs", "centralized", cfg.central_mlm_epochs);
    cfg.central_ft_epochs = get_int(c, "ft_epochs", "centralized", cfg.central_ft_epochs);
  }
  if (j.contains("local")) {
    const json& l = j.at("local");
    require_object(l, "local");
    check_keys(l, "local", {"mlm_epochs", "ft_epochs"});
    cfg.local_mlm_epochs = get_int(l, "mlm_epochs", "local", cfg.local_mlm_epochs);
    cfg.local_ft_epochs = get_int(l, "ft_epochs", "local", cfg.local_ft_epochs);
  }
  if (j.contains("split")) {
    const json& s = j.at("split");
    require_object(s, "split");
    check_keys(s, "split", {"train_fraction", "val_fraction"});
    cfg.train_fraction = get_num(s, "train_fraction", "split", cfg.train_fraction);
    cfg.val_fraction = get_num(s, "val_fraction", "split", cfg.val_fraction);
  }
  cfg.output_root = get_str(j, "output_root", "", cfg.output_root);

  cfg.validate(mode);
  return cfg;
}

const std::set<std::string>& known_conditions() {
  static const std::set<std::string> k = {"NONE", "FL_MLM", "CENTRAL_MLM"};
  return k;
}

std::vector<std::string> canonical_regimes(const std::vector<std::string>& requested) {
  std::vector<std::string> out;
  for (const char* r : {"FL", "CENTRALIZED", "LOCAL"})
    if (std::find(requested.begin(), requested.end(), r) != requested.end()) out.emplace_back(r);
  return out;
}

std::string condition_suffix(const std::string& cond) {
  std::string s = cond;
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf, 16);
}

// ---------------------------------------------------------------------------
// Data preparation shared across one seed's cells.

struct SeedData {
  std::vector<PatientRecord> train;
  std::vector<PatientRecord> val;
  std::vector<PatientRecord> test;
  std::vector<TransferRecord> transfers;
  Vocabulary vocab;
  HyperParams hyper;  // vocab/groups filled
};

SeedData prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData sd;
  std::vector<PatientRecord> cohort;
  std::vector<std::string> label_universe;
  if (cfg.data.synthetic) {
    SynthConfig sc = cfg.data.synth;
    sc.seed = seed;
    SynthOutput out = generate_cohort(sc);
    cohort = std::move(out.cohort);
    sd.transfers = std::move(out.transfers);
    label_universe = std::move(out.group_labels);
  } else {
    IngestReport report;
    const GroupTable groups = read_group_table(cfg.data.groups_csv, report);
    cohort = read_visits(cfg.data.visits_csv, groups, report);
    sd.transfers = read_transfers(cfg.data.transfers_csv, report);
    if (cohort.empty()) throw std::runtime_error("ingested cohort is empty");
    for (const auto& [code, group] : groups) label_universe.push_back(group);
  }
  label_universe.emplace_back(kUnknownGroup);
  sd.vocab = build_vocabulary(std::span<const std::string>(label_universe));
  sd.hyper = cfg.hyper;
  sd.hyper.vocab = sd.vocab.size();
  sd.hyper.groups = sd.vocab.num_disease_tokens();
  sd.hyper.validate();

  auto [train_full, test] = split_cohort(cohort, cfg.train_fraction, mix_seed(seed, 11));
  sd.test = std::move(test);
  if (cfg.val_fraction > 0.0) {
    auto [train, val] = split_cohort(train_full, 1.0 - cfg.val_fraction, mix_seed(seed, 22));
    sd.train = std::move(train);
    sd.val = std::move(val);
  } else {
    sd.train = std::move(train_full);
  }
  return sd;
}

struct CellInputs {
  TrainData pooled_train;
  EvalData pooled_val;
  EvalData pooled_test;
  std::vector<FedClient> fed_clients;
  std::vector<LocalClientSplit> local_clients;
};

CellInputs build_cell(const SeedData& sd, int threshold, std::uint64_t seed, bool need_fed,
                      bool need_local) {
  const EncodingConfig enc = sd.hyper.encoding();
  const auto train_t = filter_min_visits(sd.train, threshold);
  const auto val_t = filter_min_visits(sd.val, threshold);
  const auto test_t = filter_min_visits(sd.test, threshold);

  CellInputs ci;
  ci.pooled_train.mlm_sequences = build_mlm_dataset(train_t, sd.vocab, enc);
  ci.pooled_train.ft_patients = eligible_ft_patients(train_t);
  ci.pooled_val.mlm_sequences = build_mlm_dataset(val_t, sd.vocab, enc);
  ci.pooled_val.next_examples = build_eval_examples(val_t, sd.vocab, enc, seed);
  ci.pooled_test.next_examples = build_eval_examples(test_t, sd.vocab, enc, seed);

  if (ci.pooled_train.mlm_sequences.empty())
    throw std::runtime_error("no training patients after the min-visit filter");
  if (ci.pooled_train.ft_patients.empty())
    throw std::runtime_error("no fine-tuning patients (every training patient has one visit)");
  if (ci.pooled_test.next_examples.empty())
    throw std::runtime_error("no test examples after the min-visit filter");

  if (need_fed || need_local) {
    const PartitionResult part = partition_cohort(train_t, sd.transfers);
    if (need_fed) {
      for (const ClientDataset& shard : part.clients) {
        FedClient fc;
        fc.client_id = shard.center_id;
        fc.train.mlm_sequences = build_mlm_dataset(shard.patients, sd.vocab, enc);
        fc.train.ft_patients = eligible_ft_patients(shard.patients);
        ci.fed_clients.push_back(std::move(fc));
      }
    }
    if (need_local) {
      const PartitionResult val_part = partition_cohort(val_t, sd.transfers);
      const PartitionResult test_part = partition_cohort(test_t, sd.transfers);
      std::map<std::string, const ClientDataset*> val_by_center, test_by_center;
      for (const ClientDataset& shard : val_part.clients) val_by_center[shard.center_id] = &shard;
      for (const ClientDataset& shard : test_part.clients) test_by_center[shard.center_id] = &shard;
      for (const ClientDataset& shard : part.clients) {
        LocalClientSplit lc;
        lc.client_id = shard.center_id;
        lc.train.mlm_sequences = build_mlm_dataset(shard.patients, sd.vocab, enc);
        lc.train.ft_patients = eligible_ft_patients(shard.patients);
        if (auto it = val_by_center.find(shard.center_id); it != val_by_center.end()) {
          lc.val.mlm_sequences = build_mlm_dataset(it->second->patients, sd.vocab, enc);
          lc.val.next_examples = build_eval_examples(it->second->patients, sd.vocab, enc, seed);
        }
        if (auto it = test_by_center.find(shard.center_id); it != test_by_center.end())
          lc.test.next_examples = build_eval_examples(it->second->patients, sd.vocab, enc, seed);
        ci.local_clients.push_back(std::move(lc));
      }
    }
  }
  return ci;
}

FederationConfig make_fed_config(const ExperimentConfig& cfg, const HyperParams& hyper,
                                 std::uint64_t seed, Task task, int rounds) {
  FederationConfig fc;
  fc.client_fraction =
      task == Task::kNextVisit ? cfg.resolved_ft_fraction() : cfg.client_fraction;
  fc.rounds = rounds;
  fc.local_epochs = cfg.local_epochs;
  fc.task = task;
  fc.hyper = hyper;
  fc.seed = seed;
  return fc;
}

struct PlannedRow {
  std::string regime;
  std::string condition;  // pretraining input for this row
  std::string label;      // value written to the pretraining column
};

std::vector<PlannedRow> plan_rows(const ExperimentConfig& cfg, const std::string& mode) {
  std::vector<PlannedRow> plan;
  if (mode == "compare") {
    for (const std::string& cond : cfg.pretraining) plan.push_back({"FL", cond, cond});
    return plan;
  }
  const std::string& cond = cfg.pretraining.front();
  for (const std::string& regime : canonical_regimes(cfg.regimes)) {
    std::string label = cond;
    if (cond != "NONE") {
      if (regime == "CENTRALIZED") label = "CENTRAL_MLM";
      if (regime == "LOCAL") label = "LOCAL_MLM";
    }
    plan.push_back({regime, cond, label});
  }
  return plan;
}

void write_local_clients_csv(const std::string& path, const LocalBaselineResult& res) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "client_id,n_train,ap,evaluated,note\n";
  for (const LocalOutcome& c : res.clients) {
    out << c.client_id << ',' << c.n_train << ','
        << (c.evaluated ? csv::format_double(c.ap) : std::string()) << ','
        << (c.evaluated ? "1" : "0") << ',' << c.note << '\n';
  }
}

std::string metrics_csv_text(std::span<const MeasurementRow> rows) {
  std::string out = "run_id,regime,pretraining,min_visits,seed,split,metric_name,value\n";
  for (const MeasurementRow& r : rows) {
    out += r.run_id + ',' + r.regime + ',' + r.pretraining + ',' + std::to_string(r.min_visits) +
           ',' + std::to_string(r.seed) + ',' + r.split + ',' + r.metric_name + ',' +
           csv::format_double(r.value) + '\n';
  }
  return out;
}

std::string summary_csv_text(std::span<const SummaryRow> rows) {
  std::string out = "regime,pretraining,min_visits,metric_name,n_seeds,mean,ci95_low,ci95_high\n";
  for (const SummaryRow& r : rows) {
    out += r.regime + ',' + r.pretraining + ',' + std::to_string(r.min_visits) + ',' +
           r.metric_name + ',' + std::to_string(r.n_seeds) + ',' + csv::format_double(r.mean) + ',';
    if (r.has_ci)
      out += csv::format_double(r.ci95_low) + ',' + csv::format_double(r.ci95_high);
    else
      out += ",";
    out += '\n';
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------

MetricsReport run_engine(const ExperimentConfig& cfg, const std::string& mode) {
  cfg.validate(mode);

  MetricsReport report;
  report.run_id = compute_run_id(cfg, mode);
  const std::string root = resolve_output_root(cfg);
  report.run_dir = root + "/" + report.run_id;
  std::filesystem::create_directories(report.run_dir + "/cells");

  const std::vector<PlannedRow> plan = plan_rows(cfg, mode);
  bool need_fed = false, need_local = false;
  for (const PlannedRow& p : plan) {
    if (p.regime == "FL") need_fed = true;
    if (p.regime == "LOCAL") need_local = true;
  }

  ordered_json run_doc;
  run_doc["run_id"] = report.run_id;
  run_doc["mode"] = mode;
  run_doc["config"] = experiment_config_to_json(cfg);
  write_text(report.run_dir + "/run.json", run_doc.dump(2) + "\n");

  const double t_start = now_seconds();
  for (std::uint64_t seed : cfg.seeds) {
    std::optional<SeedData> sd;
    std::string seed_error;
    try {
      sd.emplace(prepare_seed(cfg, seed));
    } catch (const std::exception& e) {
      seed_error = e.what();
    }

    for (int threshold : cfg.thresholds) {
      const std::string cell =
          "s" + std::to_string(seed) + "-t" + std::to_string(threshold);
      const std::string cell_dir = report.run_dir + "/cells/" + cell;
      std::filesystem::create_directories(cell_dir);

      auto fail_row = [&](const PlannedRow& p, const std::string& msg) {
        report.rows.push_back({report.run_id, p.regime, p.label, threshold, seed, "test",
                               "failure", std::numeric_limits<double>::quiet_NaN()});
        const std::string full = cell + " " + p.regime + "/" + p.label + ": " + msg;
        report.failures.push_back(full);
        std::ofstream err(cell_dir + "/errors.txt", std::ios::app | std::ios::binary);
        err << full << '\n';
        std::fprintf(stderr, "[%s] %s FAILED: %s\n", report.run_id.c_str(), cell.c_str(),
                     msg.c_str());
      };

      if (!seed_error.empty()) {
        for (const PlannedRow& p : plan) fail_row(p, "data preparation failed: " + seed_error);
        continue;
      }

      std::optional<CellInputs> ci;
      try {
        ci.emplace(build_cell(*sd, threshold, seed, need_fed, need_local));
      } catch (const std::exception& e) {
        for (const PlannedRow& p : plan) fail_row(p, e.what());
        continue;
      }

      std::optional<ModelParams<float>> fl_mlm, central_mlm;
      auto get_fl_mlm = [&]() -> const ModelParams<float>& {
        if (!fl_mlm) {
          const FederationConfig fc =
              make_fed_config(cfg, sd->hyper, seed, Task::kMlm, cfg.mlm_rounds);
          FedResult res = run_fedavg(ci->fed_clients, sd->vocab, fc, ci->pooled_val, nullptr);
          write_round_log(cell_dir + "/mlm-fl-rounds.csv", res.rounds);
          save_checkpoint(cell_dir + "/mlm-fl.ckpt", res.params);
          fl_mlm = std::move(res.params);
        }
        return *fl_mlm;
      };
      auto get_central_mlm = [&]() -> const ModelParams<float>& {
        if (!central_mlm) {
          const FederationConfig fc = make_fed_config(cfg, sd->hyper, seed, Task::kMlm, 1);
          TrainResult res = run_centralized(ci->pooled_train, ci->pooled_val, sd->vocab, nullptr,
                                            fc, cfg.central_mlm_epochs);
          write_train_log(cell_dir + "/mlm-central-log.csv", res.log);
          save_checkpoint(cell_dir + "/mlm-central.ckpt", res.params);
          central_mlm = std::move(res.params);
        }
        return *central_mlm;
      };

      for (const PlannedRow& p : plan) {
        const double t_row = now_seconds();
        try {
          double ap = 0.0;
          if (p.regime == "FL") {
            const FederationConfig fc =
                make_fed_config(cfg, sd->hyper, seed, Task::kNextVisit, cfg.ft_rounds);
            std::optional<ModelParams<float>> init;
            if (p.condition == "FL_MLM") init = transfer_pretrained(get_fl_mlm(), seed);
            if (p.condition == "CENTRAL_MLM") init = transfer_pretrained(get_central_mlm(), seed);
            FedResult res = run_fedavg(ci->fed_clients, sd->vocab, fc, ci->pooled_val,
                                       init ? &*init : nullptr);
            const std::string suffix = condition_suffix(p.condition);
            write_round_log(cell_dir + "/ft-fl-" + suffix + "-rounds.csv", res.rounds);
            save_checkpoint(cell_dir + "/ft-fl-" + suffix + ".ckpt", res.params);
            ap = evaluate_nextvisit_ap(res.params, ci->pooled_test.next_examples);
          } else if (p.regime == "CENTRALIZED") {
            const FederationConfig fc =
                make_fed_config(cfg, sd->hyper, seed, Task::kNextVisit, 1);
            const ModelParams<float>* ft_init =
                p.condition == "NONE" ? nullptr : &get_central_mlm();
            TrainResult res = run_centralized(ci->pooled_train, ci->pooled_val, sd->vocab,
                                              ft_init, fc, cfg.central_ft_epochs);
            write_train_log(cell_dir + "/ft-central-log.csv", res.log);
            save_checkpoint(cell_dir + "/ft-central.ckpt", res.params);
            ap = evaluate_nextvisit_ap(res.params, ci->pooled_test.next_examples);
          } else {  // LOCAL
            LocalBaselineConfig lc;
            lc.hyper = sd->hyper;
            lc.mlm_epochs = p.condition == "NONE" ? 0 : cfg.local_mlm_epochs;
            lc.ft_epochs = cfg.local_ft_epochs;
            lc.seed = seed;
            const LocalBaselineResult res = run_local_baseline(ci->local_clients, sd->vocab, lc);
            write_local_clients_csv(cell_dir + "/local-clients.csv", res);
            ap = res.weighted_ap;
          }
          report.rows.push_back(
              {report.run_id, p.regime, p.label, threshold, seed, "test", "micro_ap", ap});
          std::fprintf(stderr, "[%s] %s %s/%s micro_ap=%.4f (%.1fs)\n", report.run_id.c_str(),
                       cell.c_str(), p.regime.c_str(), p.label.c_str(), ap,
                       now_seconds() - t_row);
        } catch (const std::exception& e) {
          fail_row(p, e.what());
        }
      }
    }
  }

  report.summary = summarize_rows(report.rows);
  write_text(report.run_dir + "/metrics.csv", metrics_csv_text(report.rows));
  write_text(report.run_dir + "/summary.csv", summary_csv_text(report.summary));
  std::fprintf(stderr, "[%s] done in %.1fs (%zu rows, %zu failures) -> %s\n",
               report.run_id.c_str(), now_seconds() - t_start, report.rows.size(),
               report.failures.size(), report.run_dir.c_str());
  return report;
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate(const std::string& mode) const {
  if (mode != "experiment" && mode != "compare")
    fail_cfg("mode must be \"experiment\" or \"compare\"");
  if (thresholds.empty()) fail_cfg("thresholds must not be empty");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] < 1) fail_cfg("thresholds must be >= 1");
    if (i > 0 && thresholds[i] <= thresholds[i - 1])
      fail_cfg("thresholds must be strictly ascending");
  }
  if (seeds.empty()) fail_cfg("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    fail_cfg("seeds must be unique");

  if (regimes.empty()) fail_cfg("regimes must not be empty");
  std::set<std::string> seen_regimes;
  for (const std::string& r : regimes) {
    if (r != "FL" && r != "CENTRALIZED" && r != "LOCAL")
      fail_cfg("unknown regime \"" + r + "\"");
    if (!seen_regimes.insert(r).second) fail_cfg("duplicate regime \"" + r + "\"");
  }
  if (mode == "compare" && regimes != std::vector<std::string>{"FL"})
    fail_cfg("compare mode runs the FL regime only");

  if (pretraining.empty()) fail_cfg("pretraining must not be empty");
  std::set<std::string> seen_conditions;
  for (const std::string& c : pretraining) {
    if (!known_conditions().count(c)) fail_cfg("unknown pretraining condition \"" + c + "\"");
    if (!seen_conditions.insert(c).second)
      fail_cfg("duplicate pretraining condition \"" + c + "\"");
  }
  if (mode == "experiment" && pretraining.size() != 1)
    fail_cfg("experiment mode takes exactly one pretraining condition");
  if (mode == "compare") {
    if (!seen_conditions.count("NONE"))
      fail_cfg("compare mode needs the NONE condition as its baseline");
    if (pretraining.size() < 2) fail_cfg("compare mode needs at least one pretrained condition");
  }

  if (!data.synthetic &&
      (data.visits_csv.empty() || data.groups_csv.empty() || data.transfers_csv.empty()))
    fail_cfg("data.csv requires visits, groups and transfers paths");
  if (data.synthetic) data.synth.validate();

  HyperParams probe = hyper;
  probe.groups = 1;
  probe.vocab = Vocabulary::kFirstDisease + 1;
  probe.validate();

  if (!(client_fraction > 0.0 && client_fraction <= 1.0))
    fail_cfg("federation.client_fraction must be in (0, 1]");
  if (ft_client_fraction >= 0.0 && !(ft_client_fraction > 0.0 && ft_client_fraction <= 1.0))
    fail_cfg("federation.ft_client_fraction must be in (0, 1]");
  if (local_epochs < 1) fail_cfg("federation.local_epochs must be >= 1");
  if (mlm_rounds < 1) fail_cfg("federation.mlm_rounds must be >= 1");
  if (ft_rounds < 1) fail_cfg("federation.ft_rounds must be >= 1");
  if (central_mlm_epochs < 1) fail_cfg("centralized.mlm_epochs must be >= 1");
  if (central_ft_epochs < 1) fail_cfg("centralized.ft_epochs must be >= 1");
  if (local_mlm_epochs < 1) fail_cfg("local.mlm_epochs must be >= 1");
  if (local_ft_epochs < 1) fail_cfg("local.ft_epochs must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    fail_cfg("split.train_fraction must be in (0, 1)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    fail_cfg("split.val_fraction must be in [0, 1)");
  if (output_root.empty()) fail_cfg("output_root must not be empty");
}

ParsedExperiment parse_experiment_json(const json& j, const std::string& default_mode) {
  require_object(j, "");
  if (j.contains("config")) {
    check_keys(j, "", {"run_id", "mode", "config"});
    std::string mode = get_str(j, "mode", "", default_mode);
    ParsedExperiment parsed{config_from_json(j.at("config"), mode), mode};
    return parsed;
  }
  return {config_from_json(j, default_mode), default_mode};
}

ordered_json experiment_config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["thresholds"] = cfg.thresholds;
  j["regimes"] = cfg.regimes;
  j["pretraining"] = cfg.pretraining;
  j["seeds"] = cfg.seeds;
  ordered_json data;
  if (cfg.data.synthetic) {
    ordered_json s;
    s["num_patients"] = cfg.data.synth.num_patients;
    s["num_centers"] = cfg.data.synth.num_centers;
    s["num_groups"] = cfg.data.synth.num_groups;
    s["mean_visits"] = cfg.data.synth.mean_visits;
    s["max_dx_per_visit"] = cfg.data.synth.max_dx_per_visit;
    s["heterogeneity_alpha"] = cfg.data.synth.heterogeneity_alpha;
    s["home_stay_bias"] = cfg.data.synth.home_stay_bias;
    s["recurrence"] = cfg.data.synth.recurrence;
    data["synthetic"] = std::move(s);
  } else {
    ordered_json c;
    c["visits"] = cfg.data.visits_csv;
    c["groups"] = cfg.data.groups_csv;
    c["transfers"] = cfg.data.transfers_csv;
    data["csv"] = std::move(c);
  }
  j["data"] = std::move(data);
  ordered_json h;
  h["hidden"] = cfg.hyper.hidden;
  h["layers"] = cfg.hyper.layers;
  h["heads"] = cfg.hyper.heads;
  h["ffn_dim"] = cfg.hyper.ffn_dim;
  h["max_len"] = cfg.hyper.max_len;
  h["age_buckets"] = cfg.hyper.age_buckets;
  h["year_buckets"] = cfg.hyper.year_buckets;
  h["year_base"] = cfg.hyper.year_base;
  h["learning_rate"] = cfg.hyper.learning_rate;
  h["beta1"] = cfg.hyper.beta1;
  h["beta2"] = cfg.hyper.beta2;
  h["epsilon"] = cfg.hyper.epsilon;
  h["batch_size"] = cfg.hyper.batch_size;
  h["mask_prob"] = cfg.hyper.mask_prob;
  h["dropout"] = cfg.hyper.dropout;
  j["hyper"] = std::move(h);
  j["federation"] = {{"client_fraction", cfg.client_fraction},
                     {"ft_client_fraction", cfg.ft_client_fraction},
                     {"local_epochs", cfg.local_epochs},
                     {"mlm_rounds", cfg.mlm_rounds},
                     {"ft_rounds", cfg.ft_rounds}};
  j["centralized"] = {{"mlm_epochs", cfg.central_mlm_epochs},
                      {"ft_epochs", cfg.central_ft_epochs}};
  j["local"] = {{"mlm_epochs", cfg.local_mlm_epochs}, {"ft_epochs", cfg.local_ft_epochs}};
  j["split"] = {{"train_fraction", cfg.train_fraction}, {"val_fraction", cfg.val_fraction}};
  j["output_root"] = cfg.output_root;
  return j;
}

std::string compute_run_id(const ExperimentConfig& cfg, const std::string& mode) {
  ordered_json snapshot = experiment_config_to_json(cfg);
  snapshot.erase("output_root");
  const std::string text = mode + "\n" + snapshot.dump();
  return "run-" + hex16(fnv1a64(text.data(), text.size()));
}

std::string resolve_output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("FEDSEQ_RUN_DIR"); env && *env) return env;
  return cfg.output_root;
}

std::vector<SummaryRow> summarize_rows(std::span<const MeasurementRow> rows) {
  struct Key {
    std::string regime, pretraining, metric;
    int min_visits;
    bool operator<(const Key& o) const {
      return std::tie(regime, pretraining, metric, min_visits) <
             std::tie(o.regime, o.pretraining, o.metric, o.min_visits);
    }
  };
  std::vector<Key> order;
  std::map<Key, std::vector<double>> values;
  for (const MeasurementRow& r : rows) {
    if (r.metric_name == "failure") continue;
    Key k{r.regime, r.pretraining, r.metric_name, r.min_visits};
    auto [it, inserted] = values.try_emplace(k);
    if (inserted) order.push_back(k);
    it->second.push_back(r.value);
  }
  std::vector<SummaryRow> out;
  for (const Key& k : order) {
    const std::vector<double>& v = values.at(k);
    const Summary s = summarize(v);
    SummaryRow row;
    row.regime = k.regime;
    row.pretraining = k.pretraining;
    row.min_visits = k.min_visits;
    row.metric_name = k.metric;
    row.n_seeds = static_cast<int>(s.n);
    row.mean = s.mean;
    row.has_ci = s.n > 1;
    if (row.has_ci) {
      row.ci95_low = s.mean - s.half_width;
      row.ci95_high = s.mean + s.half_width;
    }
    out.push_back(std::move(row));
  }
  return out;
}

void write_metrics_csv(const std::string& path, std::span<const MeasurementRow> rows) {
  write_text(path, metrics_csv_text(rows));
}

void write_summary_csv(const std::string& path, std::span<const SummaryRow> rows) {
  write_text(path, summary_csv_text(rows));
}

MetricsReport run_experiment(const ExperimentConfig& config) {
  return run_engine(config, "experiment");
}

MetricsReport compare_pretraining(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.regimes = {"FL"};
  return run_engine(c, "compare");
}

MetricsReport load_run(const std::string& run_dir) {
  std::ifstream in(run_dir + "/run.json", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + run_dir + "/run.json");
  json doc = json::parse(in, nullptr, true);
  const ParsedExperiment parsed = parse_experiment_json(doc, "experiment");

  MetricsReport report;
  report.run_id = get_str(doc, "run_id", "", "");
  report.run_dir = run_dir;
  if (report.run_id != compute_run_id(parsed.config, parsed.mode))
    throw std::runtime_error("run.json: run_id does not match its config");

  const auto rows = csv::read_file(
      run_dir + "/metrics.csv",
      {"run_id", "regime", "pretraining", "min_visits", "seed", "split", "metric_name", "value"});
  for (const csv::Row& row : rows) {
    auto bad = [&](const char* what) -> std::runtime_error {
      return std::runtime_error("metrics.csv line " + std::to_string(row.line_number) + ": " +
                                what);
    };
    if (row.fields.size() != 8) throw bad("expected 8 fields");
    MeasurementRow m;
    m.run_id = row.fields[0];
    m.regime = row.fields[1];
    m.pretraining = row.fields[2];
    std::int64_t min_visits = 0, seed_val = 0;
    if (!csv::parse_int64(row.fields[3], min_visits)) throw bad("malformed min_visits");
    if (!csv::parse_int64(row.fields[4], seed_val) || seed_val < 0) throw bad("malformed seed");
    m.min_visits = static_cast<int>(min_visits);
    m.seed = static_cast<std::uint64_t>(seed_val);
    m.split = row.fields[5];
    m.metric_name = row.fields[6];
    if (!csv::parse_double(row.fields[7], m.value)) throw bad("malformed value");
    if (m.run_id != report.run_id)
      throw std::runtime_error("metrics.csv line " + std::to_string(row.line_number) +
                               ": run_id mismatch");
    if (m.metric_name == "failure") report.failures.push_back("cell s" + std::to_string(m.seed) +
                                                              "-t" + std::to_string(m.min_visits) +
                                                              " " + m.regime + "/" + m.pretraining);
    report.rows.push_back(std::move(m));
  }

  report.summary = summarize_rows(report.rows);
  std::ifstream sf(run_dir + "/summary.csv", std::ios::binary);
  if (!sf) throw std::runtime_error("cannot open " + run_dir + "/summary.csv");
  std::string stored((std::istreambuf_iterator<char>(sf)), std::istreambuf_iterator<char>());
  if (stored != summary_csv_text(report.summary))
    throw std::runtime_error("summary.csv does not match the rows in metrics.csv");
  return report;
}

}  // namespace fedseq
