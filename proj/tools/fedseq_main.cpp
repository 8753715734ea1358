#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "fedseq/checkpoint.hpp"
#include "fedseq/csv.hpp"
#include "fedseq/experiment.hpp"
#include "fedseq/federation.hpp"
#include "fedseq/ingest.hpp"
#include "fedseq/partition.hpp"
#include "fedseq/synth.hpp"
#include "fedseq/training.hpp"

using namespace fedseq;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct CsvArgs {
  std::string visits;
  std::string groups;
  std::string transfers;
};

void add_csv_flags(CLI::App* cmd, CsvArgs& a, bool need_transfers) {
  cmd->add_option("--visits", a.visits, "visits.csv")->required();
  cmd->add_option("--groups", a.groups, "groups.csv")->required();
  auto* t = cmd->add_option("--transfers", a.transfers, "transfers.csv");
  if (need_transfers) t->required();
}

void add_hyper_flags(CLI::App* cmd, HyperParams& h) {
  cmd->add_option("--hidden", h.hidden, "embedding width")->capture_default_str();
  cmd->add_option("--layers", h.layers, "encoder layers")->capture_default_str();
  cmd->add_option("--heads", h.heads, "attention heads")->capture_default_str();
  cmd->add_option("--ffn-dim", h.ffn_dim, "feed-forward width")->capture_default_str();
  cmd->add_option("--max-len", h.max_len, "sequence length")->capture_default_str();
  cmd->add_option("--batch-size", h.batch_size, "mini-batch size")->capture_default_str();
  cmd->add_option("--learning-rate", h.learning_rate, "Adam step size")->capture_default_str();
  cmd->add_option("--mask-prob", h.mask_prob, "MLM masking probability")->capture_default_str();
  cmd->add_option("--age-buckets", h.age_buckets, "age embedding rows")->capture_default_str();
  cmd->add_option("--year-buckets", h.year_buckets, "year embedding rows")->capture_default_str();
  cmd->add_option("--year-base", h.year_base, "first embedded calendar year")
      ->capture_default_str();
}

struct LoadedCsv {
  std::vector<PatientRecord> cohort;
  std::vector<TransferRecord> transfers;
  Vocabulary vocab;
  IngestReport report;
};

LoadedCsv load_csv(const CsvArgs& a) {
  LoadedCsv d;
  const GroupTable table = read_group_table(a.groups, d.report);
  d.cohort = read_visits(a.visits, table, d.report);
  if (!a.transfers.empty()) d.transfers = read_transfers(a.transfers, d.report);
  std::vector<std::string> labels;
  labels.reserve(table.size() + 1);
  for (const auto& [code, group] : table) labels.push_back(group);
  labels.emplace_back(kUnknownGroup);
  d.vocab = build_vocabulary(std::span<const std::string>(labels));
  if (!d.report.clean())
    std::fprintf(stderr, "ingest: skipped %zu malformed rows (first: %s)\n",
                 d.report.issues.size(), d.report.issues.front().c_str());
  if (d.cohort.empty()) throw std::runtime_error("no usable patients in " + a.visits);
  return d;
}

void fill_vocab_fields(HyperParams& h, const Vocabulary& vocab) {
  h.vocab = vocab.size();
  h.groups = vocab.num_disease_tokens();
  h.validate();
}

void print_json(const ordered_json& j) { std::cout << j.dump(2) << '\n'; }

json heterogeneity_json(std::span<const ClientDataset> clients) {
  return json::parse(heterogeneity_report_json(heterogeneity_report(clients)));
}

int run_synth(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const SynthOutput out = generate_cohort(cfg);
  std::filesystem::create_directories(out_dir);
  write_cohort_csvs(out, out_dir);
  const PartitionResult part = partition_cohort(out.cohort, out.transfers);

  ordered_json j;
  j["out"] = out_dir;
  j["patients"] = out.cohort.size();
  j["centers"] = out.center_ids.size();
  j["groups"] = out.group_labels.size();
  j["files"] = {"visits.csv", "groups.csv", "transfers.csv"};
  j["heterogeneity"] = heterogeneity_json(part.clients);
  print_json(j);
  return 0;
}

int run_partition(const CsvArgs& args) {
  const LoadedCsv d = load_csv(args);
  const PartitionResult part = partition_cohort(d.cohort, d.transfers);

  ordered_json j;
  j["clients"] = json::parse(partition_summary_json(part));
  j["missing_transfer_patients"] = part.missing_transfer_patients;
  if (part.clients.size() >= 2) j["heterogeneity"] = heterogeneity_json(part.clients);
  j["ingest_issues"] = d.report.issues;
  print_json(j);
  return 0;
}

struct TrainArgs {
  CsvArgs data;
  HyperParams hyper;
  int epochs = 20;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  int min_visits = 1;
  std::string out;
  std::string log;
  std::string init;  // train-next only
};

std::pair<std::vector<PatientRecord>, std::vector<PatientRecord>> split_train_val(
    const std::vector<PatientRecord>& cohort, double val_fraction, std::uint64_t seed) {
  if (val_fraction <= 0.0) return {cohort, {}};
  return split_cohort(cohort, 1.0 - val_fraction, mix_seed(seed, 22));
}

int run_train_mlm(const TrainArgs& a) {
  LoadedCsv d = load_csv(a.data);
  HyperParams hyper = a.hyper;
  fill_vocab_fields(hyper, d.vocab);
  const auto cohort = filter_min_visits(d.cohort, a.min_visits);
  const auto [train, val] = split_train_val(cohort, a.val_fraction, a.seed);
  const EncodingConfig enc = hyper.encoding();
  const auto train_seqs = build_mlm_dataset(train, d.vocab, enc);
  const auto val_seqs = build_mlm_dataset(val, d.vocab, enc);

  const TrainResult res = train_mlm(train_seqs, val_seqs, hyper, a.epochs, a.seed);
  save_checkpoint(a.out, res.params);
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  write_train_log(log_path, res.log);

  ordered_json j;
  j["checkpoint"] = a.out;
  j["log"] = log_path;
  j["n_train"] = train_seqs.size();
  j["n_val"] = val_seqs.size();
  j["selected_epoch"] = res.log.selected_epoch;
  j["val_metric"] = res.log.rows.at(res.log.selected_epoch - 1).val_metric;
  print_json(j);
  return 0;
}

int run_train_next(const TrainArgs& a) {
  LoadedCsv d = load_csv(a.data);
  HyperParams hyper = a.hyper;
  fill_vocab_fields(hyper, d.vocab);
  const auto cohort = filter_min_visits(d.cohort, a.min_visits);
  const auto [train, val] = split_train_val(cohort, a.val_fraction, a.seed);
  const auto ft_train = eligible_ft_patients(train);
  if (ft_train.empty()) throw std::invalid_argument("no training patients with >= 2 visits");
  const EncodingConfig enc = hyper.encoding();
  const auto val_examples = build_eval_examples(val, d.vocab, enc, a.seed);

  const ModelParams<float> init = a.init.empty() ? init_params<float>(hyper, a.seed)
                                                 : load_checkpoint(a.init, hyper);
  const TrainResult res =
      train_nextvisit(ft_train, val_examples, d.vocab, init, hyper, a.epochs, a.seed);
  save_checkpoint(a.out, res.params);
  const std::string log_path = a.log.empty() ? a.out + ".log.csv" : a.log;
  write_train_log(log_path, res.log);

  ordered_json j;
  j["checkpoint"] = a.out;
  j["log"] = log_path;
  j["n_train"] = ft_train.size();
  j["n_val"] = val_examples.size();
  j["selected_epoch"] = res.log.selected_epoch;
  j["val_metric"] = res.log.rows.at(res.log.selected_epoch - 1).val_metric;
  print_json(j);
  return 0;
}

struct EvalArgs {
  CsvArgs data;
  std::string ckpt;
  std::string task;  // mlm | next
  int min_visits = 1;
  std::uint64_t seed = 1;
  double mask_prob = 0.15;
};

int run_eval(const EvalArgs& a) {
  const LoadedCsv d = load_csv(a.data);
  const ModelParams<float> params = load_checkpoint(a.ckpt);
  if (params.hyper.vocab != d.vocab.size() || params.hyper.groups != d.vocab.num_disease_tokens())
    throw std::invalid_argument(
        "checkpoint vocabulary (" + std::to_string(params.hyper.vocab) +
        " tokens) does not match the group table (" + std::to_string(d.vocab.size()) + ")");
  const auto cohort = filter_min_visits(d.cohort, a.min_visits);
  const EncodingConfig enc = params.hyper.encoding();

  ordered_json j;
  if (a.task == "mlm") {
    const auto seqs = build_mlm_dataset(cohort, d.vocab, enc);
    if (seqs.empty()) throw std::invalid_argument("no sequences to evaluate");
    j["metric"] = "mlm_precision";
    j["value"] = mlm_precision(params, seqs, a.mask_prob, a.seed);
    j["n_examples"] = seqs.size();
  } else {
    const auto examples = build_eval_examples(cohort, d.vocab, enc, a.seed);
    if (examples.empty()) throw std::invalid_argument("no patients with >= 2 visits to evaluate");
    j["metric"] = "micro_ap";
    j["value"] = evaluate_nextvisit_ap(params, examples);
    j["n_examples"] = examples.size();
  }
  print_json(j);
  return 0;
}

void print_report(const MetricsReport& rep) {
  std::printf("run %s\n", rep.run_id.c_str());
  std::printf("dir %s\n", rep.run_dir.c_str());
  std::printf("%-12s %-12s %10s %-14s %7s %10s %22s\n", "regime", "pretraining", "min_visits",
              "metric", "n", "mean", "ci95");
  for (const SummaryRow& s : rep.summary) {
    if (s.has_ci)
      std::printf("%-12s %-12s %10d %-14s %7d %10.4f [%8.4f, %8.4f]\n", s.regime.c_str(),
                  s.pretraining.c_str(), s.min_visits, s.metric_name.c_str(), s.n_seeds, s.mean,
                  s.ci95_low, s.ci95_high);
    else
      std::printf("%-12s %-12s %10d %-14s %7d %10.4f %22s\n", s.regime.c_str(),
                  s.pretraining.c_str(), s.min_visits, s.metric_name.c_str(), s.n_seeds, s.mean,
                  "-");
  }
  if (!rep.failures.empty()) {
    std::printf("%zu failed cell(s):\n", rep.failures.size());
    for (const std::string& f : rep.failures) std::printf("  %s\n", f.c_str());
  }
}

int run_experiment_cmd(const std::string& config_path, bool compare) {
  std::ifstream in(config_path);
  if (!in) throw std::invalid_argument("cannot open config file " + config_path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(config_path + ": " + e.what());
  }
  const ParsedExperiment parsed =
      parse_experiment_json(doc, compare ? "compare" : "experiment");
  const MetricsReport rep = parsed.mode == "compare" ? compare_pretraining(parsed.config)
                                                     : run_experiment(parsed.config);
  print_report(rep);
  return rep.failures.empty() ? 0 : 2;
}

int run_report(const std::string& run_dir) {
  const MetricsReport rep = load_run(run_dir);
  print_report(rep);
  return rep.failures.empty() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated EHR sequence modeling"};
  app.require_subcommand(1);
  int exit_code = 0;

  SynthConfig synth_cfg;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic multi-center cohort");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--patients", synth_cfg.num_patients)->capture_default_str();
  synth->add_option("--centers", synth_cfg.num_centers)->capture_default_str();
  synth->add_option("--groups", synth_cfg.num_groups)->capture_default_str();
  synth->add_option("--mean-visits", synth_cfg.mean_visits)->capture_default_str();
  synth->add_option("--max-dx", synth_cfg.max_dx_per_visit)->capture_default_str();
  synth->add_option("--alpha", synth_cfg.heterogeneity_alpha, "center Dirichlet concentration")
      ->capture_default_str();
  synth->add_option("--stay-bias", synth_cfg.home_stay_bias)->capture_default_str();
  synth->add_option("--recurrence", synth_cfg.recurrence)->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->callback([&] { exit_code = run_synth(synth_cfg, synth_out); });

  CsvArgs part_args;
  auto* part = app.add_subcommand("partition", "assign patients to centers by longest stay");
  add_csv_flags(part, part_args, true);
  part->callback([&] { exit_code = run_partition(part_args); });

  TrainArgs mlm_args;
  auto* tmlm = app.add_subcommand("train-mlm", "masked-LM pretraining on pooled data");
  add_csv_flags(tmlm, mlm_args.data, false);
  add_hyper_flags(tmlm, mlm_args.hyper);
  tmlm->add_option("--epochs", mlm_args.epochs)->capture_default_str();
  tmlm->add_option("--seed", mlm_args.seed)->capture_default_str();
  tmlm->add_option("--val-fraction", mlm_args.val_fraction)->capture_default_str();
  tmlm->add_option("--min-visits", mlm_args.min_visits)->capture_default_str();
  tmlm->add_option("--out", mlm_args.out, "checkpoint path")->required();
  tmlm->add_option("--log", mlm_args.log, "training log CSV (default <out>.log.csv)");
  tmlm->callback([&] { exit_code = run_train_mlm(mlm_args); });

  TrainArgs next_args;
  auto* tnext = app.add_subcommand("train-next", "next-visit fine-tuning on pooled data");
  add_csv_flags(tnext, next_args.data, false);
  add_hyper_flags(tnext, next_args.hyper);
  tnext->add_option("--epochs", next_args.epochs)->capture_default_str();
  tnext->add_option("--seed", next_args.seed)->capture_default_str();
  tnext->add_option("--val-fraction", next_args.val_fraction)->capture_default_str();
  tnext->add_option("--min-visits", next_args.min_visits)->capture_default_str();
  tnext->add_option("--init", next_args.init, "pretrained MLM checkpoint");
  tnext->add_option("--out", next_args.out, "checkpoint path")->required();
  tnext->add_option("--log", next_args.log, "training log CSV (default <out>.log.csv)");
  tnext->callback([&] { exit_code = run_train_next(next_args); });

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_csv_flags(ev, eval_args.data, false);
  ev->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
  ev->add_option("--task", eval_args.task, "mlm | next")
      ->required()
      ->check(CLI::IsMember({"mlm", "next"}));
  ev->add_option("--min-visits", eval_args.min_visits)->capture_default_str();
  ev->add_option("--seed", eval_args.seed)->capture_default_str();
  ev->add_option("--mask-prob", eval_args.mask_prob)->capture_default_str();
  ev->callback([&] { exit_code = run_eval(eval_args); });

  std::string config_path;
  bool compare = false;
  auto* exp = app.add_subcommand("experiment", "run the regime x threshold x seed grid");
  exp->add_option("--config", config_path, "JSON config or a stored run.json")->required();
  exp->add_flag("--compare", compare, "pretraining-ablation mode (FL only)");
  exp->callback([&] { exit_code = run_experiment_cmd(config_path, compare); });

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "reprint a finished run directory");
  rep->add_option("--run", report_dir, "run directory")->required();
  rep->callback([&] { exit_code = run_report(report_dir); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return exit_code;
}
