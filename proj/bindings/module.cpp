#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fedseq/checkpoint.hpp"
#include "fedseq/experiment.hpp"
#include "fedseq/metrics.hpp"
#include "fedseq/partition.hpp"
#include "fedseq/synth.hpp"

namespace py = pybind11;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string report_to_json(const fedseq::MetricsReport& rep) {
  ordered_json j;
  j["run_id"] = rep.run_id;
  j["run_dir"] = rep.run_dir;
  ordered_json rows = ordered_json::array();
  for (const fedseq::MeasurementRow& r : rep.rows) {
    ordered_json row;
    row["regime"] = r.regime;
    row["pretraining"] = r.pretraining;
    row["min_visits"] = r.min_visits;
    row["seed"] = r.seed;
    row["split"] = r.split;
    row["metric_name"] = r.metric_name;
    if (std::isfinite(r.value))
      row["value"] = r.value;
    else
      row["value"] = nullptr;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  ordered_json summary = ordered_json::array();
  for (const fedseq::SummaryRow& s : rep.summary) {
    ordered_json row;
    row["regime"] = s.regime;
    row["pretraining"] = s.pretraining;
    row["min_visits"] = s.min_visits;
    row["metric_name"] = s.metric_name;
    row["n_seeds"] = s.n_seeds;
    row["mean"] = s.mean;
    if (s.has_ci) {
      row["ci95_low"] = s.ci95_low;
      row["ci95_high"] = s.ci95_high;
    } else {
      row["ci95_low"] = nullptr;
      row["ci95_high"] = nullptr;
    }
    summary.push_back(std::move(row));
  }
  j["summary"] = std::move(summary);
  j["failures"] = rep.failures;
  return j.dump();
}

fedseq::ParsedExperiment parse_config(const std::string& text, const std::string& mode) {
  return fedseq::parse_experiment_json(json::parse(text), mode);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "federated EHR sequence modeling core";
  m.attr("__version__") = "0.1.0";

  m.def(
      "synth_cohort",
      [](const std::string& out_dir, int patients, int centers, int groups, double mean_visits,
         int max_dx, double alpha, double stay_bias, double recurrence, std::uint64_t seed) {
        fedseq::SynthConfig cfg;
        cfg.num_patients = patients;
        cfg.num_centers = centers;
        cfg.num_groups = groups;
        cfg.mean_visits = mean_visits;
        cfg.max_dx_per_visit = max_dx;
        cfg.heterogeneity_alpha = alpha;
        cfg.home_stay_bias = stay_bias;
        cfg.recurrence = recurrence;
        cfg.seed = seed;
        cfg.validate();
        const fedseq::SynthOutput out = fedseq::generate_cohort(cfg);
        fedseq::write_cohort_csvs(out, out_dir);
        const fedseq::PartitionResult part = fedseq::partition_cohort(out.cohort, out.transfers);
        ordered_json j;
        j["out"] = out_dir;
        j["patients"] = out.cohort.size();
        j["centers"] = out.center_ids.size();
        j["groups"] = out.group_labels.size();
        j["heterogeneity"] =
            json::parse(fedseq::heterogeneity_report_json(fedseq::heterogeneity_report(part.clients)));
        return j.dump();
      },
      py::arg("out_dir"), py::arg("patients") = 200, py::arg("centers") = 4,
      py::arg("groups") = 40, py::arg("mean_visits") = 4.0, py::arg("max_dx") = 4,
      py::arg("alpha") = 0.1, py::arg("stay_bias") = 3.0, py::arg("recurrence") = 0.6,
      py::arg("seed") = 1, "Write a synthetic cohort as CSVs; returns a JSON summary.");

  m.def(
      "run_experiment_json",
      [](const std::string& config) {
        const fedseq::ParsedExperiment parsed = parse_config(config, "experiment");
        const fedseq::MetricsReport rep = parsed.mode == "compare"
                                              ? fedseq::compare_pretraining(parsed.config)
                                              : fedseq::run_experiment(parsed.config);
        return report_to_json(rep);
      },
      py::arg("config"), "Run the experiment grid from a JSON config string.");

  m.def(
      "compare_pretraining_json",
      [](const std::string& config) {
        const fedseq::ParsedExperiment parsed = parse_config(config, "compare");
        return report_to_json(fedseq::compare_pretraining(parsed.config));
      },
      py::arg("config"), "Run the pretraining ablation from a JSON config string.");

  m.def(
      "load_run_json", [](const std::string& run_dir) { return report_to_json(fedseq::load_run(run_dir)); },
      py::arg("run_dir"), "Reload a finished run directory.");

  m.def(
      "average_precision",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        std::vector<std::uint8_t> y;
        y.reserve(labels.size());
        for (int v : labels) {
          if (v != 0 && v != 1) throw std::invalid_argument("labels must be 0 or 1");
          y.push_back(static_cast<std::uint8_t>(v));
        }
        return fedseq::average_precision(scores, y);
      },
      py::arg("scores"), py::arg("labels"), "Micro average precision of one flattened ranking.");

  m.def(
      "summarize",
      [](const std::vector<double>& values) {
        const fedseq::Summary s = fedseq::summarize(values);
        return py::make_tuple(s.mean, s.half_width, s.n);
      },
      py::arg("values"), "Mean, 95% half-width and count of a seed sweep.");

  m.def(
      "checkpoint_info_json",
      [](const std::string& path) {
        const fedseq::CheckpointInfo info = fedseq::read_checkpoint_info(path);
        ordered_json j;
        j["hyper"] = json(info.hyper);
        j["tensors"] = info.tensor_names;
        j["payload_floats"] = info.payload_floats;
        j["checksum"] = info.checksum;
        return j.dump();
      },
      py::arg("path"), "Manifest of a saved checkpoint.");
}
