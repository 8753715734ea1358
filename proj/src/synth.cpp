#include "fedseq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "fedseq/csv.hpp"
#include "fedseq/rng.hpp"

namespace fedseq {

void SynthConfig::validate() const {
  if (num_patients < 1) throw std::invalid_argument("synth: num_patients must be positive");
  if (num_centers < 1) throw std::invalid_argument("synth: num_centers must be positive");
  if (num_groups < 2) throw std::invalid_argument("synth: num_groups must be >= 2");
  if (!(mean_visits > 1.0)) throw std::invalid_argument("synth: mean_visits must be > 1");
  if (max_dx_per_visit < 1)
    throw std::invalid_argument("synth: max_dx_per_visit must be positive");
  if (!(heterogeneity_alpha > 0.0))
    throw std::invalid_argument("synth: heterogeneity_alpha must be > 0");
  if (!(home_stay_bias >= 1.0))
    throw std::invalid_argument("synth: home_stay_bias must be >= 1");
  if (!(recurrence >= 0.0 && recurrence < 1.0))
    throw std::invalid_argument("synth: recurrence must lie in [0, 1)");
}

namespace {

std::string padded_label(const char* prefix, int index, int width) {
  std::string s = std::to_string(index);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return std::string(prefix) + s;
}

int label_width(int count) {
  int w = 1;
  for (int c = count - 1; c >= 10; c /= 10) ++w;
  return w;
}

// Weighted draw without replacement: chosen entries get weight zero.
int draw_weighted(std::vector<double>& weights, double& total, Rng& rng) {
  double u = rng.u01() * total;
  double acc = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last = static_cast<int>(i);
    if (u < acc) break;
  }
  total -= weights[last];
  weights[last] = 0.0;
  return last;
}

}  // namespace

SynthOutput generate_cohort(const SynthConfig& config) {
  config.validate();
  SynthOutput out;

  const int gw = label_width(config.num_groups);
  for (int g = 0; g < config.num_groups; ++g)
    out.group_labels.push_back(padded_label("G", g, gw));
  const int cw = label_width(config.num_centers);
  for (int c = 0; c < config.num_centers; ++c)
    out.center_ids.push_back(padded_label("C", c, cw));

  Rng rng(substream(config.seed, Stream::kSynth));

  // Per-center group distributions.
  std::vector<std::vector<double>> theta(config.num_centers);
  for (auto& t : theta) t = rng.dirichlet(config.heterogeneity_alpha, config.num_groups);

  const double geo_p = 1.0 / config.mean_visits;  // extra-visit count ~ Geometric(p)
  const int pw = label_width(config.num_patients);

  for (int i = 0; i < config.num_patients; ++i) {
    PatientRecord rec;
    rec.patient_id = padded_label("P", i, pw);
    const int home = static_cast<int>(rng.bounded(config.num_centers));
    out.home_center.push_back(out.center_ids[home]);

    double u = rng.u01();
    while (u <= 0.0) u = rng.u01();
    int extra = static_cast<int>(std::floor(std::log(u) / std::log(1.0 - geo_p)));
    extra = std::min(extra, 60);
    const int n_visits = 1 + extra;

    int age = 18 + static_cast<int>(rng.bounded(73));  // 18..90
    int year = 1995 + static_cast<int>(rng.bounded(25));
    std::int64_t admit = static_cast<std::int64_t>(year - 1970) * 8760 +
                         static_cast<std::int64_t>(rng.bounded(8760));
    std::vector<int> past;  // distinct groups seen so far, in first-seen order
    std::vector<char> seen(static_cast<std::size_t>(config.num_groups), 0);
    for (int v = 0; v < n_visits; ++v) {
      if (v > 0) {
        int bump = static_cast<int>(rng.bounded(3));  // 0..2 years
        age = std::min(age + bump, 120);
        year += bump;
        admit += static_cast<std::int64_t>(bump) * 8760 + 1 +
                 static_cast<std::int64_t>(rng.bounded(4000));
      }
      const int want =
          1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(config.max_dx_per_visit)));
      const int ndx = std::min(want, config.num_groups);
      std::vector<double> w = theta[home];
      if (!past.empty() && config.recurrence > 0.0) {
        const double share = config.recurrence / static_cast<double>(past.size());
        for (double& x : w) x *= 1.0 - config.recurrence;
        for (int g : past) w[static_cast<std::size_t>(g)] += share;
      }
      double total = 0.0;
      for (double x : w) total += x;
      Visit visit;
      visit.admit_time_hours = admit;
      visit.age_years = age;
      visit.calendar_year = year;
      for (int d = 0; d < ndx; ++d) {
        const int g = draw_weighted(w, total, rng);
        visit.diagnoses.push_back(out.group_labels[g]);
        if (!seen[static_cast<std::size_t>(g)]) {
          seen[static_cast<std::size_t>(g)] = 1;
          past.push_back(g);
        }
      }
      std::sort(visit.diagnoses.begin(), visit.diagnoses.end());
      rec.visits.push_back(std::move(visit));
    }

    // 1-3 stay records; the home stay is scaled so it dominates.
    const int n_transfers = 1 + static_cast<int>(rng.bounded(3));
    out.transfers.push_back(TransferRecord{
        rec.patient_id, out.center_ids[home],
        config.home_stay_bias * (40.0 + 60.0 * rng.u01())});
    for (int t = 1; t < n_transfers && config.num_centers > 1; ++t) {
      int other = static_cast<int>(rng.bounded(config.num_centers - 1));
      if (other >= home) ++other;
      out.transfers.push_back(
          TransferRecord{rec.patient_id, out.center_ids[other], 20.0 + 80.0 * rng.u01()});
    }

    out.cohort.push_back(std::move(rec));
  }
  return out;
}

void write_cohort_csvs(const SynthOutput& out, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);

  std::ofstream visits(fs::path(directory) / "visits.csv");
  visits << "patient_id,admit_time_hours,age_years,calendar_year,raw_code\n";
  for (const auto& p : out.cohort)
    for (const auto& v : p.visits)
      for (const auto& g : v.diagnoses)
        visits << p.patient_id << ',' << v.admit_time_hours << ',' << v.age_years << ','
               << v.calendar_year << ',' << g << '\n';

  std::ofstream groups(fs::path(directory) / "groups.csv");
  groups << "raw_code,group\n";
  for (const auto& g : out.group_labels) groups << g << ',' << g << '\n';

  std::ofstream transfers(fs::path(directory) / "transfers.csv");
  transfers << "patient_id,care_unit,duration_hours\n";
  for (const auto& t : out.transfers)
    transfers << t.patient_id << ',' << t.care_unit << ','
              << csv::format_double(t.duration_hours) << '\n';
}

HeterogeneityReport heterogeneity_report(std::span<const ClientDataset> clients) {
  if (clients.size() < 2)
    throw std::invalid_argument("heterogeneity_report: need at least 2 clients");

  struct Freq {
    std::string center;
    std::map<std::string, double> p;
  };
  HeterogeneityReport report;
  std::vector<Freq> freqs;
  for (const auto& c : clients) {
    std::map<std::string, double> counts;
    double total = 0.0;
    for (const auto& p : c.patients)
      for (const auto& v : p.visits)
        for (const auto& g : v.diagnoses) {
          counts[g] += 1.0;
          total += 1.0;
        }
    if (total == 0.0) {
      report.warnings.push_back("skipped empty client shard: " + c.center_id);
      continue;
    }
    for (auto& [g, n] : counts) n /= total;
    freqs.push_back(Freq{c.center_id, std::move(counts)});
  }

  double sum = 0.0;
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    for (std::size_t j = i + 1; j < freqs.size(); ++j) {
      double l1 = 0.0;
      for (const auto& [g, p] : freqs[i].p) {
        auto it = freqs[j].p.find(g);
        l1 += std::abs(p - (it == freqs[j].p.end() ? 0.0 : it->second));
      }
      for (const auto& [g, q] : freqs[j].p)
        if (!freqs[i].p.count(g)) l1 += q;
      report.pairs.push_back({freqs[i].center, freqs[j].center, 0.5 * l1});
      sum += 0.5 * l1;
    }
  }
  if (!report.pairs.empty()) report.mean_tv = sum / static_cast<double>(report.pairs.size());
  return report;
}

std::string heterogeneity_report_json(const HeterogeneityReport& report) {
  nlohmann::ordered_json j;
  j["mean_tv"] = report.mean_tv;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : report.pairs)
    j["pairs"].push_back({{"a", p.center_a}, {"b", p.center_b}, {"tv", p.tv}});
  j["warnings"] = report.warnings;
  return j.dump(2);
}

}  // namespace fedseq
