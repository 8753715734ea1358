#include "fedseq/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "fedseq/rng.hpp"

namespace fedseq {

void validate_record(const PatientRecord& record) {
  if (record.visits.empty())
    throw std::invalid_argument("patient " + record.patient_id + " has no visits");
  for (std::size_t i = 0; i < record.visits.size(); ++i) {
    const Visit& v = record.visits[i];
    if (v.diagnoses.empty())
      throw std::invalid_argument("patient " + record.patient_id + ": empty visit " +
                                  std::to_string(i + 1));
    if (v.age_years < 0)
      throw std::invalid_argument("patient " + record.patient_id + ": negative age");
    if (i > 0) {
      if (record.visits[i - 1].admit_time_hours > v.admit_time_hours)
        throw std::invalid_argument("patient " + record.patient_id +
                                    ": visits not sorted by admit time");
      if (record.visits[i - 1].age_years > v.age_years)
        throw std::invalid_argument("patient " + record.patient_id +
                                    ": age decreases across visits");
    }
  }
}

std::string map_code_to_group(const std::string& raw_code, const GroupTable& table) {
  auto it = table.find(raw_code);
  return it == table.end() ? std::string(kUnknownGroup) : it->second;
}

Vocabulary::Vocabulary(std::vector<std::string> sorted_groups) {
  id_to_token_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  id_to_token_.insert(id_to_token_.end(), sorted_groups.begin(), sorted_groups.end());
  for (std::size_t i = 0; i < id_to_token_.size(); ++i)
    token_to_id_.emplace(id_to_token_[i], static_cast<std::int32_t>(i));
  if (token_to_id_.size() != id_to_token_.size())
    throw std::invalid_argument("duplicate group label in vocabulary");
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

Vocabulary build_vocabulary(std::span<const PatientRecord> cohort) {
  if (cohort.empty()) throw std::invalid_argument("empty cohort");
  std::set<std::string> groups;
  for (const auto& p : cohort)
    for (const auto& v : p.visits)
      for (const auto& g : v.diagnoses) groups.insert(g);
  return Vocabulary(std::vector<std::string>(groups.begin(), groups.end()));
}

Vocabulary build_vocabulary(std::span<const std::string> group_labels) {
  if (group_labels.empty()) throw std::invalid_argument("empty group-label universe");
  std::set<std::string> groups(group_labels.begin(), group_labels.end());
  return Vocabulary(std::vector<std::string>(groups.begin(), groups.end()));
}

namespace {

int age_bucket(int age_years, const EncodingConfig& cfg) {
  return std::clamp(age_years, 0, cfg.age_buckets - 1);
}

int year_bucket(int calendar_year, const EncodingConfig& cfg) {
  return std::clamp(calendar_year - cfg.year_base, 0, cfg.year_buckets - 1);
}

}  // namespace

InputSequence encode_history(const PatientRecord& patient, int upto_visit,
                             const Vocabulary& vocab, const EncodingConfig& cfg) {
  const int n = patient.num_visits();
  if (upto_visit < 1 || upto_visit > n)
    throw std::invalid_argument("encode_history: visit index " + std::to_string(upto_visit) +
                                " out of range for patient with " + std::to_string(n) +
                                " visits");
  const int L = cfg.max_len;
  if (L < 3) throw std::invalid_argument("encode_history: max_len must be >= 3");

  // Drop whole visits from the oldest end until [CLS] + visits + SEPs fit.
  int first = 0;  // index of the first kept visit
  auto layout_len = [&](int from) {
    int len = 1;  // CLS
    for (int i = from; i < upto_visit; ++i)
      len += static_cast<int>(patient.visits[i].diagnoses.size()) + 1;  // tokens + SEP
    return len;
  };
  while (first < upto_visit - 1 && layout_len(first) > L) ++first;

  bool truncated = false;
  int keep_tokens = -1;  // diagnoses kept from the single remaining visit
  if (layout_len(first) > L) {
    keep_tokens = L - 2;  // CLS + tokens + SEP
    truncated = true;
  }

  InputSequence seq;
  seq.token_ids.assign(L, Vocabulary::kPad);
  seq.age_ids.assign(L, 0);
  seq.year_ids.assign(L, 0);
  seq.segment_ids.assign(L, 0);
  seq.position_ids.assign(L, 0);
  seq.attention_mask.assign(L, 0);
  seq.truncated = truncated;

  const Visit& first_visit = patient.visits[first];
  int pos = 0;
  auto put = [&](std::int32_t tok, int age, int year, int seg, int within) {
    seq.token_ids[pos] = tok;
    seq.age_ids[pos] = age_bucket(age, cfg);
    seq.year_ids[pos] = year_bucket(year, cfg);
    seq.segment_ids[pos] = seg;
    seq.position_ids[pos] = within;
    seq.attention_mask[pos] = 1;
    ++pos;
  };

  put(Vocabulary::kCls, first_visit.age_years, first_visit.calendar_year, 0, 0);
  for (int i = first; i < upto_visit; ++i) {
    const Visit& v = patient.visits[i];
    const int seg = (i - first) % 2;
    int within = 0;
    int count = static_cast<int>(v.diagnoses.size());
    if (keep_tokens >= 0) count = std::min(count, keep_tokens);
    for (int d = 0; d < count; ++d) {
      std::int32_t tok = vocab.id(v.diagnoses[d]);
      if (tok < 0) tok = Vocabulary::kUnk;
      put(tok, v.age_years, v.calendar_year, seg, within++);
    }
    put(Vocabulary::kSep, v.age_years, v.calendar_year, seg, within);
  }
  return seq;
}

NextVisitExample make_nextvisit_example(const PatientRecord& patient, int j,
                                        const Vocabulary& vocab, const EncodingConfig& cfg) {
  const int n = patient.num_visits();
  if (n < 2) throw std::invalid_argument("patient has no next visit");
  if (j < 1 || j > n - 1)
    throw std::invalid_argument("make_nextvisit_example: pivot " + std::to_string(j) +
                                " out of range for patient with " + std::to_string(n) +
                                " visits");
  NextVisitExample ex;
  ex.pivot_j = j;
  ex.input = encode_history(patient, j, vocab, cfg);
  ex.labels.assign(static_cast<std::size_t>(vocab.num_disease_tokens()), 0);
  for (const auto& g : patient.visits[j].diagnoses) {
    std::int32_t id = vocab.id(g);
    if (Vocabulary::is_disease(id)) ex.labels[Vocabulary::label_index(id)] = 1;
  }
  return ex;
}

std::vector<PatientRecord> filter_min_visits(std::span<const PatientRecord> cohort,
                                             int threshold) {
  if (threshold < 1) throw std::invalid_argument("filter_min_visits: threshold must be >= 1");
  std::vector<PatientRecord> out;
  for (const auto& p : cohort)
    if (p.num_visits() >= threshold) out.push_back(p);
  return out;
}

std::pair<std::vector<PatientRecord>, std::vector<PatientRecord>> split_cohort(
    std::span<const PatientRecord> cohort, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_cohort: train_fraction must be in (0, 1)");
  if (cohort.size() < 2) throw std::invalid_argument("split_cohort: cohort smaller than 2");

  std::vector<std::size_t> order(cohort.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(substream(seed, Stream::kSplit));
  rng.shuffle(order);

  auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(cohort.size())));
  std::pair<std::vector<PatientRecord>, std::vector<PatientRecord>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(cohort[order[i]]);
  }
  return out;
}

}  // namespace fedseq
