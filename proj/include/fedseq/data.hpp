#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace fedseq {

// Group assigned to raw codes that are absent from the group table.
inline constexpr const char* kUnknownGroup = "UNK_GROUP";

// raw diagnosis code -> aggregated group label
using GroupTable = std::unordered_map<std::string, std::string>;

struct GroupedCode {
  std::string raw_code;
  std::string group;
};

// One admission: the set of diagnosis groups plus the patient's age and the
// calendar year at that admission. `diagnoses` is duplicate-free, first
// occurrence preserved.
struct Visit {
  std::vector<std::string> diagnoses;
  std::int64_t admit_time_hours = 0;
  int age_years = 0;
  int calendar_year = 0;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<Visit> visits;  // sorted ascending by admit_time_hours

  int num_visits() const { return static_cast<int>(visits.size()); }
};

// Throws std::invalid_argument when a record breaks its invariants (empty
// visit list, empty diagnosis set, unsorted admissions, decreasing age).
void validate_record(const PatientRecord& record);

std::string map_code_to_group(const std::string& raw_code, const GroupTable& table);

// Token space: 5 fixed specials followed by the disease-group tokens in
// sorted label order.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::int32_t kFirstDisease = 5;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> sorted_groups);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int num_disease_tokens() const { return size() - kFirstDisease; }

  // -1 when the token is unknown.
  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const { return id_to_token_.at(id); }
  static bool is_disease(std::int32_t id) { return id >= kFirstDisease; }

  // Multi-hot label index for a disease-token id and back.
  static int label_index(std::int32_t disease_id) { return disease_id - kFirstDisease; }
  static std::int32_t disease_id(int label_index) { return label_index + kFirstDisease; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
};

Vocabulary build_vocabulary(std::span<const PatientRecord> cohort);

// Vocabulary over an explicit label universe (deduplicated and sorted), so
// encodings stay stable across cohort subsets drawn from the same grouping.
Vocabulary build_vocabulary(std::span<const std::string> group_labels);

// Flattened BEHRT input: parallel integer lanes of fixed length L.
// attention_mask[i] == 0 exactly where token_ids[i] == PAD.
struct InputSequence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> age_ids;
  std::vector<std::int32_t> year_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> position_ids;
  std::vector<std::int32_t> attention_mask;
  bool truncated = false;  // set when a single visit had to be cut to fit

  int length() const { return static_cast<int>(token_ids.size()); }
};

// Age/year bucketing for the embedding lanes.
struct EncodingConfig {
  int max_len = 64;
  int age_buckets = 121;   // one bucket per year of age, 0..120
  int year_buckets = 64;   // offsets from year_base, clamped
  int year_base = 1980;
};

// Layout: [CLS] v1 [SEP] v2 [SEP] ... vj [SEP], padded to max_len. Position
// ids restart at every visit boundary with the trailing SEP counted as part
// of its visit; segments alternate 0/1 per visit. When the layout overflows,
// whole visits are dropped oldest-first; if the newest visit alone overflows
// its diagnoses are cut from the end and `truncated` is set.
InputSequence encode_history(const PatientRecord& patient, int upto_visit,
                             const Vocabulary& vocab, const EncodingConfig& cfg);

struct NextVisitExample {
  InputSequence input;
  std::vector<std::uint8_t> labels;  // multi-hot over the G disease groups
  int pivot_j = 0;
};

NextVisitExample make_nextvisit_example(const PatientRecord& patient, int j,
                                        const Vocabulary& vocab, const EncodingConfig& cfg);

std::vector<PatientRecord> filter_min_visits(std::span<const PatientRecord> cohort, int threshold);

// Patient-level disjoint split, |train| = round(fraction * |cohort|).
std::pair<std::vector<PatientRecord>, std::vector<PatientRecord>> split_cohort(
    std::span<const PatientRecord> cohort, double train_fraction, std::uint64_t seed);

}  // namespace fedseq
