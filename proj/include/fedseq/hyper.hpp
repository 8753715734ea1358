#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "fedseq/data.hpp"

namespace fedseq {

// Transformer and optimizer hyperparameters. `vocab` and `groups` are filled
// in once the vocabulary is known; everything else has desk-scale defaults.
struct HyperParams {
  int hidden = 64;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 256;
  int max_len = 64;
  int vocab = 0;
  int groups = 0;
  int age_buckets = 121;
  int year_buckets = 64;
  int year_base = 1980;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 32;
  double mask_prob = 0.15;
  double dropout = 0.0;

  void validate() const;

  EncodingConfig encoding() const {
    return EncodingConfig{max_len, age_buckets, year_buckets, year_base};
  }

  bool operator==(const HyperParams&) const = default;
};

void to_json(nlohmann::json& j, const HyperParams& h);
void from_json(const nlohmann::json& j, HyperParams& h);

// from_json variant that rejects unknown keys with their path.
void hyper_from_json_strict(const nlohmann::json& j, HyperParams& h,
                            const std::string& key_path);

}  // namespace fedseq
