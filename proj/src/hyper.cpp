#include "fedseq/hyper.hpp"

#include <set>
#include <stdexcept>
#include <string>

namespace fedseq {

void HyperParams::validate() const {
  auto require = [](bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument("hyper: " + message);
  };
  require(hidden > 0, "hidden must be positive");
  require(layers > 0, "layers must be positive");
  require(heads > 0, "heads must be positive");
  require(hidden % heads == 0, "hidden must be divisible by heads");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(max_len >= 3, "max_len must be at least 3");
  require(vocab >= Vocabulary::kFirstDisease, "vocab must cover the special tokens");
  require(groups > 0, "groups must be positive");
  require(vocab == Vocabulary::kFirstDisease + groups, "vocab must equal specials plus groups");
  require(age_buckets > 0, "age_buckets must be positive");
  require(year_buckets > 0, "year_buckets must be positive");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(epsilon > 0.0, "epsilon must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(mask_prob >= 0.0 && mask_prob < 1.0, "mask_prob must lie in [0, 1)");
  require(dropout == 0.0, "dropout other than 0 is not supported");
}

void to_json(nlohmann::json& j, const HyperParams& h) {
  j = nlohmann::json{{"hidden", h.hidden},
                     {"layers", h.layers},
                     {"heads", h.heads},
                     {"ffn_dim", h.ffn_dim},
                     {"max_len", h.max_len},
                     {"vocab", h.vocab},
                     {"groups", h.groups},
                     {"age_buckets", h.age_buckets},
                     {"year_buckets", h.year_buckets},
                     {"year_base", h.year_base},
                     {"learning_rate", h.learning_rate},
                     {"beta1", h.beta1},
                     {"beta2", h.beta2},
                     {"epsilon", h.epsilon},
                     {"batch_size", h.batch_size},
                     {"mask_prob", h.mask_prob},
                     {"dropout", h.dropout}};
}

void from_json(const nlohmann::json& j, HyperParams& h) {
  j.at("hidden").get_to(h.hidden);
  j.at("layers").get_to(h.layers);
  j.at("heads").get_to(h.heads);
  j.at("ffn_dim").get_to(h.ffn_dim);
  j.at("max_len").get_to(h.max_len);
  j.at("vocab").get_to(h.vocab);
  j.at("groups").get_to(h.groups);
  j.at("age_buckets").get_to(h.age_buckets);
  j.at("year_buckets").get_to(h.year_buckets);
  j.at("year_base").get_to(h.year_base);
  j.at("learning_rate").get_to(h.learning_rate);
  j.at("beta1").get_to(h.beta1);
  j.at("beta2").get_to(h.beta2);
  j.at("epsilon").get_to(h.epsilon);
  j.at("batch_size").get_to(h.batch_size);
  j.at("mask_prob").get_to(h.mask_prob);
  j.at("dropout").get_to(h.dropout);
}

void hyper_from_json_strict(const nlohmann::json& j, HyperParams& h,
                            const std::string& key_path) {
  if (!j.is_object())
    throw std::invalid_argument("config: " + key_path + " must be an object");
  static const std::set<std::string> known = {
      "hidden",     "layers",       "heads",        "ffn_dim",       "max_len",
      "vocab",      "groups",       "age_buckets",  "year_buckets",  "year_base",
      "learning_rate", "beta1",     "beta2",        "epsilon",       "batch_size",
      "mask_prob",  "dropout"};
  for (const auto& item : j.items()) {
    if (!known.count(item.key()))
      throw std::invalid_argument("config: unknown key " + key_path + "." + item.key());
    const nlohmann::json& v = item.value();
    if (!v.is_number())
      throw std::invalid_argument("config: " + key_path + "." + item.key() +
                                  " must be a number");
  }
  HyperParams merged = h;
  nlohmann::json full;
  to_json(full, merged);
  for (const auto& item : j.items()) full[item.key()] = item.value();
  from_json(full, merged);
  h = merged;
}

}  // namespace fedseq
