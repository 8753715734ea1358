#include "fedseq/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

namespace fedseq {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

[[noreturn]] void fail(const std::string& path, const std::string& message) {
  throw std::runtime_error("checkpoint: " + path + ": " + message);
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
  params.hyper.validate();
  const auto specs = tensor_specs(params.hyper);

  std::vector<float> payload;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::object();
  std::uint64_t byte_offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Mat<float>& t = params.tensors[i];
    tensors[specs[i].name] = {{"shape", {t.rows(), t.cols()}}, {"offset", byte_offset}};
    payload.insert(payload.end(), t.data(), t.data() + t.size());
    byte_offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }

  nlohmann::ordered_json manifest;
  nlohmann::json hyper_json;
  to_json(hyper_json, params.hyper);
  manifest["hyper"] = hyper_json;
  manifest["tensors"] = tensors;
  manifest["checksum"] = hex64(fnv1a64(payload.data(), payload.size() * sizeof(float)));
  const std::string manifest_text = manifest.dump();
  if (manifest_text.size() > 0xFFFFFFFFULL) fail(path, "manifest too large");
  const std::uint32_t manifest_len = static_cast<std::uint32_t>(manifest_text.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  unsigned char len_le[4] = {static_cast<unsigned char>(manifest_len & 0xFF),
                             static_cast<unsigned char>((manifest_len >> 8) & 0xFF),
                             static_cast<unsigned char>((manifest_len >> 16) & 0xFF),
                             static_cast<unsigned char>((manifest_len >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(len_le), 4);
  out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) fail(path, "write failed");
}

namespace {

struct RawCheckpoint {
  nlohmann::json manifest;
  std::vector<float> payload;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t header = sizeof(kCheckpointMagic) + 4;
  if (bytes.size() < header) fail(path, "truncated header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    fail(path, "bad magic");
  const auto* lp = reinterpret_cast<const unsigned char*>(bytes.data() + sizeof(kCheckpointMagic));
  const std::uint64_t manifest_len = static_cast<std::uint64_t>(lp[0]) |
                                     (static_cast<std::uint64_t>(lp[1]) << 8) |
                                     (static_cast<std::uint64_t>(lp[2]) << 16) |
                                     (static_cast<std::uint64_t>(lp[3]) << 24);
  if (bytes.size() < header + manifest_len) fail(path, "truncated manifest");
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(bytes.substr(header, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("manifest parse error: ") + e.what());
  }
  const std::size_t payload_bytes = bytes.size() - header - manifest_len;
  if (payload_bytes % sizeof(float) != 0) fail(path, "payload size not a float multiple");
  raw.payload.resize(payload_bytes / sizeof(float));
  std::memcpy(raw.payload.data(), bytes.data() + header + manifest_len, payload_bytes);
  return raw;
}

}  // namespace

ModelParams<float> load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  HyperParams hyper;
  try {
    from_json(raw.manifest.at("hyper"), hyper);
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("bad hyper block: ") + e.what());
  }
  try {
    hyper.validate();
  } catch (const std::exception& e) {
    fail(path, e.what());
  }

  if (!raw.manifest.contains("tensors") || !raw.manifest.at("tensors").is_object())
    fail(path, "missing tensors block");
  const auto& tensors = raw.manifest.at("tensors");

  const std::string stored_sum = raw.manifest.value("checksum", std::string());
  const std::string actual_sum =
      hex64(fnv1a64(raw.payload.data(), raw.payload.size() * sizeof(float)));
  if (stored_sum != actual_sum)
    fail(path, "checksum mismatch: manifest " + stored_sum + ", payload " + actual_sum);

  const auto specs = tensor_specs(hyper);
  for (const auto& item : tensors.items()) {
    bool known = false;
    for (const TensorSpec& s : specs) known = known || s.name == item.key();
    if (!known) fail(path, "unexpected tensor " + item.key());
  }

  ModelParams<float> params(hyper);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const TensorSpec& s = specs[i];
    if (!tensors.contains(s.name)) fail(path, "missing tensor " + s.name);
    const auto& entry = tensors.at(s.name);
    std::int64_t rows = 0, cols = 0, offset = 0;
    try {
      rows = entry.at("shape").at(0).get<std::int64_t>();
      cols = entry.at("shape").at(1).get<std::int64_t>();
      offset = entry.at("offset").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(path, "bad entry for tensor " + s.name + ": " + e.what());
    }
    if (rows != s.rows || cols != s.cols)
      fail(path, "shape mismatch for tensor " + s.name + ": stored " + std::to_string(rows) +
                     "x" + std::to_string(cols) + ", expected " + std::to_string(s.rows) + "x" +
                     std::to_string(s.cols));
    const std::int64_t count = rows * cols;
    if (offset < 0 || offset % static_cast<std::int64_t>(sizeof(float)) != 0)
      fail(path, "bad byte offset for tensor " + s.name);
    const std::int64_t first = offset / static_cast<std::int64_t>(sizeof(float));
    if (static_cast<std::uint64_t>(first + count) > raw.payload.size())
      fail(path, "payload range for tensor " + s.name + " out of bounds");
    Mat<float>& t = params.tensors[i];
    std::memcpy(t.data(), raw.payload.data() + first,
                static_cast<std::size_t>(count) * sizeof(float));
  }
  return params;
}

ModelParams<float> load_checkpoint(const std::string& path, const HyperParams& expected) {
  ModelParams<float> params = load_checkpoint(path);
  if (params.hyper.hidden == expected.hidden && params.hyper.layers == expected.layers &&
      params.hyper.heads == expected.heads && params.hyper.ffn_dim == expected.ffn_dim &&
      params.hyper.max_len == expected.max_len && params.hyper.vocab == expected.vocab &&
      params.hyper.groups == expected.groups &&
      params.hyper.age_buckets == expected.age_buckets &&
      params.hyper.year_buckets == expected.year_buckets)
    return params;
  const auto stored = tensor_specs(params.hyper);
  const auto wanted = tensor_specs(expected);
  for (std::size_t i = 0; i < std::min(stored.size(), wanted.size()); ++i) {
    if (stored[i].name != wanted[i].name || stored[i].rows != wanted[i].rows ||
        stored[i].cols != wanted[i].cols)
      fail(path, "shape mismatch for tensor " + wanted[i].name + ": stored " +
                     std::to_string(stored[i].rows) + "x" + std::to_string(stored[i].cols) +
                     ", expected " + std::to_string(wanted[i].rows) + "x" +
                     std::to_string(wanted[i].cols));
  }
  fail(path, "hyperparameters do not match the requested architecture");
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  CheckpointInfo info;
  try {
    from_json(raw.manifest.at("hyper"), info.hyper);
    std::vector<std::pair<std::uint64_t, std::string>> by_offset;
    for (const auto& item : raw.manifest.at("tensors").items())
      by_offset.emplace_back(item.value().at("offset").get<std::uint64_t>(), item.key());
    std::sort(by_offset.begin(), by_offset.end());
    for (auto& [offset, name] : by_offset) info.tensor_names.push_back(std::move(name));
    info.checksum = raw.manifest.value("checksum", std::string());
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("bad manifest: ") + e.what());
  }
  info.payload_floats = raw.payload.size();
  return info;
}

}  // namespace fedseq
