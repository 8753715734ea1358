#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedseq/model.hpp"

namespace fedseq {

// Container: "FSEQ1" magic, uint32 little-endian manifest length, JSON
// manifest (hyperparameters, tensor shapes and byte offsets, FNV-1a 64
// payload checksum), then the float32 little-endian payload in canonical
// tensor order.
inline constexpr char kCheckpointMagic[] = {'F', 'S', 'E', 'Q', '1'};

struct CheckpointInfo {
  HyperParams hyper;
  std::vector<std::string> tensor_names;
  std::uint64_t payload_floats = 0;
  std::string checksum;
};

std::uint64_t fnv1a64(const void* data, std::size_t len);

void save_checkpoint(const std::string& path, const ModelParams<float>& params);

// Throws std::runtime_error on bad magic, truncation, unknown or missing
// tensors, shape mismatches, or checksum failure; messages name the tensor.
ModelParams<float> load_checkpoint(const std::string& path);

// Additionally rejects files whose architecture differs from `expected`.
ModelParams<float> load_checkpoint(const std::string& path, const HyperParams& expected);

CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace fedseq
