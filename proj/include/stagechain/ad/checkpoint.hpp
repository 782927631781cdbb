#pragma once

#include <filesystem>
#include <span>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/ad/tensor.hpp"

namespace stagechain::ad {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// On-disk layout of a checkpoint directory:
//   manifest.json   {"format":"stagechain-checkpoint/1","dtype":"float64",
//                    "byte_order":"little","provenance":{...},
//                    "tensors":[{"name","shape","file","sha256"}]}
//   tNNNN.bin       raw little-endian float64 payload, one file per tensor
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  nlohmann::json provenance;

  const Tensor& get(const std::string& name) const;  // throws MissingArtifactError
};

void save_checkpoint(const std::filesystem::path& dir, const NamedTensors& tensors,
                     const nlohmann::json& provenance);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Copies checkpoint values into existing tensors with matching names/shapes.
void restore_into(const Checkpoint& ckpt, const NamedTensors& targets);

// Hex SHA-256 of a byte range, of a tensor's payload, of a set of tensors,
// and of a checkpoint directory (manifest plus payloads).
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& text);
std::string tensor_checksum(const Tensor& t);
std::string tensors_checksum(const NamedTensors& tensors);
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace stagechain::ad
