#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "stagechain/ad/checkpoint.hpp"
#include "stagechain/ad/rng.hpp"
#include "stagechain/ad/tensor.hpp"
#include "stagechain/model/config.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/tokenizer.hpp"

namespace stagechain::model {

// Dropout is applied to adapter inputs only, and only when a generator is
// supplied.
struct ForwardOptions {
  ad::Rng* dropout_rng = nullptr;
};

struct ForwardOutput {
  ad::Tensor logits;  // L × V
  ad::Tensor hidden;  // L × D, last layer after the final norm
};

// Per-layer key/value rows accumulated during incremental decoding.
struct KvCache {
  std::vector<std::vector<double>> keys;    // per layer, rows × D
  std::vector<std::vector<double>> values;  // per layer, rows × D
  std::size_t rows = 0;
};

// Pre-norm decoder-only transformer with learned positional embeddings.
class Transformer {
 public:
  Transformer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Token plus positional embeddings, L × D. Injection happens on this output.
  ad::Tensor embed(const TokenSequence& seq) const;
  ad::Tensor embed_ids(std::span<const int> ids, std::size_t first_position) const;

  ForwardOutput forward(const ad::Tensor& emb, const LoraAdapter* adapter,
                        ForwardOptions options = {}, KvCache* cache = nullptr) const;

  // Processes one new position given a cache filled by forward(); returns
  // logits (1 × V) and hidden (1 × D) for that position and appends its keys
  // and values to the cache. Matches the corresponding row of a full forward.
  ForwardOutput forward_step(const ad::Tensor& emb_row, const LoraAdapter* adapter,
                             KvCache& cache) const;

  void set_trainable(bool trainable);
  ad::NamedTensors named_parameters() const;
  std::string checksum() const;

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;
  static Transformer load(const std::filesystem::path& dir);

 private:
  struct Block {
    ad::Tensor ln1_gain, ln1_bias, wq, wk, wv, wo;
    ad::Tensor ln2_gain, ln2_bias, w_up, w_down;
  };

  ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& weight, const LoraAdapter* adapter,
                    std::size_t layer, LoraTarget target, const ForwardOptions& options) const;

  ModelConfig config_;
  std::uint64_t seed_;
  ad::Tensor tok_embed_, pos_embed_;
  std::vector<Block> blocks_;
  ad::Tensor lnf_gain_, lnf_bias_, lm_head_;
};

}  // namespace stagechain::model
