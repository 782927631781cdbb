#pragma once

#include <cstddef>

#include <nlohmann/json.hpp>

namespace stagechain::model {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;  // D
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 192;
  std::size_t n_visual_tokens = 4;
  std::size_t mlp_ratio = 4;

  std::size_t head_dim() const { return dim / n_heads; }
  void validate() const;  // throws UsageError
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;

  double scaling() const { return alpha / static_cast<double>(rank); }
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

}  // namespace stagechain::model
