#include "stagechain/model/config.hpp"

#include <string>

#include "stagechain/errors.hpp"

namespace stagechain::model {

void ModelConfig::validate() const {
  if (vocab_size == 0 || dim == 0 || n_layers == 0 || n_heads == 0 || max_seq_len == 0 ||
      mlp_ratio == 0) {
    throw UsageError("model config values must be positive");
  }
  if (dim % n_heads != 0) {
    throw UsageError("model dim " + std::to_string(dim) + " not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  if (n_visual_tokens >= max_seq_len) throw UsageError("visual prefix exceeds max_seq_len");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"dim", c.dim},
       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
       {"max_seq_len", c.max_seq_len}, {"n_visual_tokens", c.n_visual_tokens},
       {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dim = j.value("dim", c.dim);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.n_visual_tokens = j.value("n_visual_tokens", c.n_visual_tokens);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const LoraConfig& c) {
  j = {{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, LoraConfig& c) {
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.dropout = j.value("dropout", c.dropout);
  if (c.rank == 0) throw UsageError("lora rank must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw UsageError("lora dropout must lie in [0,1)");
}

}  // namespace stagechain::model
