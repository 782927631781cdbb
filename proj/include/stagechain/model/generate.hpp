#pragma once

#include <span>
#include <string>
#include <vector>

#include "stagechain/ad/tensor.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/tokenizer.hpp"
#include "stagechain/model/transformer.hpp"

namespace stagechain::model {

// A vector added to the prompt embedding row at `position` before the first
// forward pass. Several injections at one position sum.
struct Injection {
  std::size_t position = 0;
  ad::Tensor vector;
};

struct Generation {
  std::vector<int> tokens;  // generated ids, end token excluded
  std::string text;         // detokenized, one leading space removed
  bool hit_eos = false;
  ad::Tensor prompt_embedding;  // prompt rows after injection
  ad::Tensor prompt_hidden;     // last-layer hidden states of the prompt pass
  ad::Tensor hidden;            // prompt and generated positions
};

// Deterministic argmax decoding until <eos>, max_new tokens, or the context
// limit. Ties break toward the lower token id.
Generation generate_greedy(const Transformer& model, const Vocabulary& vocab,
                           const TokenSequence& prompt, const LoraAdapter* adapter,
                           std::size_t max_new, std::span<const Injection> injections = {});

}  // namespace stagechain::model
