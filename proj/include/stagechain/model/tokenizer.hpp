#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace stagechain::model {

// Splits text into vocabulary chunks: a word (ASCII alphanumerics, apostrophes
// and UTF-8 continuation bytes) with at most one leading space, a single
// punctuation byte with at most one leading space, or a single whitespace
// byte. Concatenating the chunks reproduces the input exactly.
std::vector<std::string> pretokenize(std::string_view text);

// Word-level closed vocabulary with byte fallback.
//
// Id layout: 0 <pad>, 1 <eos>, then caller-supplied special tokens, then the
// 256 byte tokens <0x00>..<0xff>, then the chunk vocabulary in sorted order.
// A chunk missing from the vocabulary is encoded as its bytes, so every
// string round-trips through encode/decode.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;

  static Vocabulary build(std::span<const std::string> corpus,
                          std::span<const std::string> specials);
  static Vocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;  // token -> id

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int special_id(std::string_view name) const;  // throws DataError
  bool is_byte(int id) const { return id >= first_byte_ && id < first_byte_ + 256; }
  bool is_special(int id) const { return id < first_byte_; }
  std::size_t chunk_count() const { return chunk_ids_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> chunk_ids_;
  std::unordered_map<std::string, int> special_ids_;
  int first_byte_ = 2;
};

// Token ids of one stage input: visual prefix, prompt text, optional answer
// continuation, right padding.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t visual_prefix_len = 0;
  std::size_t prompt_len = 0;  // text prompt tokens following the visual prefix
  std::size_t pad_len = 0;

  std::size_t length() const { return ids.size(); }
  // Last non-visual, non-padding prompt token. Throws LengthError when the
  // prompt has no text tokens.
  std::size_t tau() const;
};

TokenSequence make_prompt(std::span<const int> visual_prefix, std::span<const int> prompt_ids);

}  // namespace stagechain::model
