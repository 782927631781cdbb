#include "stagechain/model/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "stagechain/errors.hpp"

namespace stagechain::model {

namespace {

bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         c == '\'' || c >= 0x80;
}

bool is_space_byte(unsigned char c) {
  return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

std::string byte_token_name(int b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02x>", b);
  return buf;
}

std::optional<int> parse_byte_token(const std::string& name) {
  if (name.size() != 6 || name.rfind("<0x", 0) != 0 || name[5] != '>') return std::nullopt;
  try {
    return std::stoi(name.substr(3, 2), nullptr, 16);
  } catch (...) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t start = i;
    if (c == ' ' && i + 1 < text.size() && !is_space_byte(static_cast<unsigned char>(text[i + 1]))) {
      ++i;  // leading space joins the next chunk
    } else if (is_space_byte(c)) {
      chunks.emplace_back(text.substr(i, 1));
      ++i;
      continue;
    }
    const auto head = static_cast<unsigned char>(text[i]);
    if (is_word_byte(head)) {
      while (i < text.size() && is_word_byte(static_cast<unsigned char>(text[i]))) ++i;
    } else {
      ++i;
    }
    chunks.emplace_back(text.substr(start, i - start));
  }
  return chunks;
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus,
                             std::span<const std::string> specials) {
  Vocabulary v;
  v.tokens_ = {"<pad>", "<eos>"};
  v.special_ids_ = {{"<pad>", kPad}, {"<eos>", kEos}};
  for (const std::string& s : specials) {
    if (v.special_ids_.contains(s)) continue;
    v.special_ids_.emplace(s, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(s);
  }
  v.first_byte_ = static_cast<int>(v.tokens_.size());
  for (int b = 0; b < 256; ++b) v.tokens_.push_back(byte_token_name(b));
  std::set<std::string> chunks;
  // Words get both forms, bare and space-prefixed, so a word seen only at the
  // start of a template still has a token mid-sentence and vice versa.
  auto is_word_char = [](char c) { return is_word_byte(static_cast<unsigned char>(c)); };
  for (const std::string& text : corpus) {
    for (std::string& chunk : pretokenize(text)) {
      const std::string bare = chunk.front() == ' ' ? chunk.substr(1) : chunk;
      if (!bare.empty() && std::all_of(bare.begin(), bare.end(), is_word_char)) {
        chunks.insert(bare);
        chunks.insert(" " + bare);
      } else {
        chunks.insert(std::move(chunk));
      }
    }
  }
  for (const std::string& chunk : chunks) {
    v.chunk_ids_.emplace(chunk, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(chunk);
  }
  return v;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("vocabulary JSON must be an object of token -> id");
  std::vector<std::string> tokens(j.size());
  std::vector<bool> filled(j.size(), false);
  for (const auto& [token, id_json] : j.items()) {
    const int id = id_json.get<int>();
    if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || filled[id]) {
      throw DataError("vocabulary ids must be a permutation of 0..n-1");
    }
    tokens[id] = token;
    filled[id] = true;
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  if (v.tokens_.size() < 258 || v.tokens_[kPad] != "<pad>" || v.tokens_[kEos] != "<eos>") {
    throw DataError("vocabulary is missing <pad>/<eos> or byte tokens");
  }
  int first_byte = -1;
  for (std::size_t id = 0; id < v.tokens_.size(); ++id) {
    if (parse_byte_token(v.tokens_[id]) == 0) {
      first_byte = static_cast<int>(id);
      break;
    }
  }
  if (first_byte < 2) throw DataError("vocabulary has no byte tokens");
  v.first_byte_ = first_byte;
  for (int id = 0; id < first_byte; ++id) v.special_ids_.emplace(v.tokens_[id], id);
  for (std::size_t id = first_byte + 256; id < v.tokens_.size(); ++id) {
    v.chunk_ids_.emplace(v.tokens_[id], static_cast<int>(id));
  }
  return v;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t id = 0; id < tokens_.size(); ++id) j[tokens_[id]] = id;
  return j;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& chunk : pretokenize(text)) {
    auto it = chunk_ids_.find(chunk);
    if (it != chunk_ids_.end()) {
      ids.push_back(it->second);
      continue;
    }
    for (unsigned char b : chunk) ids.push_back(first_byte_ + b);
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kEos) continue;
    if (is_byte(id)) {
      out.push_back(static_cast<char>(id - first_byte_));
    } else {
      out += token(id);
    }
  }
  return out;
}

int Vocabulary::special_id(std::string_view name) const {
  auto it = special_ids_.find(std::string(name));
  if (it == special_ids_.end()) {
    throw DataError("vocabulary has no special token " + std::string(name));
  }
  return it->second;
}

std::size_t TokenSequence::tau() const {
  if (prompt_len == 0) throw LengthError("sequence has no non-visual prompt token");
  const std::size_t t = visual_prefix_len + prompt_len - 1;
  if (t + pad_len >= ids.size()) throw LengthError("tau falls outside the unpadded sequence");
  return t;
}

TokenSequence make_prompt(std::span<const int> visual_prefix, std::span<const int> prompt_ids) {
  TokenSequence seq;
  seq.ids.assign(visual_prefix.begin(), visual_prefix.end());
  seq.ids.insert(seq.ids.end(), prompt_ids.begin(), prompt_ids.end());
  seq.visual_prefix_len = visual_prefix.size();
  seq.prompt_len = prompt_ids.size();
  return seq;
}

}  // namespace stagechain::model
