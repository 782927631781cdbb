#include "stagechain/model/generate.hpp"

#include "stagechain/ad/ops.hpp"
#include "stagechain/errors.hpp"

namespace stagechain::model {

using ad::Tensor;

namespace {

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const double* p = logits.data().data() + row * v;
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j)
    if (p[j] > p[best]) best = j;
  return static_cast<int>(best);
}

// Byte-fallback tokens can decode to invalid UTF-8; such bytes become U+FFFD
// so transcripts stay valid JSON.
std::string valid_utf8(const std::string& s) {
  auto byte = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
  std::string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    unsigned char lo = 0x80, hi = 0xBF;  // allowed range of the second byte
    if (c < 0x80) len = 1;
    else if (c >= 0xC2 && c <= 0xDF) len = 2;
    else if (c >= 0xE0 && c <= 0xEF) {
      len = 3;
      if (c == 0xE0) lo = 0xA0;
      if (c == 0xED) hi = 0x9F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      len = 4;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    }
    bool ok = len > 0 && i + len <= s.size();
    if (ok && len > 1) ok = byte(i + 1) >= lo && byte(i + 1) <= hi;
    for (std::size_t k = 2; ok && k < len; ++k) ok = (byte(i + k) & 0xC0) == 0x80;
    if (ok) {
      out.append(s, i, len);
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

}  // namespace

Generation generate_greedy(const Transformer& model, const Vocabulary& vocab,
                           const TokenSequence& prompt, const LoraAdapter* adapter,
                           std::size_t max_new, std::span<const Injection> injections) {
  if (max_new == 0) throw UsageError("generate_greedy: max_new must be >= 1");
  ad::NoGradGuard no_grad;
  const std::size_t prompt_end = prompt.visual_prefix_len + prompt.prompt_len;
  if (prompt.length() - prompt.pad_len != prompt_end) {
    throw LengthError("generate_greedy: prompt sequence must hold exactly prefix + prompt tokens");
  }
  Tensor emb = model.embed(prompt);
  for (const Injection& inj : injections) {
    if (inj.position < prompt.visual_prefix_len || inj.position >= prompt_end) {
      throw LengthError("injection position " + std::to_string(inj.position) +
                        " outside prompt range [" + std::to_string(prompt.visual_prefix_len) +
                        ", " + std::to_string(prompt_end) + ")");
    }
    emb = ad::add_to_row(emb, inj.position, inj.vector);
  }

  Generation gen;
  gen.prompt_embedding = emb;
  KvCache cache;
  ForwardOutput out = model.forward(emb, adapter, {}, &cache);
  gen.prompt_hidden = out.hidden;
  std::vector<Tensor> hidden_rows = {out.hidden};
  int next = argmax_row(out.logits, out.logits.rows() - 1);
  const std::size_t limit = model.config().max_seq_len;
  while (true) {
    if (next == Vocabulary::kEos) {
      gen.hit_eos = true;
      break;
    }
    gen.tokens.push_back(next);
    if (gen.tokens.size() >= max_new || cache.rows >= limit) break;
    const int ids[1] = {next};
    Tensor row = model.embed_ids(ids, cache.rows);
    ForwardOutput step = model.forward_step(row, adapter, cache);
    hidden_rows.push_back(step.hidden);
    next = argmax_row(step.logits, 0);
  }
  gen.hidden = ad::concat_rows(hidden_rows);
  gen.text = valid_utf8(vocab.decode(gen.tokens));
  if (!gen.text.empty() && gen.text.front() == ' ') gen.text.erase(0, 1);
  return gen;
}

}  // namespace stagechain::model
