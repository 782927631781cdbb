#include <cstring>

#include "doctest.h"
#include "stagechain/ad/ops.hpp"
#include "stagechain/ad/optim.hpp"
#include "stagechain/ad/gradcheck.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/model/generate.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/transformer.hpp"

using namespace stagechain;
using namespace stagechain::model;

namespace {

const std::vector<std::string> kCorpus = {
    "There is a pedestrian crossing the road.", "The ego vehicle should slow down.",
    "I see a red light ahead", "The action is to keep going at the same speed"};
const std::vector<std::string> kSpecials = {"<light:red>", "<light:green>", "<ped:crossing>",
                                            "<ped:none>"};

Vocabulary test_vocab() { return Vocabulary::build(kCorpus, kSpecials); }

ModelConfig small_config(const Vocabulary& v, std::size_t dim = 16) {
  ModelConfig c;
  c.vocab_size = v.size();
  c.dim = dim;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 48;
  c.n_visual_tokens = 2;
  c.mlp_ratio = 2;
  return c;
}

std::vector<int> prefix_of(const Vocabulary& v, int a, int b) {
  return {v.special_id(kSpecials[a]), v.special_id(kSpecials[b])};
}

bool bit_equal(const ad::Tensor& a, const ad::Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// Gives B nonzero values so adapters actually change the output.
void perturb_adapter(LoraAdapter& ad, std::uint64_t seed) {
  ad::Rng rng(seed);
  for (auto& [name, t] : ad.named_parameters()) {
    ad::Tensor tt = t;
    for (double& x : tt.mutable_data()) x += rng.normal() * 0.1;
  }
}

}  // namespace

TEST_CASE("tokenizer round trips in-vocabulary, out-of-vocabulary and empty text") {
  Vocabulary v = test_vocab();
  CHECK(v.encode("").empty());
  CHECK(v.decode(v.encode("")) == "");
  CHECK(v.decode(v.encode("pedestrian crossing")) == "pedestrian crossing");
  const std::string oov = "zebra über\tquiet  road!!\n";
  std::vector<int> ids = v.encode(oov);
  bool used_bytes = false;
  for (int id : ids) used_bytes |= v.is_byte(id);
  CHECK(used_bytes);
  CHECK(v.decode(ids) == oov);
  // in-vocabulary words are single tokens
  CHECK(v.encode(" pedestrian").size() == 1);

  Vocabulary back = Vocabulary::from_json(v.to_json());
  CHECK(back.encode(oov) == ids);
  CHECK(back.special_id("<ped:crossing>") == v.special_id("<ped:crossing>"));
}

TEST_CASE("pretokenize reproduces its input") {
  for (const std::string s : {"a  b", " x,y. ", "Q: what?\nA:", "", "don't stop"}) {
    std::string joined;
    for (const auto& c : pretokenize(s)) joined += c;
    CHECK(joined == s);
  }
}

TEST_CASE("tau is the last prompt token and rejects empty prompts") {
  Vocabulary v = test_vocab();
  auto p = make_prompt(prefix_of(v, 0, 2), v.encode("Q: where?\nA:"));
  CHECK(p.tau() == p.ids.size() - 1);
  CHECK(p.tau() >= p.visual_prefix_len);
  auto empty = make_prompt(prefix_of(v, 0, 2), {});
  CHECK_THROWS_AS(empty.tau(), LengthError);
}

TEST_CASE("zero-init adapters are bit-identical to the base model over 50 prompts") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 11);
  LoraAdapter a(m.config(), LoraConfig{4, 8.0, 0.0}, Stage::perception, 5);
  ad::NoGradGuard ng;
  ad::Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    std::vector<int> ids;
    const std::size_t n = 3 + rng.below(20);
    for (std::size_t j = 0; j < n; ++j) ids.push_back(static_cast<int>(rng.below(v.size())));
    ad::Tensor e = m.embed_ids(ids, 0);
    CHECK(bit_equal(m.forward(e, nullptr).logits, m.forward(e, &a).logits));
  }
}

TEST_CASE("causal mask: later tokens never affect earlier logits") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 3);
  LoraAdapter a(m.config(), LoraConfig{4, 8.0, 0.0}, Stage::planning, 5);
  perturb_adapter(a, 2);
  ad::NoGradGuard ng;
  std::vector<int> ids = v.encode("There is a pedestrian crossing the road.");
  auto base = m.forward(m.embed_ids(ids, 0), &a).logits;
  for (std::size_t j = 1; j < ids.size(); ++j) {
    std::vector<int> alt = ids;
    alt[j] = (alt[j] + 7) % static_cast<int>(v.size());
    auto out = m.forward(m.embed_ids(alt, 0), &a).logits;
    const std::size_t V = v.size();
    CHECK(std::memcmp(base.data().data(), out.data().data(), j * V * sizeof(double)) == 0);
    CHECK(std::memcmp(base.data().data() + j * V, out.data().data() + j * V,
                      V * sizeof(double)) != 0);
  }
}

TEST_CASE("incremental decoding matches the full forward bit for bit") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 8);
  LoraAdapter a(m.config(), LoraConfig{4, 8.0, 0.0}, Stage::prediction, 5);
  perturb_adapter(a, 4);
  ad::NoGradGuard ng;
  std::vector<int> ids = v.encode("I see a red light ahead");
  ad::Tensor full_emb = m.embed_ids(ids, 0);
  auto full = m.forward(full_emb, &a);

  const std::size_t split = 3;
  KvCache cache;
  std::vector<int> head(ids.begin(), ids.begin() + split);
  auto first = m.forward(m.embed_ids(head, 0), &a, {}, &cache);
  CHECK(std::memcmp(first.logits.data().data(), full.logits.data().data(),
                    first.logits.numel() * sizeof(double)) == 0);
  for (std::size_t i = split; i < ids.size(); ++i) {
    std::vector<int> one = {ids[i]};
    auto step = m.forward_step(m.embed_ids(one, i), &a, cache);
    CHECK(std::memcmp(step.logits.data().data(), full.logits.data().data() + i * v.size(),
                      v.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(step.hidden.data().data(), full.hidden.data().data() + i * m.config().dim,
                      m.config().dim * sizeof(double)) == 0);
  }
}

TEST_CASE("hidden row at tau changes when an earlier prompt token changes") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 21);
  ad::NoGradGuard ng;
  auto seq = make_prompt(prefix_of(v, 0, 2), v.encode("Q: The action?\nA:"));
  auto h = m.forward(m.embed(seq), nullptr).hidden;
  for (std::size_t j = 0; j < seq.tau(); ++j) {
    auto alt = seq;
    alt.ids[j] = (alt.ids[j] + 5) % static_cast<int>(v.size());
    auto h2 = m.forward(m.embed(alt), nullptr).hidden;
    CHECK_FALSE(bit_equal(ad::row(h, seq.tau()), ad::row(h2, seq.tau())));
  }
}

TEST_CASE("scenes differing in one attribute differ in exactly one embedding row") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 2);
  ad::NoGradGuard ng;
  auto text = v.encode("Q: go?\nA:");
  auto e1 = m.embed(make_prompt(prefix_of(v, 0, 2), text));
  auto e2 = m.embed(make_prompt(prefix_of(v, 1, 2), text));
  const std::size_t d = m.config().dim;
  std::size_t diff = 0;
  for (std::size_t r = 0; r < e1.rows(); ++r) {
    diff += std::memcmp(e1.data().data() + r * d, e2.data().data() + r * d, d * sizeof(double)) != 0;
  }
  CHECK(diff == 1);
  CHECK_THROWS_AS(m.embed_ids(std::vector<int>(49, 3), 0), LengthError);
}

TEST_CASE("transformer and adapter gradients match finite differences") {
  Vocabulary v = test_vocab();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ModelConfig c = small_config(v, 8);
    c.n_layers = 1;
    Transformer m(c, seed);
    LoraAdapter a(c, LoraConfig{2, 4.0, 0.0}, Stage::prediction, seed + 10);
    perturb_adapter(a, seed);
    std::vector<int> ids = v.encode("slow down.");
    std::vector<int> targets(ids.begin() + 1, ids.end());
    targets.push_back(Vocabulary::kEos);
    std::vector<ad::Tensor> params;
    for (auto& [n, t] : a.named_parameters()) params.push_back(t);
    for (auto& [n, t] : m.named_parameters()) {
      if (n.find("wq") != std::string::npos || n.find("ln1") != std::string::npos ||
          n == "pos_embed") {
        params.push_back(t);
      }
    }
    auto f = [&] {
      return ad::softmax_cross_entropy(m.forward(m.embed_ids(ids, 0), &a).logits, targets);
    };
    auto r = ad::grad_check(f, params);
    INFO("seed " << seed << " param " << r.worst_param << " index " << r.worst_index);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("freeze contract and adapter isolation") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 4);
  m.set_trainable(false);
  AdapterRegistry reg;
  reg.put(LoraAdapter(m.config(), LoraConfig{4, 8.0, 0.05}, Stage::perception, 1));
  reg.put(LoraAdapter(m.config(), LoraConfig{4, 8.0, 0.05}, Stage::prediction, 2));
  reg.freeze(Stage::perception);
  reg.freeze(Stage::perception);
  CHECK(reg.get(Stage::perception).frozen());
  CHECK_THROWS(reg.get(Stage::perception).param_group(0.0));
  CHECK_THROWS_AS(reg.get(Stage::planning), UsageError);

  const std::string frozen = reg.get(Stage::perception).checksum();
  const std::string base = m.checksum();
  const std::string before = reg.get(Stage::prediction).checksum();
  ad::AdamW opt({reg.get(Stage::prediction).param_group(0.01)});
  std::vector<int> ids = v.encode("The ego vehicle should slow down.");
  std::vector<int> targets(ids.begin() + 1, ids.end());
  targets.push_back(Vocabulary::kEos);
  ad::Rng drop(7);
  for (int step = 0; step < 100; ++step) {
    {
      ad::NoGradGuard ng;  // upstream stage forward is read-only
      m.forward(m.embed_ids(ids, 0), &reg.get(Stage::perception));
    }
    ad::Tape tape;
    auto out = m.forward(m.embed_ids(ids, 0), &reg.get(Stage::prediction), {&drop});
    tape.backward(ad::softmax_cross_entropy(out.logits, targets));
    opt.step(1e-2, 1.0);
    opt.zero_grad();
  }
  CHECK(reg.get(Stage::perception).checksum() == frozen);
  CHECK(m.checksum() == base);
  CHECK(reg.get(Stage::prediction).checksum() != before);
}

TEST_CASE("same seed builds bit-identical models and adapters") {
  Vocabulary v = test_vocab();
  Transformer a(small_config(v), 99), b(small_config(v), 99);
  CHECK(a.checksum() == b.checksum());
  LoraAdapter x(a.config(), {}, Stage::planning, 5), y(a.config(), {}, Stage::planning, 5);
  CHECK(x.checksum() == y.checksum());
  LoraAdapter z(a.config(), {}, Stage::planning, 6);
  CHECK(x.checksum() != z.checksum());
}

TEST_CASE("greedy generation: determinism, zero injection, overfit reproduction") {
  Vocabulary v = test_vocab();
  Transformer m(small_config(v, 32), 5);
  m.set_trainable(true);
  auto prompt = make_prompt(prefix_of(v, 0, 2), v.encode("\nQ: go?\nA:"));
  const std::string answer = "The ego vehicle should slow down.";
  std::vector<int> ans = v.encode(" " + answer);
  std::vector<int> ids = prompt.ids;
  ids.insert(ids.end(), ans.begin(), ans.end());
  std::vector<int> targets(ids.size(), -100);
  for (std::size_t i = prompt.ids.size() - 1; i + 1 < ids.size(); ++i) targets[i] = ids[i + 1];
  targets.back() = Vocabulary::kEos;

  ad::AdamW opt({{"all", [&] {
                    std::vector<ad::Tensor> p;
                    for (auto& [n, t] : m.named_parameters()) p.push_back(t);
                    return p;
                  }()}});
  for (int step = 0; step < 150; ++step) {
    ad::Tape tape;
    tape.backward(ad::softmax_cross_entropy(m.forward(m.embed_ids(ids, 0), nullptr).logits, targets));
    opt.step(1e-2, 1.0);
    opt.zero_grad();
  }
  auto g1 = generate_greedy(m, v, prompt, nullptr, 20);
  CHECK(g1.text == answer);
  CHECK(g1.hit_eos);
  auto g2 = generate_greedy(m, v, prompt, nullptr, 20);
  CHECK(g2.tokens == g1.tokens);

  std::vector<Injection> zero = {{prompt.tau(), ad::Tensor::zeros({m.config().dim})}};
  auto g3 = generate_greedy(m, v, prompt, nullptr, 20, zero);
  CHECK(g3.tokens == g1.tokens);
  CHECK(bit_equal(g3.hidden, g1.hidden));

  std::vector<Injection> bad = {{0, ad::Tensor::zeros({m.config().dim})}};
  CHECK_THROWS_AS(generate_greedy(m, v, prompt, nullptr, 20, bad), LengthError);
  CHECK_THROWS(generate_greedy(m, v, prompt, nullptr, 0));
}

TEST_CASE("backbone and adapter checkpoints round trip") {
  namespace fs = std::filesystem;
  Vocabulary v = test_vocab();
  Transformer m(small_config(v), 17);
  LoraAdapter a(m.config(), {}, Stage::prediction, 3);
  perturb_adapter(a, 1);
  const fs::path dir = fs::temp_directory_path() / "stagechain_backbone_test";
  fs::remove_all(dir);
  m.save(dir / "base");
  a.save(dir / "pred");
  CHECK(Transformer::load(dir / "base").checksum() == m.checksum());
  LoraAdapter b = LoraAdapter::load(dir / "pred", m.config());
  CHECK(b.checksum() == a.checksum());
  CHECK(b.stage() == Stage::prediction);
  CHECK(b.seed() == 3);
  CHECK_THROWS_AS(LoraAdapter::load(dir / "base", m.config()), DataError);
  fs::remove_all(dir);
}
