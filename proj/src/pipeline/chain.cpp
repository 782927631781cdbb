#include "stagechain/pipeline/chain.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <exception>
#include <thread>

#include "stagechain/ad/ops.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/pipeline/prompts.hpp"

namespace stagechain::pipeline {

using ad::Tensor;

std::string_view mode_tag(Mode m) {
  switch (m) {
    case Mode::flat: return "flat";
    case Mode::history: return "history";
    case Mode::injection: return "injection";
    case Mode::latent: return "latent";
    case Mode::latent_skip: return "latent-skip";
  }
  return "?";
}

Mode parse_mode(std::string_view tag) {
  for (Mode m : {Mode::flat, Mode::history, Mode::injection, Mode::latent, Mode::latent_skip})
    if (mode_tag(m) == tag) return m;
  throw UsageError("unknown mode '" + std::string(tag) +
                   "' (expected flat, history, injection, latent or latent-skip)");
}

std::string_view extraction_tag(ExtractionPoint p) {
  return p == ExtractionPoint::prompt_token ? "prompt-token" : "answer-end";
}

ExtractionPoint parse_extraction(std::string_view tag) {
  if (tag == "prompt-token") return ExtractionPoint::prompt_token;
  if (tag == "answer-end") return ExtractionPoint::answer_end;
  throw UsageError("unknown extraction point '" + std::string(tag) + "'");
}

Tensor stage_context(const model::Transformer& base, const model::LoraAdapter* adapter,
                     const model::TokenSequence& prompt, const Tensor& prompt_hidden,
                     const std::vector<int>& answer_ids, ExtractionPoint point,
                     std::span<const model::Injection> injections) {
  if (point == ExtractionPoint::prompt_token || answer_ids.empty())
    return ctx::extract_context(prompt_hidden, prompt);
  ad::NoGradGuard no_grad;
  std::vector<int> text(prompt.ids.begin() + static_cast<long>(prompt.visual_prefix_len),
                        prompt.ids.begin() + static_cast<long>(prompt.tau() + 1));
  text.insert(text.end(), answer_ids.begin(), answer_ids.end());
  const std::vector<int> prefix(prompt.ids.begin(),
                                prompt.ids.begin() + static_cast<long>(prompt.visual_prefix_len));
  model::TokenSequence full = model::make_prompt(prefix, text);
  if (full.length() > base.config().max_seq_len) full.ids.resize(base.config().max_seq_len);
  full.prompt_len = full.ids.size() - full.visual_prefix_len;
  Tensor emb = base.embed(full);
  for (const model::Injection& inj : injections) emb = ad::add_to_row(emb, inj.position, inj.vector);
  return ctx::extract_context(base.forward(emb, adapter).hidden, full);
}

namespace {

struct PromptBuild {
  model::TokenSequence seq;
  std::string text;  // as displayed, with the visual prefix marker
  bool truncated = false;
};

PromptBuild build_history(const ChainModels& m, const std::vector<int>& prefix,
                          std::vector<Turn> turns, const std::string& question,
                          const ChainOptions& opt) {
  PromptBuild b;
  const std::size_t limit = m.base->config().max_seq_len;
  while (true) {
    std::vector<int> ids;
    std::string text(kSceneMarker);
    for (std::size_t i = 0; i < turns.size(); ++i) {
      if (opt.visual_prefix_each_turn && i > 0) {
        ids.insert(ids.end(), prefix.begin(), prefix.end());
        text += kSceneMarker;
      }
      const std::string part = history_prompt({turns[i]}, "");
      const std::string turn_text = part.substr(0, part.size() - flat_prompt("").size());
      const std::vector<int> enc = m.vocab->encode(turn_text);
      ids.insert(ids.end(), enc.begin(), enc.end());
      text += turn_text;
    }
    if (opt.visual_prefix_each_turn && !turns.empty()) {
      ids.insert(ids.end(), prefix.begin(), prefix.end());
      text += kSceneMarker;
    }
    const std::vector<int> enc = m.vocab->encode(flat_prompt(question));
    ids.insert(ids.end(), enc.begin(), enc.end());
    text += flat_prompt(question);
    if (prefix.size() + ids.size() + opt.max_new <= limit || turns.empty()) {
      b.seq = model::make_prompt(prefix, ids);
      b.text = std::move(text);
      return b;
    }
    turns.erase(turns.begin());
    b.truncated = true;
  }
}

// Embedding plus prompt pass without decoding, for forced stages.
model::Generation prompt_pass(const ChainModels& m, const model::LoraAdapter* adapter,
                              const model::TokenSequence& seq,
                              std::span<const model::Injection> injections) {
  ad::NoGradGuard no_grad;
  model::Generation g;
  Tensor emb = m.base->embed(seq);
  for (const model::Injection& inj : injections) emb = ad::add_to_row(emb, inj.position, inj.vector);
  g.prompt_embedding = emb;
  g.prompt_hidden = m.base->forward(emb, adapter).hidden;
  return g;
}

void audit_injection(const ChainModels& m, const model::TokenSequence& seq, const Tensor& injected,
                     InjectionAudit* audit) {
  const Tensor plain = m.base->embed(seq);
  const std::size_t cols = plain.cols();
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < plain.rows(); ++r) {
    if (!std::equal(plain.data().begin() + static_cast<long>(r * cols),
                    plain.data().begin() + static_cast<long>((r + 1) * cols),
                    injected.data().begin() + static_cast<long>(r * cols)))
      rows.push_back(r);
  }
  const bool ok = rows.empty() || (rows.size() == 1 && rows[0] == seq.tau());
  if (audit) {
    audit->checked++;
    if (!ok) audit->violations++;
    else if (rows.empty()) audit->zero_rows++;
    else audit->one_row++;
  }
  if (!ok) {
    throw Error("injection touched " + std::to_string(rows.size()) +
                " embedding rows; expected only row tau=" + std::to_string(seq.tau()));
  }
}

double norm2(const Tensor& t) {
  double s = 0.0;
  for (double x : t.data()) s += x * x;
  return std::sqrt(s);
}

}  // namespace

ChainTranscript run_chain(const ChainModels& m, const scene::SceneRecord& record, Mode mode,
                          const ChainOptions& opt) {
  if (!m.base || !m.vocab) throw UsageError("run_chain: model and vocabulary required");
  const bool latent = mode == Mode::latent || mode == Mode::latent_skip;
  if (latent) {
    if (!m.perc_to_pred || !m.pred_to_plan)
      throw MissingArtifactError("latent mode requires the perc->pred and pred->plan projectors");
    if (mode == Mode::latent_skip && !m.perc_to_plan)
      throw MissingArtifactError("latent-skip mode requires the perc->plan skip projector");
    for (const ctx::GatedProjector* p : {m.perc_to_pred, m.pred_to_plan, m.perc_to_plan})
      if (p && p->dim() != m.base->config().dim)
        throw DimensionError("projector dimension " + std::to_string(p->dim()) +
                             " does not match backbone dimension " +
                             std::to_string(m.base->config().dim));
  }

  ChainTranscript t;
  t.scene_id = record.scene.scene_id;
  t.mode = std::string(mode_tag(mode));
  t.adversarial = record.scene.adversarial;
  t.seeds = m.seeds;
  t.checkpoint_hashes = m.checkpoint_hashes;

  const std::vector<int> prefix = visual_prefix_ids(*m.vocab, record.scene);
  std::array<std::string, 3> answers;
  std::array<Tensor, 3> contexts;
  std::vector<Turn> turns;

  for (Stage stage : kStages) {
    const std::size_t k = index_of(stage);
    StageRecord& rec = t.at(stage);
    rec.stage = stage;
    rec.question = record.qa.at(stage).question;

    PromptBuild pb;
    switch (mode) {
      case Mode::history:
        pb = build_history(m, prefix, turns, rec.question, opt);
        t.truncated = t.truncated || pb.truncated;
        break;
      case Mode::injection: {
        const std::string text = injection_prompt(stage, rec.question, answers);
        pb.seq = prompt_sequence(*m.vocab, record.scene, text);
        pb.text = std::string(kSceneMarker) + text;
        break;
      }
      default: {
        const std::string text = flat_prompt(rec.question);
        pb.seq = prompt_sequence(*m.vocab, record.scene, text);
        pb.text = std::string(kSceneMarker) + text;
      }
    }
    rec.prompt = pb.text;
    rec.tau = pb.seq.tau();

    std::vector<model::Injection> injections;
    if (latent && stage == Stage::prediction) {
      injections.push_back({rec.tau, m.perc_to_pred->project(contexts[0])});
    } else if (latent && stage == Stage::planning) {
      injections.push_back({rec.tau, m.pred_to_plan->project(contexts[1])});
      if (mode == Mode::latent_skip)
        injections.push_back({rec.tau, m.perc_to_plan->project(contexts[0])});
    }
    for (const model::Injection& inj : injections) rec.injected_norms.push_back(norm2(inj.vector));

    const model::LoraAdapter* adapter = m.adapters[k];
    model::Generation gen;
    std::vector<int> answer_ids;
    try {
      if (opt.forced[k]) {
        gen = prompt_pass(m, adapter, pb.seq, injections);
        answers[k] = *opt.forced[k];
        answer_ids = m.vocab->encode(answer_continuation(answers[k]));
      } else {
        gen = model::generate_greedy(*m.base, *m.vocab, pb.seq, adapter, opt.max_new, injections);
        answers[k] = gen.text;
        answer_ids = gen.tokens;
      }
    } catch (const Error&) {
      t.valid = false;
      answers[k].clear();
    }
    rec.answer = answers[k];
    rec.answer_tokens = answer_ids;
    if (answers[k].empty()) t.valid = false;
    if (!injections.empty() && gen.prompt_embedding.defined()) {
      audit_injection(m, pb.seq, gen.prompt_embedding, opt.audit);
    }
    if (latent && gen.prompt_hidden.defined() && stage != Stage::planning)
      contexts[k] = stage_context(*m.base, adapter, pb.seq, gen.prompt_hidden, answer_ids,
                                  opt.extraction, injections);
    if (latent && !gen.prompt_hidden.defined() && stage != Stage::planning)
      contexts[k] = Tensor::zeros({m.base->config().dim});
    turns.push_back({rec.question, answers[k]});
  }
  return t;
}

ChainTranscript gold_transcript(const scene::SceneRecord& record) {
  ChainTranscript t;
  t.scene_id = record.scene.scene_id;
  t.mode = "gold";
  t.adversarial = record.scene.adversarial;
  for (Stage s : kStages) {
    StageRecord& rec = t.at(s);
    rec.stage = s;
    rec.question = record.qa.at(s).question;
    rec.answer = record.qa.at(s).gold_answer;
  }
  return t;
}

std::vector<ChainTranscript> run_chain_all(const ChainModels& models,
                                           const std::vector<scene::SceneRecord>& records,
                                           Mode mode, const ChainOptions& options,
                                           std::size_t threads) {
  std::vector<ChainTranscript> out(records.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(1, records.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next++;
      if (i >= records.size()) return;
      try {
        out[i] = run_chain(models, records[i], mode, options);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = records.size();
        return;
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace stagechain::pipeline
