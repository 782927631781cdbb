#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/ctx/projector.hpp"
#include "stagechain/model/generate.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/tokenizer.hpp"
#include "stagechain/model/transformer.hpp"
#include "stagechain/pipeline/transcript.hpp"
#include "stagechain/scene/scene.hpp"

namespace stagechain::pipeline {

enum class Mode { flat, history, injection, latent, latent_skip };

std::string_view mode_tag(Mode m);  // "flat", "history", "injection", "latent", "latent-skip"
Mode parse_mode(std::string_view tag);  // throws UsageError

// Where a stage's context vector is read. prompt_token is hidden[τ] of the
// prompt pass; answer_end re-encodes prompt + answer and reads the last
// answer token.
enum class ExtractionPoint { prompt_token, answer_end };
std::string_view extraction_tag(ExtractionPoint p);
ExtractionPoint parse_extraction(std::string_view tag);

// Everything read during chained inference. Shared read-only across threads.
struct ChainModels {
  const model::Transformer* base = nullptr;
  const model::Vocabulary* vocab = nullptr;
  std::array<const model::LoraAdapter*, 3> adapters{};  // nullptr runs the bare base
  const ctx::GatedProjector* perc_to_pred = nullptr;
  const ctx::GatedProjector* pred_to_plan = nullptr;
  const ctx::GatedProjector* perc_to_plan = nullptr;  // skip path
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json checkpoint_hashes = nlohmann::json::object();
};

// Row-wise comparison of every injected prompt embedding against the plain
// embedding of the same prompt.
struct InjectionAudit {
  std::atomic<std::size_t> checked{0};
  std::atomic<std::size_t> one_row{0};    // exactly one row differs, at τ
  std::atomic<std::size_t> zero_rows{0};  // nothing changed (closed gates)
  std::atomic<std::size_t> violations{0};
};

struct ChainOptions {
  std::size_t max_new = 48;
  ExtractionPoint extraction = ExtractionPoint::prompt_token;
  bool visual_prefix_each_turn = false;  // history mode only
  // A forced answer replaces generation for that stage and is what later
  // stages see.
  std::array<std::optional<std::string>, 3> forced{};
  InjectionAudit* audit = nullptr;
};

ChainTranscript run_chain(const ChainModels& models, const scene::SceneRecord& record, Mode mode,
                          const ChainOptions& options = {});

// Runs every record, in parallel over `threads` workers (0 = hardware
// concurrency). Output order follows input order.
std::vector<ChainTranscript> run_chain_all(const ChainModels& models,
                                           const std::vector<scene::SceneRecord>& records,
                                           Mode mode, const ChainOptions& options = {},
                                           std::size_t threads = 0);

// The gold answers of a record laid out as a transcript (mode "gold").
ChainTranscript gold_transcript(const scene::SceneRecord& record);

// hidden row used as stage context for a stage prompt and its answer.
// `injections` are re-applied for the answer_end re-encoding.
ad::Tensor stage_context(const model::Transformer& base, const model::LoraAdapter* adapter,
                         const model::TokenSequence& prompt, const ad::Tensor& prompt_hidden,
                         const std::vector<int>& answer_ids, ExtractionPoint point,
                         std::span<const model::Injection> injections);

}  // namespace stagechain::pipeline
