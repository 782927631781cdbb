#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/ad/optim.hpp"
#include "stagechain/ctx/projector.hpp"
#include "stagechain/ctx/telemetry.hpp"
#include "stagechain/model/config.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/tokenizer.hpp"
#include "stagechain/model/transformer.hpp"
#include "stagechain/pipeline/chain.hpp"
#include "stagechain/scene/scene.hpp"

namespace stagechain::pipeline {

// Adapter / projector training settings. The "reference" preset carries the
// hyperparameters meant for a large pretrained backbone; "desk" raises the
// learning rate so the small backbone learns within a few epochs.
struct TrainConfig {
  std::string preset = "desk";
  std::size_t epochs = 3;
  std::size_t batch_size = 4;
  double base_lr = 2e-3;
  double weight_decay = 0.05;
  double warmup_frac = 0.10;
  model::LoraConfig lora{};
  double projector_lr_mult = ctx::GatedProjector::kWeightLrMultiplier;
  double gate_lr_mult = ctx::GatedProjector::kGateLrMultiplier;
  bool use_skip = false;
  bool use_transfer = false;
  bool hard_zero = false;  // closed-gate control runs
  ExtractionPoint extraction = ExtractionPoint::prompt_token;

  static TrainConfig desk();
  static TrainConfig reference();
  static TrainConfig preset_named(const std::string& name);  // throws UsageError
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);  // missing keys keep preset values

// Full-weight language-model pretraining of the backbone on the question and
// answer text of the training split, without the visual prefix.
struct PretrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

// Seeds for one stage's adapter run. Flat and sequential runs for the same
// stage draw the same seeds, so their adapters start identical and see the
// same example order and dropout masks.
struct StageSeeds {
  std::uint64_t adapter = 0;
  std::uint64_t shuffle = 0;
  std::uint64_t dropout = 0;
};
StageSeeds stage_seeds(std::uint64_t seed, Stage stage);
std::uint64_t projector_seed(std::uint64_t seed, ctx::Transition t);

struct TrainLog {
  std::vector<double> step_loss;  // mean loss of each optimizer step
  std::vector<ctx::TelemetryRecord> telemetry;
  std::map<std::string, std::string> frozen_before;  // name -> checksum
  std::map<std::string, std::string> frozen_after;
  double seconds = 0.0;
};

// Throws Error if any frozen checksum changed during the run.
void check_freeze_contract(const TrainLog& log);

// Minibatch loop shared by every run: per epoch the example order is
// shuffled, each example's loss / batch is backpropagated separately, then one
// AdamW step with cosine-warmup scheduling. The loss callback receives the
// example index, the dropout generator and the telemetry recorder.
using ExampleLoss =
    std::function<ad::Tensor(std::size_t, ad::Rng&, ctx::TelemetryRecorder&)>;
void run_training_loop(std::size_t n_examples, std::vector<ad::ParamGroup> groups,
                       std::size_t epochs, std::size_t batch_size, double base_lr,
                       double warmup_frac, std::uint64_t shuffle_seed,
                       std::uint64_t dropout_seed, const ExampleLoss& loss,
                       const std::vector<const ctx::GatedProjector*>& telemetry_projectors,
                       TrainLog& log);

// Every token is a target, so the backbone learns the turn format and answer
// language but not the scene attributes, which only the adapters see.
model::Transformer pretrain_base(const model::ModelConfig& config, const model::Vocabulary& vocab,
                                 const std::vector<scene::SceneRecord>& train,
                                 const PretrainConfig& pc, std::uint64_t seed, TrainLog* log = nullptr);

struct FlatRun {
  model::LoraAdapter adapter;
  TrainLog log;
};
FlatRun train_flat_adapter(const model::Transformer& base, const model::Vocabulary& vocab,
                           const std::vector<scene::SceneRecord>& train, Stage stage,
                           const TrainConfig& config, std::uint64_t seed);

// Phase 1: trains the Prediction adapter and the perc->pred projector with the
// Perception adapter frozen.
struct Phase1Run {
  model::LoraAdapter pred;
  ctx::GatedProjector perc_to_pred;
  TrainLog log;
};
Phase1Run train_phase1(const model::Transformer& base, const model::Vocabulary& vocab,
                       const std::vector<scene::SceneRecord>& train,
                       const model::LoraAdapter& perc, const TrainConfig& config,
                       std::uint64_t seed);

// Phase 2: trains the Planning adapter, the pred->plan projector and, with
// use_skip, the perc->plan skip projector. Everything from phase 1 is frozen.
// use_transfer starts pred->plan from the phase-1 projector.
struct Phase2Run {
  model::LoraAdapter plan;
  ctx::GatedProjector pred_to_plan;
  std::optional<ctx::GatedProjector> perc_to_plan;
  TrainLog log;
};
Phase2Run train_phase2(const model::Transformer& base, const model::Vocabulary& vocab,
                       const std::vector<scene::SceneRecord>& train,
                       const model::LoraAdapter& perc, const model::LoraAdapter& pred,
                       const ctx::GatedProjector& perc_to_pred, const TrainConfig& config,
                       std::uint64_t seed);

}  // namespace stagechain::pipeline
