#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stagechain/ctx/projector.hpp"
#include "stagechain/eval/nli.hpp"
#include "stagechain/eval/report.hpp"
#include "stagechain/model/config.hpp"
#include "stagechain/model/lora.hpp"
#include "stagechain/model/tokenizer.hpp"
#include "stagechain/model/transformer.hpp"
#include "stagechain/pipeline/chain.hpp"
#include "stagechain/pipeline/training.hpp"
#include "stagechain/scene/scene.hpp"

namespace stagechain::cli {

namespace fs = std::filesystem;

// Everything that determines an experiment's outputs. Stored resolved in the
// manifest; its hash names the run.
struct ExperimentConfig {
  std::uint64_t dataset_seed = 7;
  std::size_t n_scenes = 1000;
  double train_frac = 0.8;
  model::ModelConfig model{};  // vocab_size is filled from the task vocabulary
  pipeline::PretrainConfig pretrain{};
  std::uint64_t pretrain_seed = 0;
  pipeline::TrainConfig train = default_train();
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> modes = {"flat", "history", "injection", "latent-skip"};
  std::size_t max_new = 48;
  std::size_t threads = 0;
  bool visual_prefix_each_turn = false;
  std::string nli = "heuristic";  // or an http(s) base URL
  bool nli_fallback = false;      // use the heuristic when the URL is unreachable
  std::size_t n_resamples = 10000;
  double level = 0.95;
  std::uint64_t bootstrap_seed = 0;

  static pipeline::TrainConfig default_train();
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);  // DataError / UsageError

ExperimentConfig load_config(const fs::path& path);  // accepts a config or a manifest file
std::string config_hash(const ExperimentConfig& c);

// ISO-8601 UTC time, taken from SOURCE_DATE_EPOCH when set.
std::string timestamp_now();

// Models for one seed and adapter set, owned together.
struct LoadedModels {
  model::Vocabulary vocab;
  std::unique_ptr<model::Transformer> base;
  std::vector<std::unique_ptr<model::LoraAdapter>> adapters;
  std::vector<std::unique_ptr<ctx::GatedProjector>> projectors;
  pipeline::ChainModels chain;
};

// Which adapters run flat, history and injection inference. The sequential
// set pairs the flat Perception adapter with the phase-1 and phase-2 adapters.
enum class AdapterSet { flat, sequential };

struct EvalResult {
  std::vector<eval::ConditionReport> reports;
  std::vector<eval::ConditionReport> per_seed;
  std::vector<eval::SignificanceFlag> flags;
};

// Directory layout under `root`:
//   manifest.json, config.json
//   dataset/{train,val}.jsonl, vocab.json
//   base/                                    pretrained backbone
//   seed-N/adapters/{perc,pred,plan}/        flat baselines
//   seed-N/phase1/, seed-N/phase2-<variant>/ sequential runs
//   seed-N/transcripts/<mode>.jsonl
//   report/
class Experiment {
 public:
  Experiment(fs::path root, ExperimentConfig config);

  const fs::path& root() const { return root_; }
  const ExperimentConfig& config() const { return config_; }

  fs::path dataset_dir() const { return root_ / "dataset"; }
  fs::path vocab_path() const { return dataset_dir() / "vocab.json"; }
  fs::path base_dir() const { return root_ / "base"; }
  fs::path seed_dir(std::uint64_t seed) const;
  fs::path adapter_dir(std::uint64_t seed, Stage stage) const;
  fs::path phase1_dir(std::uint64_t seed) const;
  fs::path phase2_dir(std::uint64_t seed) const;  // variant from use_skip / use_transfer
  fs::path transcripts_path(std::uint64_t seed, const std::string& mode) const;
  fs::path report_dir() const { return root_ / "report"; }

  void gen_data();
  scene::Dataset load_dataset() const;
  model::Vocabulary load_vocab() const;

  void pretrain_base();
  void train_baseline(std::uint64_t seed, Stage stage);
  void train_phase1(std::uint64_t seed);
  void train_phase2(std::uint64_t seed);

  LoadedModels load_models(std::uint64_t seed, pipeline::Mode mode, AdapterSet set) const;

  // Runs one mode over the validation split and writes the transcript file
  // (to `out` when given). hard_zero closes every projector gate.
  std::vector<pipeline::ChainTranscript> infer(std::uint64_t seed, pipeline::Mode mode,
                                               const std::optional<fs::path>& out = std::nullopt,
                                               bool hard_zero = false,
                                               AdapterSet set = AdapterSet::flat,
                                               pipeline::InjectionAudit* audit = nullptr);

  // One transcript file per configured mode.
  std::vector<fs::path> run_matrix(std::uint64_t seed);

  // Scores transcript files and writes the report directory. Conditions are
  // the transcript modes pooled over seeds; per-seed rows go to a separate
  // table.
  EvalResult evaluate(const std::vector<fs::path>& transcript_files, const fs::path& out_dir);

  // Writes gate and injection-ratio CSVs for every telemetry log found.
  void export_telemetry();

  // gen-data through evaluation, skipping nothing.
  void run_all();

  // Adds or replaces a manifest entry; paths are stored relative to root.
  void record_output(const fs::path& file);
  void record_checkpoint(const std::string& name, const fs::path& dir);

 private:
  nlohmann::json read_manifest() const;
  void write_manifest(const nlohmann::json& m) const;
  std::string relative(const fs::path& p) const;
  std::unique_ptr<eval::NliBackend> make_backend() const;

  fs::path root_;
  ExperimentConfig config_;
};

// Mode-tag list parsing for run-matrix.
std::vector<pipeline::Mode> parse_modes(const std::vector<std::string>& tags);

}  // namespace stagechain::cli
