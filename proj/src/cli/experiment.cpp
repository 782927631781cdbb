#include "stagechain/cli/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "stagechain/ad/checkpoint.hpp"
#include "stagechain/ctx/telemetry.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/pipeline/prompts.hpp"
#include "stagechain/pipeline/transcript.hpp"
#include "stagechain/version.hpp"

namespace stagechain::cli {

using nlohmann::json;
using pipeline::Mode;

pipeline::TrainConfig ExperimentConfig::default_train() {
  pipeline::TrainConfig c = pipeline::TrainConfig::desk();
  c.use_skip = true;
  c.use_transfer = true;
  return c;
}

void to_json(json& j, const ExperimentConfig& c) {
  json model = c.model;
  model.erase("vocab_size");
  j = json{{"dataset", {{"seed", c.dataset_seed}, {"n_scenes", c.n_scenes}, {"train_frac", c.train_frac}}},
           {"model", model},
           {"pretrain", c.pretrain},
           {"pretrain_seed", c.pretrain_seed},
           {"train", c.train},
           {"seeds", c.seeds},
           {"modes", c.modes},
           {"inference",
            {{"max_new", c.max_new},
             {"threads", c.threads},
             {"visual_prefix_each_turn", c.visual_prefix_each_turn}}},
           {"eval",
            {{"nli", c.nli},
             {"nli_fallback", c.nli_fallback},
             {"n_resamples", c.n_resamples},
             {"level", c.level},
             {"bootstrap_seed", c.bootstrap_seed}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  try {
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      c.dataset_seed = d.value("seed", c.dataset_seed);
      c.n_scenes = d.value("n_scenes", c.n_scenes);
      c.train_frac = d.value("train_frac", c.train_frac);
    }
    if (j.contains("model")) from_json(j.at("model"), c.model);
    c.model.vocab_size = 0;
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<pipeline::PretrainConfig>();
    c.pretrain_seed = j.value("pretrain_seed", c.pretrain_seed);
    if (j.contains("train")) {
      // A named preset starts from that preset; otherwise keys override the
      // experiment defaults.
      const json& t = j.at("train");
      json merged = t.contains("preset") ? json::object() : json(c.train);
      merged.update(t);
      c.train = merged.get<pipeline::TrainConfig>();
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("modes")) c.modes = j.at("modes").get<std::vector<std::string>>();
    if (j.contains("inference")) {
      const json& i = j.at("inference");
      c.max_new = i.value("max_new", c.max_new);
      c.threads = i.value("threads", c.threads);
      c.visual_prefix_each_turn = i.value("visual_prefix_each_turn", c.visual_prefix_each_turn);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      c.nli = e.value("nli", c.nli);
      c.nli_fallback = e.value("nli_fallback", c.nli_fallback);
      c.n_resamples = e.value("n_resamples", c.n_resamples);
      c.level = e.value("level", c.level);
      c.bootstrap_seed = e.value("bootstrap_seed", c.bootstrap_seed);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  parse_modes(c.modes);
  if (c.n_scenes < 10) throw UsageError("config: dataset.n_scenes must be >= 10");
  if (c.seeds.empty()) throw UsageError("config: at least one seed is required");
  if (c.max_new == 0) throw UsageError("config: inference.max_new must be >= 1");
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (j.contains("config") && j.contains("config_hash")) j = j.at("config");
  return j.get<ExperimentConfig>();
}

std::string config_hash(const ExperimentConfig& c) {
  json j = c;
  j["inference"].erase("threads");  // does not affect any output
  return ad::sha256_hex(j.dump());
}

std::string timestamp_now() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde)
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<Mode> parse_modes(const std::vector<std::string>& tags) {
  std::vector<Mode> out;
  for (const std::string& t : tags) out.push_back(pipeline::parse_mode(t));
  return out;
}

namespace {

std::string file_sha256(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ad::sha256_hex(ss.str());
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

void write_loss_csv(const fs::path& p, const std::vector<double>& losses) {
  std::ofstream out = open_out(p);
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
    out << buf;
  }
}

void write_freeze_json(const fs::path& p, const pipeline::TrainLog& log) {
  std::ofstream out = open_out(p);
  bool unchanged = true;
  for (const auto& [name, sum] : log.frozen_before)
    unchanged = unchanged && log.frozen_after.count(name) && log.frozen_after.at(name) == sum;
  out << json{{"before", log.frozen_before}, {"after", log.frozen_after}, {"unchanged", unchanged}}
             .dump(2)
      << "\n";
}

void require_dir(const fs::path& dir, const std::string& what, const std::string& hint) {
  if (!fs::exists(dir / "manifest.json"))
    throw MissingArtifactError("missing " + what + " at " + dir.string() + " (" + hint + ")");
}

std::vector<scene::SceneRecord> read_records(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw MissingArtifactError("missing dataset file " + p.string() + " (run gen-data)");
  return scene::read_records_jsonl(in);
}

}  // namespace

Experiment::Experiment(fs::path root, ExperimentConfig config)
    : root_(std::move(root)), config_(std::move(config)) {
  fs::create_directories(root_);
  json m = read_manifest();
  m["tool"] = kToolName;
  m["tool_version"] = kToolVersion;
  m["config_hash"] = config_hash(config_);
  m["config"] = config_;
  m["dataset_seed"] = config_.dataset_seed;
  m["seeds"] = config_.seeds;
  m["modes"] = config_.modes;
  if (!m.contains("created")) m["created"] = timestamp_now();
  m["updated"] = timestamp_now();
  if (!m.contains("checkpoints")) m["checkpoints"] = json::object();
  if (!m.contains("outputs")) m["outputs"] = json::object();
  write_manifest(m);
  std::ofstream cfg = open_out(root_ / "config.json");
  cfg << json(config_).dump(2) << "\n";
}

json Experiment::read_manifest() const {
  std::ifstream in(root_ / "manifest.json");
  if (!in) return json::object();
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
}

void Experiment::write_manifest(const json& m) const {
  std::ofstream out = open_out(root_ / "manifest.json");
  out << m.dump(2) << "\n";
}

std::string Experiment::relative(const fs::path& p) const {
  return fs::relative(fs::absolute(p), fs::absolute(root_)).generic_string();
}

void Experiment::record_output(const fs::path& file) {
  const std::string rel = relative(file);
  if (rel.rfind("..", 0) == 0) return;  // outside the experiment directory
  json m = read_manifest();
  m["outputs"][rel] = file_sha256(file);
  m["updated"] = timestamp_now();
  write_manifest(m);
}

void Experiment::record_checkpoint(const std::string& name, const fs::path& dir) {
  json m = read_manifest();
  m["checkpoints"][name] = ad::checkpoint_hash(dir);
  m["updated"] = timestamp_now();
  write_manifest(m);
}

fs::path Experiment::seed_dir(std::uint64_t seed) const {
  return root_ / ("seed-" + std::to_string(seed));
}

fs::path Experiment::adapter_dir(std::uint64_t seed, Stage stage) const {
  return seed_dir(seed) / "adapters" / std::string(stage_tag(stage));
}

fs::path Experiment::phase1_dir(std::uint64_t seed) const { return seed_dir(seed) / "phase1"; }

fs::path Experiment::phase2_dir(std::uint64_t seed) const {
  std::string name = "phase2";
  if (config_.train.use_skip) name += "-skip";
  if (config_.train.use_transfer) name += "-transfer";
  return seed_dir(seed) / name;
}

fs::path Experiment::transcripts_path(std::uint64_t seed, const std::string& mode) const {
  return seed_dir(seed) / "transcripts" / (mode + ".jsonl");
}

void Experiment::gen_data() {
  const scene::Dataset ds =
      scene::generate_dataset(config_.dataset_seed, config_.n_scenes, config_.train_frac);
  const std::pair<const char*, const std::vector<scene::SceneRecord>*> splits[] = {
      {"train.jsonl", &ds.train}, {"val.jsonl", &ds.val}};
  for (const auto& [name, records] : splits) {
    {
      std::ofstream out = open_out(dataset_dir() / name);
      scene::write_records_jsonl(out, *records);
    }
    record_output(dataset_dir() / name);
  }
  {
    std::ofstream out = open_out(vocab_path());
    out << pipeline::build_task_vocabulary().to_json().dump() << "\n";
  }
  record_output(vocab_path());

  // Gold answers must be self-consistent under the structural rules.
  std::vector<pipeline::ChainTranscript> gold;
  for (const auto* split : {&ds.train, &ds.val})
    for (const scene::SceneRecord& r : *split) gold.push_back(pipeline::gold_transcript(r));
  eval::HeuristicNli nli;
  eval::ReportOptions opt;
  opt.n_resamples = 200;
  const eval::ConditionReport rep = eval::aggregate_report("gold", "all", gold, nli, opt);
  const double structural = rep.table[1].value_or(0.0);
  const double contra = rep.table[2].value_or(1.0);
  {
    std::ofstream out = open_out(dataset_dir() / "gold_check.json");
    out << json{{"structural_consistency", structural}, {"nli_contradiction", contra},
                {"scenes", gold.size()}}
               .dump(2)
        << "\n";
  }
  record_output(dataset_dir() / "gold_check.json");
  if (structural != 1.0 || contra >= 0.05)
    throw DataError("generated gold answers fail the consistency check");
}

scene::Dataset Experiment::load_dataset() const {
  return {read_records(dataset_dir() / "train.jsonl"), read_records(dataset_dir() / "val.jsonl")};
}

model::Vocabulary Experiment::load_vocab() const {
  std::ifstream in(vocab_path());
  if (!in) throw MissingArtifactError("missing vocabulary " + vocab_path().string() + " (run gen-data)");
  try {
    return model::Vocabulary::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw DataError(vocab_path().string() + ": " + e.what());
  }
}

void Experiment::pretrain_base() {
  const scene::Dataset ds = load_dataset();
  const model::Vocabulary vocab = load_vocab();
  model::ModelConfig mc = config_.model;
  mc.vocab_size = vocab.size();
  pipeline::TrainLog log;
  const model::Transformer base =
      pipeline::pretrain_base(mc, vocab, ds.train, config_.pretrain, config_.pretrain_seed, &log);
  base.save(base_dir(), {{"pretrain_seed", config_.pretrain_seed}});
  write_loss_csv(root_ / "base-loss.csv", log.step_loss);
  record_checkpoint("base", base_dir());
  record_output(root_ / "base-loss.csv");
}

void Experiment::train_baseline(std::uint64_t seed, Stage stage) {
  require_dir(base_dir(), "pretrained backbone", "run pretrain-base");
  const scene::Dataset ds = load_dataset();
  const model::Vocabulary vocab = load_vocab();
  const model::Transformer base = model::Transformer::load(base_dir());
  pipeline::FlatRun run = pipeline::train_flat_adapter(base, vocab, ds.train, stage, config_.train, seed);
  const fs::path dir = adapter_dir(seed, stage);
  run.adapter.save(dir, {{"seed", seed}, {"run", "flat"}});
  const std::string tag(stage_tag(stage));
  write_loss_csv(dir.parent_path() / (tag + "-loss.csv"), run.log.step_loss);
  write_freeze_json(dir.parent_path() / (tag + "-freeze.json"), run.log);
  record_checkpoint(relative(dir), dir);
  record_output(dir.parent_path() / (tag + "-loss.csv"));
  record_output(dir.parent_path() / (tag + "-freeze.json"));
}

void Experiment::train_phase1(std::uint64_t seed) {
  require_dir(base_dir(), "pretrained backbone", "run pretrain-base");
  require_dir(adapter_dir(seed, Stage::perception), "perception adapter",
              "run baseline --stage perc --seed " + std::to_string(seed));
  const scene::Dataset ds = load_dataset();
  const model::Vocabulary vocab = load_vocab();
  const model::Transformer base = model::Transformer::load(base_dir());
  model::LoraAdapter perc =
      model::LoraAdapter::load(adapter_dir(seed, Stage::perception), base.config());
  perc.freeze();
  pipeline::Phase1Run run = pipeline::train_phase1(base, vocab, ds.train, perc, config_.train, seed);
  const fs::path dir = phase1_dir(seed);
  run.pred.save(dir / "adapter-pred", {{"seed", seed}, {"run", "phase1"}});
  run.perc_to_pred.save(dir / "proj-perc-pred", {{"seed", seed}});
  {
    std::ofstream out = open_out(dir / "telemetry.jsonl");
    ctx::write_telemetry_jsonl(out, run.log.telemetry);
  }
  write_loss_csv(dir / "loss.csv", run.log.step_loss);
  write_freeze_json(dir / "freeze.json", run.log);
  record_checkpoint(relative(dir / "adapter-pred"), dir / "adapter-pred");
  record_checkpoint(relative(dir / "proj-perc-pred"), dir / "proj-perc-pred");
  for (const char* f : {"telemetry.jsonl", "loss.csv", "freeze.json"}) record_output(dir / f);
}

void Experiment::train_phase2(std::uint64_t seed) {
  require_dir(base_dir(), "pretrained backbone", "run pretrain-base");
  const std::string hint = "run train --phase 1 --seed " + std::to_string(seed);
  require_dir(adapter_dir(seed, Stage::perception), "perception adapter",
              "run baseline --stage perc --seed " + std::to_string(seed));
  require_dir(phase1_dir(seed) / "adapter-pred", "phase-1 prediction adapter", hint);
  require_dir(phase1_dir(seed) / "proj-perc-pred", "phase-1 projector", hint);
  const scene::Dataset ds = load_dataset();
  const model::Vocabulary vocab = load_vocab();
  const model::Transformer base = model::Transformer::load(base_dir());
  model::LoraAdapter perc =
      model::LoraAdapter::load(adapter_dir(seed, Stage::perception), base.config());
  model::LoraAdapter pred = model::LoraAdapter::load(phase1_dir(seed) / "adapter-pred", base.config());
  ctx::GatedProjector p12 = ctx::GatedProjector::load(phase1_dir(seed) / "proj-perc-pred");
  perc.freeze();
  pred.freeze();
  p12.freeze();
  pipeline::Phase2Run run =
      pipeline::train_phase2(base, vocab, ds.train, perc, pred, p12, config_.train, seed);
  const fs::path dir = phase2_dir(seed);
  run.plan.save(dir / "adapter-plan", {{"seed", seed}, {"run", "phase2"}});
  run.pred_to_plan.save(dir / "proj-pred-plan",
                        {{"seed", seed}, {"transfer", config_.train.use_transfer}});
  record_checkpoint(relative(dir / "adapter-plan"), dir / "adapter-plan");
  record_checkpoint(relative(dir / "proj-pred-plan"), dir / "proj-pred-plan");
  if (run.perc_to_plan) {
    run.perc_to_plan->save(dir / "proj-perc-plan-skip", {{"seed", seed}});
    record_checkpoint(relative(dir / "proj-perc-plan-skip"), dir / "proj-perc-plan-skip");
  }
  {
    std::ofstream out = open_out(dir / "telemetry.jsonl");
    ctx::write_telemetry_jsonl(out, run.log.telemetry);
  }
  write_loss_csv(dir / "loss.csv", run.log.step_loss);
  write_freeze_json(dir / "freeze.json", run.log);
  for (const char* f : {"telemetry.jsonl", "loss.csv", "freeze.json"}) record_output(dir / f);
}

LoadedModels Experiment::load_models(std::uint64_t seed, Mode mode, AdapterSet set) const {
  LoadedModels lm;
  lm.vocab = load_vocab();
  require_dir(base_dir(), "pretrained backbone", "run pretrain-base");
  lm.base = std::make_unique<model::Transformer>(model::Transformer::load(base_dir()));
  const model::ModelConfig& mc = lm.base->config();
  json hashes = {{"base", ad::checkpoint_hash(base_dir())}};

  const bool latent = mode == Mode::latent || mode == Mode::latent_skip;
  const bool sequential = latent || set == AdapterSet::sequential;
  const std::string s = std::to_string(seed);
  std::array<fs::path, 3> dirs = {adapter_dir(seed, Stage::perception),
                                  adapter_dir(seed, Stage::prediction),
                                  adapter_dir(seed, Stage::planning)};
  std::array<std::string, 3> hints = {"run baseline --stage perc --seed " + s,
                                      "run baseline --stage pred --seed " + s,
                                      "run baseline --stage plan --seed " + s};
  if (sequential) {
    dirs[1] = phase1_dir(seed) / "adapter-pred";
    dirs[2] = phase2_dir(seed) / "adapter-plan";
    hints[1] = "run train --phase 1 --seed " + s;
    hints[2] = "run train --phase 2 --seed " + s;
  }
  for (Stage st : kStages) {
    const std::size_t k = index_of(st);
    require_dir(dirs[k], std::string(stage_tag(st)) + " adapter", hints[k]);
    auto a = std::make_unique<model::LoraAdapter>(model::LoraAdapter::load(dirs[k], mc));
    a->freeze();
    hashes["adapter-" + std::string(stage_tag(st))] = ad::checkpoint_hash(dirs[k]);
    lm.chain.adapters[k] = a.get();
    lm.adapters.push_back(std::move(a));
  }
  auto load_projector = [&](const fs::path& dir, const std::string& hint) {
    require_dir(dir, "projector", hint);
    auto p = std::make_unique<ctx::GatedProjector>(ctx::GatedProjector::load(dir));
    p->freeze();
    hashes[dir.filename().string()] = ad::checkpoint_hash(dir);
    lm.projectors.push_back(std::move(p));
    return lm.projectors.back().get();
  };
  if (latent) {
    lm.chain.perc_to_pred = load_projector(phase1_dir(seed) / "proj-perc-pred", hints[1]);
    lm.chain.pred_to_plan = load_projector(phase2_dir(seed) / "proj-pred-plan", hints[2]);
    if (mode == Mode::latent_skip)
      lm.chain.perc_to_plan = load_projector(phase2_dir(seed) / "proj-perc-plan-skip",
                                             "run train --phase 2 --skip --seed " + s);
  }
  lm.chain.base = lm.base.get();
  lm.chain.vocab = &lm.vocab;
  lm.chain.checkpoint_hashes = hashes;
  lm.chain.seeds = {{"seed", seed},
                    {"dataset_seed", config_.dataset_seed},
                    {"pretrain_seed", config_.pretrain_seed},
                    {"config_hash", config_hash(config_)}};
  return lm;
}

std::vector<pipeline::ChainTranscript> Experiment::infer(std::uint64_t seed, Mode mode,
                                                         const std::optional<fs::path>& out,
                                                         bool hard_zero, AdapterSet set,
                                                         pipeline::InjectionAudit* audit) {
  const std::vector<scene::SceneRecord> val = read_records(dataset_dir() / "val.jsonl");
  LoadedModels lm = load_models(seed, mode, set);
  for (auto& p : lm.projectors) p->set_hard_zero(hard_zero);
  pipeline::ChainOptions opt;
  opt.max_new = config_.max_new;
  opt.extraction = config_.train.extraction;
  opt.visual_prefix_each_turn = config_.visual_prefix_each_turn;
  opt.audit = audit;
  std::vector<pipeline::ChainTranscript> ts =
      pipeline::run_chain_all(lm.chain, val, mode, opt, config_.threads);
  std::string tag(pipeline::mode_tag(mode));
  if (hard_zero) tag += "-closed";
  if (set == AdapterSet::sequential && !(mode == Mode::latent || mode == Mode::latent_skip))
    tag += "-seq";
  for (pipeline::ChainTranscript& t : ts) t.mode = tag;
  const fs::path path = out ? *out : transcripts_path(seed, tag);
  {
    std::ofstream f = open_out(path);
    pipeline::write_transcripts_jsonl(f, ts);
  }
  record_output(path);
  return ts;
}

std::vector<fs::path> Experiment::run_matrix(std::uint64_t seed) {
  std::vector<fs::path> files;
  for (Mode m : parse_modes(config_.modes)) {
    infer(seed, m);
    files.push_back(transcripts_path(seed, std::string(pipeline::mode_tag(m))));
  }
  return files;
}

std::unique_ptr<eval::NliBackend> Experiment::make_backend() const {
  if (config_.nli == "heuristic") return std::make_unique<eval::HeuristicNli>();
  if (config_.nli.rfind("http://", 0) != 0)
    throw UsageError("NLI backend must be 'heuristic' or an http:// URL, got '" + config_.nli + "'");
  auto http = std::make_unique<eval::HttpNli>(config_.nli);
  if (http->score({{"The light is red.", "The light is red."}})[0]) return http;
  if (config_.nli_fallback) {
    std::cerr << "warning: NLI backend " << config_.nli
              << " unreachable; falling back to the heuristic backend\n";
    return std::make_unique<eval::HeuristicNli>();
  }
  throw MissingArtifactError("NLI backend " + config_.nli +
                             " unreachable (pass --nli-fallback to use the heuristic backend)");
}

EvalResult Experiment::evaluate(const std::vector<fs::path>& files, const fs::path& out_dir) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<pipeline::ChainTranscript>> pooled;
  std::vector<std::string> seed_order;
  std::map<std::string, std::vector<pipeline::ChainTranscript>> per_seed;
  for (const fs::path& f : files) {
    std::ifstream in(f);
    if (!in) throw MissingArtifactError("missing transcript file " + f.string());
    for (pipeline::ChainTranscript& t : pipeline::read_transcripts_jsonl(in)) {
      if (!pooled.count(t.mode)) order.push_back(t.mode);
      std::string key = t.mode;
      if (t.seeds.contains("seed")) key += "@seed-" + t.seeds.at("seed").dump();
      if (!per_seed.count(key)) seed_order.push_back(key);
      per_seed[key].push_back(t);
      pooled[t.mode].push_back(std::move(t));
    }
  }
  if (order.empty()) throw DataError("no transcripts to evaluate");

  std::map<std::string, std::array<std::string, 3>> gold;
  if (fs::exists(dataset_dir() / "val.jsonl")) {
    for (const scene::SceneRecord& r : read_records(dataset_dir() / "val.jsonl"))
      gold[r.scene.scene_id] = {r.qa.stages[0].gold_answer, r.qa.stages[1].gold_answer,
                                r.qa.stages[2].gold_answer};
  }

  std::unique_ptr<eval::NliBackend> backend = make_backend();
  eval::ReportOptions opt{config_.n_resamples, config_.level, config_.bootstrap_seed};
  auto reports_for = [&](const std::vector<std::string>& keys,
                         std::map<std::string, std::vector<pipeline::ChainTranscript>>& groups) {
    std::vector<eval::ConditionReport> out;
    for (const char* slice : {"all", "adversarial"}) {
      for (const std::string& key : keys) {
        std::vector<pipeline::ChainTranscript> subset;
        for (const pipeline::ChainTranscript& t : groups[key])
          if (std::string(slice) == "all" || t.adversarial) subset.push_back(t);
        bool any_valid = false;
        for (const auto& t : subset) any_valid = any_valid || t.valid;
        if (!any_valid && std::string(slice) == "adversarial") continue;
        out.push_back(eval::aggregate_report(key, slice, subset, *backend, opt, gold));
      }
    }
    return out;
  };

  EvalResult r;
  r.reports = reports_for(order, pooled);
  r.per_seed = reports_for(seed_order, per_seed);
  r.flags = eval::pairwise_significance(r.reports);

  fs::create_directories(out_dir);
  auto write = [&](const char* name, auto&& fn) {
    {
      std::ofstream out = open_out(out_dir / name);
      fn(out);
    }
    record_output(out_dir / name);
  };
  write("table.csv", [&](std::ostream& o) { eval::write_table_csv(o, r.reports); });
  write("transitions.csv", [&](std::ostream& o) { eval::write_transitions_csv(o, r.reports); });
  write("ci.csv", [&](std::ostream& o) { eval::write_ci_csv(o, r.reports); });
  write("significance.csv", [&](std::ostream& o) { eval::write_significance_csv(o, r.flags); });
  write("lengths.csv", [&](std::ostream& o) { eval::write_lengths_csv(o, r.reports); });
  write("quality.csv", [&](std::ostream& o) { eval::write_quality_csv(o, r.reports); });
  write("table-per-seed.csv", [&](std::ostream& o) { eval::write_table_csv(o, r.per_seed); });
  write("ci-per-seed.csv", [&](std::ostream& o) { eval::write_ci_csv(o, r.per_seed); });
  write("report.md", [&](std::ostream& o) {
    o << "<!-- " << kToolName << " " << kToolVersion << ", config " << config_hash(config_)
      << ", NLI backend " << backend->name() << " -->\n\n";
    eval::write_markdown(o, r.reports, r.flags);
  });
  return r;
}

void Experiment::export_telemetry() {
  for (std::uint64_t seed : config_.seeds) {
    for (const fs::path& dir : {phase1_dir(seed), phase2_dir(seed)}) {
      const fs::path log = dir / "telemetry.jsonl";
      if (!fs::exists(log)) continue;
      std::ifstream in(log);
      const ctx::TelemetryParse parsed = ctx::read_telemetry_jsonl(in);
      const fs::path csv = report_dir() / ("telemetry-seed-" + std::to_string(seed) + "-" +
                                           dir.filename().string() + ".csv");
      {
        std::ofstream out = open_out(csv);
        ctx::write_telemetry_csv(out, parsed.records);
      }
      record_output(csv);
    }
  }
}

void Experiment::run_all() {
  gen_data();
  pretrain_base();
  std::vector<fs::path> files;
  for (std::uint64_t seed : config_.seeds) {
    for (Stage s : kStages) train_baseline(seed, s);
    train_phase1(seed);
    train_phase2(seed);
    for (const fs::path& f : run_matrix(seed)) files.push_back(f);
  }
  evaluate(files, report_dir());
  export_telemetry();
}

}  // namespace stagechain::cli
