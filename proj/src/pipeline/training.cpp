#include "stagechain/pipeline/training.hpp"

#include <chrono>
#include <numeric>

#include "stagechain/ad/ops.hpp"
#include "stagechain/ad/rng.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/pipeline/prompts.hpp"

namespace stagechain::pipeline {

using ad::Tensor;
using nlohmann::json;

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::reference() {
  TrainConfig c;
  c.preset = "reference";
  c.base_lr = 1.5e-5;
  return c;
}

TrainConfig TrainConfig::preset_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "reference") return reference();
  throw UsageError("unknown training preset '" + name + "' (expected desk or reference)");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"preset", c.preset},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"weight_decay", c.weight_decay},
           {"warmup_frac", c.warmup_frac},
           {"lora", c.lora},
           {"projector_lr_mult", c.projector_lr_mult},
           {"gate_lr_mult", c.gate_lr_mult},
           {"use_skip", c.use_skip},
           {"use_transfer", c.use_transfer},
           {"hard_zero", c.hard_zero},
           {"extraction", std::string(extraction_tag(c.extraction))}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig::preset_named(j.value("preset", std::string("desk")));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  if (j.contains("lora")) c.lora = j.at("lora").get<model::LoraConfig>();
  c.projector_lr_mult = j.value("projector_lr_mult", c.projector_lr_mult);
  c.gate_lr_mult = j.value("gate_lr_mult", c.gate_lr_mult);
  c.use_skip = j.value("use_skip", c.use_skip);
  c.use_transfer = j.value("use_transfer", c.use_transfer);
  c.hard_zero = j.value("hard_zero", c.hard_zero);
  if (j.contains("extraction")) c.extraction = parse_extraction(j.at("extraction").get<std::string>());
  if (c.epochs == 0 || c.batch_size == 0) throw UsageError("epochs and batch_size must be >= 1");
}

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"warmup_frac", c.warmup_frac}};
}

void from_json(const json& j, PretrainConfig& c) {
  c = PretrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  if (c.batch_size == 0) throw UsageError("pretrain batch_size must be >= 1");
}

StageSeeds stage_seeds(std::uint64_t seed, Stage stage) {
  const std::uint64_t s = static_cast<std::uint64_t>(index_of(stage));
  return {ad::derive_seed(seed, 100 + s), ad::derive_seed(seed, 200 + s),
          ad::derive_seed(seed, 300 + s)};
}

std::uint64_t projector_seed(std::uint64_t seed, ctx::Transition t) {
  return ad::derive_seed(seed, 400 + static_cast<std::uint64_t>(t));
}

void check_freeze_contract(const TrainLog& log) {
  for (const auto& [name, before] : log.frozen_before) {
    auto it = log.frozen_after.find(name);
    if (it == log.frozen_after.end() || it->second != before)
      throw Error("freeze contract violated: " + name + " changed during training");
  }
}

void run_training_loop(std::size_t n, std::vector<ad::ParamGroup> groups, std::size_t epochs,
                       std::size_t batch_size, double base_lr, double warmup_frac,
                       std::uint64_t shuffle_seed, std::uint64_t dropout_seed,
                       const ExampleLoss& loss,
                       const std::vector<const ctx::GatedProjector*>& telemetry_projectors,
                       TrainLog& log) {
  if (n == 0) throw DataError("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  ad::AdamW opt(std::move(groups));
  ad::Rng shuffle_rng(shuffle_seed);
  ad::Rng dropout_rng(dropout_seed);
  ctx::TelemetryRecorder recorder;
  const std::size_t per_epoch = (n + batch_size - 1) / batch_size;
  const std::size_t total = per_epoch * epochs;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t first = b * batch_size;
      const std::size_t last = std::min(n, first + batch_size);
      const double inv = 1.0 / static_cast<double>(last - first);
      double batch_loss = 0.0;
      for (std::size_t i = first; i < last; ++i) {
        ad::Tape tape;
        Tensor l = loss(order[i], dropout_rng, recorder);
        ad::check_finite(l.data(), "training loss");
        batch_loss += l.item() * inv;
        tape.backward(ad::scale(l, inv));
      }
      opt.step(base_lr, ad::cosine_warmup_scale(step, total, warmup_frac));
      opt.zero_grad();
      log.step_loss.push_back(batch_loss);
      if (!telemetry_projectors.empty()) recorder.close_step(step, telemetry_projectors);
      ++step;
    }
  }
  log.telemetry = recorder.records();
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

namespace {

std::vector<ad::ParamGroup> projector_groups(const ctx::GatedProjector& p, const TrainConfig& c) {
  std::vector<ad::ParamGroup> groups = p.param_groups(c.weight_decay);
  groups[0].lr_multiplier = c.projector_lr_mult;
  groups[1].lr_multiplier = c.gate_lr_mult;
  return groups;
}

void require_frozen(const model::LoraAdapter& a) {
  if (!a.frozen())
    throw UsageError("upstream " + std::string(stage_tag(a.stage())) + " adapter must be frozen");
}

void require_frozen(const ctx::GatedProjector& p) {
  if (!p.frozen())
    throw UsageError("upstream projector " + std::string(ctx::transition_tag(p.transition())) +
                     " must be frozen");
}

std::vector<TrainingExample> stage_examples(const model::Vocabulary& vocab,
                                            const std::vector<scene::SceneRecord>& train,
                                            Stage stage) {
  std::vector<TrainingExample> out;
  out.reserve(train.size());
  for (const scene::SceneRecord& r : train) {
    const scene::QAEntry& qa = r.qa.at(stage);
    out.push_back(training_example(vocab, r.scene, flat_prompt(qa.question), qa.gold_answer));
  }
  return out;
}

// Context vector of an upstream stage for a training scene, read from its
// flat prompt (and gold answer when extracting at the answer end).
Tensor upstream_context(const model::Transformer& base, const model::Vocabulary& vocab,
                        const scene::SceneRecord& r, Stage stage, const model::LoraAdapter& adapter,
                        std::span<const model::Injection> injections, ExtractionPoint point) {
  ad::NoGradGuard no_grad;
  const scene::QAEntry& qa = r.qa.at(stage);
  model::TokenSequence seq = prompt_sequence(vocab, r.scene, flat_prompt(qa.question));
  Tensor emb = base.embed(seq);
  for (const model::Injection& inj : injections) emb = ad::add_to_row(emb, inj.position, inj.vector);
  const Tensor hidden = base.forward(emb, &adapter).hidden;
  return stage_context(base, &adapter, seq, hidden, vocab.encode(answer_continuation(qa.gold_answer)),
                       point, injections);
}

Tensor example_loss(const model::Transformer& base, const model::LoraAdapter& adapter,
                    const TrainingExample& ex, const std::vector<Tensor>& injected,
                    const std::vector<ctx::Transition>& transitions, ad::Rng& rng,
                    ctx::TelemetryRecorder& recorder) {
  Tensor emb = base.embed(ex.seq);
  const Tensor host = emb;
  for (std::size_t i = 0; i < injected.size(); ++i) {
    recorder.observe(transitions[i], ctx::injection_ratio(injected[i], host, ex.seq));
    emb = ctx::inject(emb, ex.seq, injected[i]);
  }
  model::ForwardOptions fo;
  fo.dropout_rng = &rng;
  return ad::softmax_cross_entropy(base.forward(emb, &adapter, fo).logits, ex.targets);
}

void record_checksums(std::map<std::string, std::string>& into, const model::Transformer& base,
                      const std::vector<const model::LoraAdapter*>& adapters,
                      const std::vector<const ctx::GatedProjector*>& projectors) {
  into["base"] = base.checksum();
  for (const model::LoraAdapter* a : adapters)
    into["adapter-" + std::string(stage_tag(a->stage()))] = a->checksum();
  for (const ctx::GatedProjector* p : projectors)
    into["projector-" + std::string(ctx::transition_tag(p->transition()))] = p->checksum();
}

}  // namespace

model::Transformer pretrain_base(const model::ModelConfig& config, const model::Vocabulary& vocab,
                                 const std::vector<scene::SceneRecord>& train,
                                 const PretrainConfig& pc, std::uint64_t seed, TrainLog* log) {
  model::Transformer base(config, ad::derive_seed(seed, 1));
  base.set_trainable(true);
  std::vector<TrainingExample> examples;
  for (const scene::SceneRecord& r : train) {
    for (Stage s : kStages) {
      const scene::QAEntry& qa = r.qa.at(s);
      std::vector<int> ids = vocab.encode(flat_prompt(qa.question) + answer_continuation(qa.gold_answer));
      ids.push_back(model::Vocabulary::kEos);
      TrainingExample ex;
      ex.seq = model::make_prompt({}, ids);
      ex.targets.assign(ids.size(), -100);
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) ex.targets[i] = ids[i + 1];
      examples.push_back(std::move(ex));
    }
  }
  std::vector<Tensor> params;
  for (const auto& [name, t] : base.named_parameters()) params.push_back(t);
  std::vector<ad::ParamGroup> groups = {{"base", params, 1.0, pc.weight_decay}};
  TrainLog local;
  TrainLog& out = log ? *log : local;
  run_training_loop(
      examples.size(), std::move(groups), pc.epochs, pc.batch_size, pc.lr, pc.warmup_frac,
      ad::derive_seed(seed, 2), ad::derive_seed(seed, 3),
      [&](std::size_t i, ad::Rng&, ctx::TelemetryRecorder&) {
        return ad::softmax_cross_entropy(base.forward(base.embed(examples[i].seq), nullptr).logits,
                                         examples[i].targets);
      },
      {}, out);
  base.set_trainable(false);
  return base;
}

FlatRun train_flat_adapter(const model::Transformer& base, const model::Vocabulary& vocab,
                           const std::vector<scene::SceneRecord>& train, Stage stage,
                           const TrainConfig& c, std::uint64_t seed) {
  const StageSeeds seeds = stage_seeds(seed, stage);
  FlatRun run{model::LoraAdapter(base.config(), c.lora, stage, seeds.adapter), {}};
  const std::vector<TrainingExample> examples = stage_examples(vocab, train, stage);
  record_checksums(run.log.frozen_before, base, {}, {});
  run_training_loop(
      examples.size(), {run.adapter.param_group(c.weight_decay)}, c.epochs, c.batch_size,
      c.base_lr, c.warmup_frac, seeds.shuffle, seeds.dropout,
      [&](std::size_t i, ad::Rng& rng, ctx::TelemetryRecorder& rec) {
        return example_loss(base, run.adapter, examples[i], {}, {}, rng, rec);
      },
      {}, run.log);
  record_checksums(run.log.frozen_after, base, {}, {});
  check_freeze_contract(run.log);
  return run;
}

Phase1Run train_phase1(const model::Transformer& base, const model::Vocabulary& vocab,
                       const std::vector<scene::SceneRecord>& train,
                       const model::LoraAdapter& perc, const TrainConfig& c, std::uint64_t seed) {
  require_frozen(perc);
  if (perc.stage() != Stage::perception) throw UsageError("phase 1 needs the perception adapter");
  const StageSeeds seeds = stage_seeds(seed, Stage::prediction);
  Phase1Run run{model::LoraAdapter(base.config(), c.lora, Stage::prediction, seeds.adapter),
                ctx::GatedProjector(base.config().dim, ctx::Transition::perc_to_pred,
                                    projector_seed(seed, ctx::Transition::perc_to_pred)),
                {}};
  run.perc_to_pred.set_hard_zero(c.hard_zero);

  std::vector<Tensor> h1;
  h1.reserve(train.size());
  for (const scene::SceneRecord& r : train)
    h1.push_back(upstream_context(base, vocab, r, Stage::perception, perc, {}, c.extraction));
  const std::vector<TrainingExample> examples = stage_examples(vocab, train, Stage::prediction);

  std::vector<ad::ParamGroup> groups = {run.pred.param_group(c.weight_decay)};
  for (ad::ParamGroup& g : projector_groups(run.perc_to_pred, c)) groups.push_back(std::move(g));

  record_checksums(run.log.frozen_before, base, {&perc}, {});
  const std::vector<ctx::Transition> tags = {ctx::Transition::perc_to_pred};
  run_training_loop(
      examples.size(), std::move(groups), c.epochs, c.batch_size, c.base_lr, c.warmup_frac,
      seeds.shuffle, seeds.dropout,
      [&](std::size_t i, ad::Rng& rng, ctx::TelemetryRecorder& rec) {
        return example_loss(base, run.pred, examples[i], {run.perc_to_pred.project(h1[i])}, tags,
                            rng, rec);
      },
      {&run.perc_to_pred}, run.log);
  record_checksums(run.log.frozen_after, base, {&perc}, {});
  check_freeze_contract(run.log);
  return run;
}

Phase2Run train_phase2(const model::Transformer& base, const model::Vocabulary& vocab,
                       const std::vector<scene::SceneRecord>& train,
                       const model::LoraAdapter& perc, const model::LoraAdapter& pred,
                       const ctx::GatedProjector& perc_to_pred, const TrainConfig& c,
                       std::uint64_t seed) {
  require_frozen(perc);
  require_frozen(pred);
  require_frozen(perc_to_pred);
  if (pred.stage() != Stage::prediction) throw UsageError("phase 2 needs the prediction adapter");
  const StageSeeds seeds = stage_seeds(seed, Stage::planning);
  Phase2Run run{model::LoraAdapter(base.config(), c.lora, Stage::planning, seeds.adapter),
                ctx::GatedProjector(base.config().dim, ctx::Transition::pred_to_plan,
                                    projector_seed(seed, ctx::Transition::pred_to_plan)),
                std::nullopt, {}};
  if (c.use_transfer) ctx::transfer_init(run.pred_to_plan, perc_to_pred);
  if (c.use_skip)
    run.perc_to_plan.emplace(base.config().dim, ctx::Transition::perc_to_plan_skip,
                             projector_seed(seed, ctx::Transition::perc_to_plan_skip));
  run.pred_to_plan.set_hard_zero(c.hard_zero);
  if (run.perc_to_plan) run.perc_to_plan->set_hard_zero(c.hard_zero);

  std::vector<Tensor> h1, h2;
  h1.reserve(train.size());
  h2.reserve(train.size());
  for (const scene::SceneRecord& r : train) {
    h1.push_back(upstream_context(base, vocab, r, Stage::perception, perc, {}, c.extraction));
    model::TokenSequence seq2 =
        prompt_sequence(vocab, r.scene, flat_prompt(r.qa.at(Stage::prediction).question));
    Tensor v;
    {
      ad::NoGradGuard no_grad;
      v = perc_to_pred.project(h1.back());
    }
    const model::Injection inj{seq2.tau(), v};
    h2.push_back(upstream_context(base, vocab, r, Stage::prediction, pred, {&inj, 1}, c.extraction));
  }
  const std::vector<TrainingExample> examples = stage_examples(vocab, train, Stage::planning);

  std::vector<ad::ParamGroup> groups = {run.plan.param_group(c.weight_decay)};
  for (ad::ParamGroup& g : projector_groups(run.pred_to_plan, c)) groups.push_back(std::move(g));
  if (run.perc_to_plan)
    for (ad::ParamGroup& g : projector_groups(*run.perc_to_plan, c)) groups.push_back(std::move(g));

  record_checksums(run.log.frozen_before, base, {&perc, &pred}, {&perc_to_pred});
  std::vector<ctx::Transition> tags = {ctx::Transition::pred_to_plan};
  std::vector<const ctx::GatedProjector*> tele = {&run.pred_to_plan};
  if (run.perc_to_plan) {
    tags.push_back(ctx::Transition::perc_to_plan_skip);
    tele.push_back(&*run.perc_to_plan);
  }
  run_training_loop(
      examples.size(), std::move(groups), c.epochs, c.batch_size, c.base_lr, c.warmup_frac,
      seeds.shuffle, seeds.dropout,
      [&](std::size_t i, ad::Rng& rng, ctx::TelemetryRecorder& rec) {
        std::vector<Tensor> injected = {run.pred_to_plan.project(h2[i])};
        if (run.perc_to_plan) injected.push_back(run.perc_to_plan->project(h1[i]));
        return example_loss(base, run.plan, examples[i], injected, tags, rng, rec);
      },
      tele, run.log);
  record_checksums(run.log.frozen_after, base, {&perc, &pred}, {&perc_to_pred});
  check_freeze_contract(run.log);
  return run;
}

}  // namespace stagechain::pipeline
