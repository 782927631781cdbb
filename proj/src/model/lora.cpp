#include "stagechain/model/lora.hpp"

#include <cmath>

#include "stagechain/ad/rng.hpp"
#include "stagechain/errors.hpp"

namespace stagechain::model {

const char* lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::q: return "q";
    case LoraTarget::k: return "k";
    case LoraTarget::v: return "v";
    case LoraTarget::o: return "o";
    case LoraTarget::up: return "up";
    case LoraTarget::down: return "down";
  }
  return "?";
}

namespace {

// (out, in) dimensions of each adapted projection.
std::pair<std::size_t, std::size_t> target_dims(const ModelConfig& m, LoraTarget t) {
  const std::size_t hidden = m.dim * m.mlp_ratio;
  switch (t) {
    case LoraTarget::up: return {hidden, m.dim};
    case LoraTarget::down: return {m.dim, hidden};
    default: return {m.dim, m.dim};
  }
}

}  // namespace

LoraAdapter::LoraAdapter(const ModelConfig& model, LoraConfig config, Stage stage,
                         std::uint64_t seed)
    : config_(config), stage_(stage), seed_(seed) {
  if (config_.rank == 0) throw UsageError("lora rank must be positive");
  ad::Rng rng(seed);
  layers_.resize(model.n_layers);
  for (auto& layer : layers_) {
    for (std::size_t t = 0; t < kLoraTargets; ++t) {
      const auto [out, in] = target_dims(model, static_cast<LoraTarget>(t));
      // Kaiming-uniform bound 1/sqrt(in) for A; B starts at zero.
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::vector<double> a(config_.rank * in);
      for (double& x : a) x = rng.uniform(-bound, bound);
      layer[t].a = ad::Tensor::matrix(config_.rank, in, std::move(a), true);
      layer[t].b = ad::Tensor::zeros({out, config_.rank}, true);
    }
  }
}

void LoraAdapter::freeze() {
  frozen_ = true;
  for (auto& layer : layers_)
    for (LoraPair& p : layer) {
      p.a.set_requires_grad(false);
      p.b.set_requires_grad(false);
      p.a.zero_grad();
      p.b.zero_grad();
    }
}

void LoraAdapter::set_trainable() {
  frozen_ = false;
  for (auto& layer : layers_)
    for (LoraPair& p : layer) {
      p.a.set_requires_grad(true);
      p.b.set_requires_grad(true);
    }
}

ad::NamedTensors LoraAdapter::named_parameters() const {
  ad::NamedTensors out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    for (std::size_t t = 0; t < kLoraTargets; ++t) {
      const std::string prefix = "layer" + std::to_string(l) + "." +
                                 lora_target_name(static_cast<LoraTarget>(t));
      out.emplace_back(prefix + ".A", layers_[l][t].a);
      out.emplace_back(prefix + ".B", layers_[l][t].b);
    }
  }
  return out;
}

ad::ParamGroup LoraAdapter::param_group(double weight_decay) const {
  if (frozen_) {
    throw UsageError("frozen " + std::string(stage_tag(stage_)) + " adapter cannot be trained");
  }
  ad::ParamGroup group;
  group.name = "lora-" + std::string(stage_tag(stage_));
  group.weight_decay = weight_decay;
  for (const auto& [name, t] : named_parameters()) group.params.push_back(t);
  return group;
}

std::string LoraAdapter::checksum() const { return ad::tensors_checksum(named_parameters()); }

void LoraAdapter::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  nlohmann::json prov = extra;
  prov["kind"] = "lora-adapter";
  prov["stage"] = std::string(stage_tag(stage_));
  prov["init_seed"] = seed_;
  prov["lora"] = config_;
  ad::save_checkpoint(dir, named_parameters(), prov);
}

LoraAdapter LoraAdapter::load(const std::filesystem::path& dir, const ModelConfig& model) {
  ad::Checkpoint ckpt = ad::load_checkpoint(dir);
  if (ckpt.provenance.value("kind", "") != "lora-adapter") {
    throw DataError(dir.string() + " is not an adapter checkpoint");
  }
  LoraAdapter adapter(model, ckpt.provenance.at("lora").get<LoraConfig>(),
                      parse_stage(ckpt.provenance.at("stage").get<std::string>()),
                      ckpt.provenance.at("init_seed").get<std::uint64_t>());
  ad::restore_into(ckpt, adapter.named_parameters());
  return adapter;
}

void AdapterRegistry::put(LoraAdapter adapter) {
  const Stage s = adapter.stage();
  adapters_.insert_or_assign(s, std::move(adapter));
}

const LoraAdapter& AdapterRegistry::get(Stage s) const {
  auto it = adapters_.find(s);
  if (it == adapters_.end()) {
    throw UsageError("no adapter registered for stage " + std::string(stage_tag(s)));
  }
  return it->second;
}

LoraAdapter& AdapterRegistry::get(Stage s) {
  return const_cast<LoraAdapter&>(std::as_const(*this).get(s));
}

void AdapterRegistry::freeze(Stage s) { get(s).freeze(); }

void AdapterRegistry::set_trainable(Stage s) { get(s).set_trainable(); }

}  // namespace stagechain::model
