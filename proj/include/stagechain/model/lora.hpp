#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stagechain/ad/checkpoint.hpp"
#include "stagechain/ad/optim.hpp"
#include "stagechain/ad/tensor.hpp"
#include "stagechain/model/config.hpp"
#include "stagechain/stage.hpp"

namespace stagechain::model {

// Projection layers an adapter attaches to, per transformer block.
enum class LoraTarget : int { q = 0, k, v, o, up, down };
inline constexpr std::size_t kLoraTargets = 6;
const char* lora_target_name(LoraTarget t);

struct LoraPair {
  ad::Tensor a;  // r × in
  ad::Tensor b;  // out × r, zero at init
};

// Low-rank update (alpha/r)·B·A·x added to each frozen projection.
class LoraAdapter {
 public:
  LoraAdapter(const ModelConfig& model, LoraConfig config, Stage stage, std::uint64_t seed);

  const LoraPair& pair(std::size_t layer, LoraTarget target) const {
    return layers_.at(layer)[static_cast<std::size_t>(target)];
  }
  const LoraConfig& config() const { return config_; }
  Stage stage() const { return stage_; }
  std::uint64_t seed() const { return seed_; }

  void freeze();
  void set_trainable();
  bool frozen() const { return frozen_; }

  ad::NamedTensors named_parameters() const;
  ad::ParamGroup param_group(double weight_decay) const;  // throws if frozen
  std::string checksum() const;

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;
  static LoraAdapter load(const std::filesystem::path& dir, const ModelConfig& model);

 private:
  LoraConfig config_;
  Stage stage_;
  std::uint64_t seed_;
  bool frozen_ = false;
  std::vector<std::array<LoraPair, kLoraTargets>> layers_;
};

// One adapter per stage; forward passes select at most one.
class AdapterRegistry {
 public:
  void put(LoraAdapter adapter);
  bool contains(Stage s) const { return adapters_.contains(s); }
  const LoraAdapter& get(Stage s) const;  // throws UsageError if absent
  LoraAdapter& get(Stage s);
  void freeze(Stage s);
  void set_trainable(Stage s);

 private:
  std::map<Stage, LoraAdapter> adapters_;
};

}  // namespace stagechain::model
