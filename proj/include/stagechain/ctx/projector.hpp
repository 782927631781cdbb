#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stagechain/ad/checkpoint.hpp"
#include "stagechain/ad/optim.hpp"
#include "stagechain/ad/tensor.hpp"
#include "stagechain/model/tokenizer.hpp"

namespace stagechain::ctx {

enum class Transition { perc_to_pred, pred_to_plan, perc_to_plan_skip };

std::string_view transition_tag(Transition t);  // "perc->pred", "pred->plan", "perc->plan-skip"
Transition parse_transition(std::string_view tag);

// Learned gate-scaled linear map from one stage's context vector into the
// next stage's embedding space:
//
//   h̃ = σ(g) · W · (h / (‖h‖₂ + ε)),   ε = 1e-6
//
// W starts as N(0,1)·0.01 elementwise and g at -3.5. The hard-zero switch
// replaces σ(g) with exactly 0 while keeping g in the graph.
class GatedProjector {
 public:
  static constexpr double kEps = 1e-6;
  static constexpr double kInitGate = -3.5;
  static constexpr double kInitScale = 0.01;
  static constexpr double kWeightLrMultiplier = 3.0;
  static constexpr double kGateLrMultiplier = 25.0;

  GatedProjector(std::size_t dim, Transition transition, std::uint64_t seed);

  std::size_t dim() const { return weight_.rows(); }
  Transition transition() const { return transition_; }
  std::uint64_t seed() const { return seed_; }

  ad::Tensor project(const ad::Tensor& h) const;

  // σ(g), ignoring the hard-zero switch.
  double gate_opening() const;
  void set_hard_zero(bool on) { hard_zero_ = on; }
  bool hard_zero() const { return hard_zero_; }

  const ad::Tensor& weight() const { return weight_; }
  const ad::Tensor& gate() const { return gate_; }
  ad::Tensor& mutable_weight() { return weight_; }
  ad::Tensor& mutable_gate() { return gate_; }

  void freeze();
  void set_trainable();
  bool frozen() const { return !weight_.requires_grad(); }

  // W at 3x and g at 25x the base learning rate. The gate carries no decay.
  std::vector<ad::ParamGroup> param_groups(double weight_decay) const;

  ad::NamedTensors named_parameters() const;
  std::string checksum() const;
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;
  static GatedProjector load(const std::filesystem::path& dir);

 private:
  ad::Tensor weight_;  // D × D
  ad::Tensor gate_;    // one element
  Transition transition_;
  std::uint64_t seed_;
  bool hard_zero_ = false;
};

enum class GradientFlow { detach, propagate };

// hidden[τ] for the sequence's τ. With GradientFlow::detach the result is a
// constant, which is how a frozen upstream stage is read.
ad::Tensor extract_context(const ad::Tensor& hidden, const model::TokenSequence& seq,
                           GradientFlow flow = GradientFlow::detach);

// emb with h̃ added to row τ of `seq`; every other row is copied unchanged.
ad::Tensor inject(const ad::Tensor& emb, const model::TokenSequence& seq,
                  const ad::Tensor& h_tilde);

// ‖h̃‖₂ / ‖emb[τ]‖₂.
double injection_ratio(const ad::Tensor& h_tilde, const ad::Tensor& emb,
                       const model::TokenSequence& seq);
double injection_ratio(std::span<const double> h_tilde, std::span<const double> host_row);

// Copies W and g from src into dst; both stay independently trainable.
void transfer_init(GatedProjector& dst, const GatedProjector& src);

// Number of rows that differ bitwise between two equally shaped matrices.
std::size_t differing_rows(const ad::Tensor& a, const ad::Tensor& b);

}  // namespace stagechain::ctx
