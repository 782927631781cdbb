#include "stagechain/ctx/projector.hpp"

#include <cmath>
#include <cstring>

#include "stagechain/ad/ops.hpp"
#include "stagechain/ad/rng.hpp"
#include "stagechain/errors.hpp"

namespace stagechain::ctx {

using ad::Tensor;

std::string_view transition_tag(Transition t) {
  switch (t) {
    case Transition::perc_to_pred: return "perc->pred";
    case Transition::pred_to_plan: return "pred->plan";
    case Transition::perc_to_plan_skip: return "perc->plan-skip";
  }
  return "?";
}

Transition parse_transition(std::string_view tag) {
  if (tag == "perc->pred") return Transition::perc_to_pred;
  if (tag == "pred->plan") return Transition::pred_to_plan;
  if (tag == "perc->plan-skip") return Transition::perc_to_plan_skip;
  throw DataError("unknown transition tag '" + std::string(tag) + "'");
}

GatedProjector::GatedProjector(std::size_t dim, Transition transition, std::uint64_t seed)
    : transition_(transition), seed_(seed) {
  ad::Rng rng(seed);
  std::vector<double> w(dim * dim);
  for (double& x : w) x = rng.normal() * kInitScale;
  weight_ = Tensor::matrix(dim, dim, std::move(w), true);
  gate_ = Tensor::scalar(kInitGate, true);
}

Tensor GatedProjector::project(const Tensor& h) const {
  if (h.rank() != 1 || h.numel() != dim()) {
    throw DimensionError("project: context vector must have length " + std::to_string(dim()));
  }
  Tensor gate = ad::sigmoid(gate_);
  if (hard_zero_) gate = ad::scale(gate, 0.0);
  return ad::scalar_mul(gate, ad::matvec(weight_, ad::l2_normalize(h, kEps)));
}

double GatedProjector::gate_opening() const {
  ad::NoGradGuard no_grad;
  return ad::sigmoid(gate_).item();
}

void GatedProjector::freeze() {
  weight_.set_requires_grad(false);
  gate_.set_requires_grad(false);
  weight_.zero_grad();
  gate_.zero_grad();
}

void GatedProjector::set_trainable() {
  weight_.set_requires_grad(true);
  gate_.set_requires_grad(true);
}

std::vector<ad::ParamGroup> GatedProjector::param_groups(double weight_decay) const {
  if (frozen()) throw UsageError("frozen projector cannot be trained");
  const std::string tag(transition_tag(transition_));
  return {
      {"projector-W " + tag, {weight_}, kWeightLrMultiplier, weight_decay},
      {"projector-g " + tag, {gate_}, kGateLrMultiplier, 0.0},
  };
}

ad::NamedTensors GatedProjector::named_parameters() const {
  return {{"W", weight_}, {"g", gate_}};
}

std::string GatedProjector::checksum() const { return ad::tensors_checksum(named_parameters()); }

void GatedProjector::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  nlohmann::json prov = extra;
  prov["kind"] = "gated-projector";
  prov["transition"] = std::string(transition_tag(transition_));
  prov["init_seed"] = seed_;
  prov["dim"] = dim();
  ad::save_checkpoint(dir, named_parameters(), prov);
}

GatedProjector GatedProjector::load(const std::filesystem::path& dir) {
  ad::Checkpoint ckpt = ad::load_checkpoint(dir);
  if (ckpt.provenance.value("kind", "") != "gated-projector") {
    throw DataError(dir.string() + " is not a projector checkpoint");
  }
  GatedProjector p(ckpt.provenance.at("dim").get<std::size_t>(),
                   parse_transition(ckpt.provenance.at("transition").get<std::string>()),
                   ckpt.provenance.at("init_seed").get<std::uint64_t>());
  ad::restore_into(ckpt, p.named_parameters());
  return p;
}

Tensor extract_context(const Tensor& hidden, const model::TokenSequence& seq, GradientFlow flow) {
  const std::size_t tau = seq.tau();
  if (hidden.rank() != 2 || tau >= hidden.rows()) {
    throw LengthError("extract_context: tau " + std::to_string(tau) + " outside hidden states");
  }
  if (flow == GradientFlow::detach) {
    ad::NoGradGuard no_grad;
    return ad::row(hidden, tau);
  }
  return ad::row(hidden, tau);
}

Tensor inject(const Tensor& emb, const model::TokenSequence& seq, const Tensor& h_tilde) {
  const std::size_t tau = seq.tau();
  if (emb.rank() != 2 || tau >= emb.rows()) {
    throw LengthError("inject: tau " + std::to_string(tau) + " outside embedding rows");
  }
  return ad::add_to_row(emb, tau, h_tilde);
}

double injection_ratio(std::span<const double> h_tilde, std::span<const double> host_row) {
  if (h_tilde.size() != host_row.size()) throw DimensionError("injection_ratio: length mismatch");
  double num = 0.0, den = 0.0;
  for (double v : h_tilde) num += v * v;
  for (double v : host_row) den += v * v;
  if (den == 0.0) throw Error("injection_ratio: host embedding row has zero norm");
  return std::sqrt(num) / std::sqrt(den);
}

double injection_ratio(const Tensor& h_tilde, const Tensor& emb, const model::TokenSequence& seq) {
  const std::size_t tau = seq.tau();
  if (emb.rank() != 2 || tau >= emb.rows()) throw LengthError("injection_ratio: tau out of range");
  const std::size_t d = emb.cols();
  return injection_ratio(h_tilde.data(), emb.data().subspan(tau * d, d));
}

void transfer_init(GatedProjector& dst, const GatedProjector& src) {
  if (dst.dim() != src.dim()) {
    throw DimensionError("transfer_init: projector dims " + std::to_string(dst.dim()) + " vs " +
                         std::to_string(src.dim()));
  }
  auto w = dst.mutable_weight().mutable_data();
  std::copy(src.weight().data().begin(), src.weight().data().end(), w.begin());
  dst.mutable_gate().mutable_data()[0] = src.gate().data()[0];
}

std::size_t differing_rows(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2) throw DimensionError("differing_rows: shape mismatch");
  const std::size_t cols = a.cols();
  std::size_t count = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (std::memcmp(a.data().data() + r * cols, b.data().data() + r * cols,
                    cols * sizeof(double)) != 0) {
      ++count;
    }
  }
  return count;
}

}  // namespace stagechain::ctx
