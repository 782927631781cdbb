#include "stagechain/ad/optim.hpp"

#include <cmath>
#include <numbers>
#include <set>

#include "stagechain/errors.hpp"

namespace stagechain::ad {

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig config)
    : groups_(std::move(groups)), config_(config) {
  std::set<const Tensor::Impl*> seen;
  for (const ParamGroup& group : groups_) {
    if (group.lr_multiplier < 0.0 || group.weight_decay < 0.0) {
      throw UsageError("param group '" + group.name + "' has a negative multiplier or decay");
    }
    for (const Tensor& p : group.params) {
      if (!p.requires_grad()) {
        throw UsageError("param group '" + group.name + "' contains a frozen tensor");
      }
      if (!seen.insert(p.id()).second) {
        throw UsageError("tensor registered in more than one param group ('" + group.name + "')");
      }
    }
  }
  for (const ParamGroup& group : groups_) {
    auto& m = first_moment_.emplace_back();
    auto& v = second_moment_.emplace_back();
    for (const Tensor& p : group.params) {
      m.emplace_back(p.numel(), 0.0);
      v.emplace_back(p.numel(), 0.0);
    }
  }
}

void AdamW::step(double base_lr, double schedule_scale) {
  for (const ParamGroup& group : groups_) {
    for (const Tensor& p : group.params) {
      if (!p.has_grad()) {
        throw Error("adamw: trainable parameter in group '" + group.name + "' has no gradient");
      }
      check_finite(p.grad(), "gradient");
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    ParamGroup& group = groups_[gi];
    const double lr = base_lr * schedule_scale * group.lr_multiplier;
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      Tensor& p = group.params[pi];
      auto values = p.mutable_data();
      const auto grad = p.grad();
      auto& m = first_moment_[gi][pi];
      auto& v = second_moment_[gi][pi];
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
      }
      if (lr == 0.0) continue;
      const double decay = 1.0 - lr * group.weight_decay;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double m_hat = m[i] / bias1;
        const double v_hat = v[i] / bias2;
        values[i] = values[i] * decay - lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
      check_finite(values, "parameter update");
    }
  }
}

void AdamW::zero_grad() {
  for (ParamGroup& group : groups_)
    for (Tensor& p : group.params) p.zero_grad();
}

double cosine_warmup_scale(std::size_t step, std::size_t total_steps, double warmup_frac) {
  if (total_steps == 0) throw UsageError("cosine_warmup_scale: total_steps must be > 0");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) {
    throw UsageError("cosine_warmup_scale: warmup_frac must lie in (0,1)");
  }
  if (step > total_steps) throw UsageError("cosine_warmup_scale: step beyond total_steps");
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_frac * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace stagechain::ad
