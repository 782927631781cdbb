#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stagechain/ad/tensor.hpp"

namespace stagechain::ad {

struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  double lr_multiplier = 1.0;
  double weight_decay = 0.0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled-weight-decay Adam. Effective learning rate per group is
// base_lr × schedule_scale × lr_multiplier.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, AdamWConfig config = {});

  void step(double base_lr, double schedule_scale);
  void zero_grad();

  std::size_t step_count() const { return step_count_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWConfig config_;
  std::size_t step_count_ = 0;
  std::vector<std::vector<std::vector<double>>> first_moment_;
  std::vector<std::vector<std::vector<double>>> second_moment_;
};

// Linear warmup over warmup_frac × total_steps, then cosine decay to 0.
double cosine_warmup_scale(std::size_t step, std::size_t total_steps, double warmup_frac);

}  // namespace stagechain::ad
