#pragma once

#include <functional>
#include <vector>

#include "stagechain/ad/tensor.hpp"

namespace stagechain::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

// Compares the tape gradient of `f` against central differences with step h
// for every coordinate of every tensor in `params`. Relative error per
// coordinate is |a - n| / max(|a|, |n|, floor). Central differences carry
// roughly 1e-11 of rounding noise on O(1) losses, so the floor keeps
// near-zero gradients from reporting that noise as relative error. `f` must
// build its graph from `params` each call and return a one-element tensor.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double h = 1e-5, double floor = 1e-6);

}  // namespace stagechain::ad
