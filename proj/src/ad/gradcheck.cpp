#include "stagechain/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stagechain/errors.hpp"

namespace stagechain::ad {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                           double h, double floor) {
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f();
    check_finite(loss.data(), "grad_check objective");
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      check_finite(p.grad(), "grad_check analytic gradient");
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = f().item();
      values[i] = original - h;
      const double down = f().item();
      values[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite objective under perturbation");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = pi;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace stagechain::ad
