#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stagechain::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float64 array with an optional gradient buffer.
//
// Tensor is a cheap handle: copies share storage. Ops never mutate their
// inputs; parameters change only through mutable_data() (optimizer steps,
// checkpoint loading, weight transfer).
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
  };

  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;  // rank 2 only
  std::size_t cols() const;  // rank 2 only

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double at(std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad();  // allocates a zero buffer on first use
  void zero_grad() { impl_->grad.clear(); }

  // New storage holding a copy of the values, no gradient tracking.
  Tensor detach() const;

  const Impl* id() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Constructing a Tape makes it the active tape of the
// current thread; ops whose inputs require gradients record their backward
// closures on it. Without an active tape nothing is recorded (inference).
// The tape is single-use: backward() replays it once and clears it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  std::size_t size() const { return entries_.size(); }

  static Tape* active();

 private:
  std::vector<std::function<void()>> entries_;
  Tape* previous_;
};

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// Throws NumericError naming `what` if any value is NaN or Inf.
void check_finite(std::span<const double> values, const char* what);

}  // namespace stagechain::ad
