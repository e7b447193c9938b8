#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "exgn/precision.hpp"

namespace exgn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline namespace EXGN_PRECISION_NS {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  // Allocated on first use; empty means "all zeros".
  std::vector<real> grad;
  bool requires_grad = false;

  std::vector<real>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; values are never
/// mutated after an op creates them, only the gradient buffer is.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<real> values);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, real value);
  static Tensor scalar(real value);

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  /// Size of dimension `axis`; negative axes count from the end.
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const real> data() const { return impl_->data; }
  /// Direct write access, reserved for parameter updates and loaders.
  std::span<real> mutable_data() { return impl_->data; }
  real item() const;
  real at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  /// Gradient view; allocates a zero buffer if none exists yet.
  std::span<real> grad();
  std::span<const real> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  /// Copy of the values without gradient participation.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable ops executed while the tape is active.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  void clear() { ops_.clear(); }

  /// Runs every recorded backward rule once, newest first, then clears.
  void run_backward();

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<BackwardFn> ops_;
};

/// Makes `tape` the recording target for ops issued on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates through `tape`. Gradients of
/// leaves accumulate into their existing buffers.
void backward(const Tensor& loss, Tape& tape);

namespace detail {

/// True when an op over `inputs` must be recorded on the active tape.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(const std::vector<Tensor>& inputs);

/// Throws NumericError if any value is NaN or Inf.
void check_finite(const Tensor& t, const char* op);

}  // namespace detail

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
