#include "exgn/tensor.hpp"

#include <cmath>

#include "exgn/errors.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->shape = {};
  impl_->data.assign(1, real(0));
}

Tensor::Tensor(Shape shape, std::vector<real> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, real(0)); }

Tensor Tensor::full(const Shape& shape, real value) {
  return Tensor(shape, std::vector<real>(static_cast<size_t>(shape_numel(shape)), value));
}

Tensor Tensor::scalar(real value) { return Tensor({}, {value}); }

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<size_t>(a)];
}

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

real Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw ShapeError("at(): rank mismatch");
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : index) {
    const int64_t d = impl_->shape[i++];
    if (v < 0 || v >= d) throw ShapeError("at(): index out of range");
    flat = flat * d + v;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

std::span<real> Tensor::grad() { return impl_->grad_buffer(); }

std::span<const real> Tensor::grad() const { return impl_->grad_buffer(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

void Tape::run_backward() {
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ShapeError("backward(): loss is not on the tape");
  auto& g = loss.impl()->grad_buffer();
  g[0] += real(1);
  tape.run_backward();
}

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (!g_active_tape) return false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void check_finite(const Tensor& t, const char* op) {
  for (real v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace detail

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
