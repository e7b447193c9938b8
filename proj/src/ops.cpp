#include "exgn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "exgn/errors.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;
using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return a;
}

Tensor finish(Shape shape, std::vector<real> values, const char* op) {
  Tensor out(std::move(shape), std::move(values));
  detail::check_finite(out, op);
  return out;
}

template <class F>
void record(Tensor& out, F&& fn) {
  out.impl()->requires_grad = true;
  Tape::active()->record(std::forward<F>(fn));
}

// Gradient flowing into `out`, or nullptr when nothing reached it.
const std::vector<real>* incoming(const ImplPtr& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

std::vector<real>* grad_if(const ImplPtr& t) {
  return t->requires_grad ? &t->grad_buffer() : nullptr;
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  enum class Mode { same, a_scalar, b_scalar, b_suffix, a_suffix, general };
  Shape out;
  int64_t n = 0;
  int64_t na = 0, nb = 0;
  Mode mode = Mode::general;
  std::vector<int64_t> dims, a_strides, b_strides;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shapes(a, b);
  p.n = shape_numel(p.out);
  p.na = shape_numel(a);
  p.nb = shape_numel(b);
  if (a == b) {
    p.mode = BroadcastPlan::Mode::same;
  } else if (p.nb == 1 && p.na == p.n) {
    p.mode = BroadcastPlan::Mode::b_scalar;
  } else if (p.na == 1 && p.nb == p.n) {
    p.mode = BroadcastPlan::Mode::a_scalar;
  } else if (a == p.out && is_suffix(b, p.out)) {
    p.mode = BroadcastPlan::Mode::b_suffix;
  } else if (b == p.out && is_suffix(a, p.out)) {
    p.mode = BroadcastPlan::Mode::a_suffix;
  } else {
    p.mode = BroadcastPlan::Mode::general;
    const size_t r = p.out.size();
    p.dims = p.out;
    p.a_strides.assign(r, 0);
    p.b_strides.assign(r, 0);
    int64_t sa = 1, sb = 1;
    for (size_t k = 0; k < r; ++k) {
      const size_t i = r - 1 - k;
      if (k < a.size()) {
        const int64_t d = a[a.size() - 1 - k];
        if (d != 1) p.a_strides[i] = sa;
        sa *= d;
      }
      if (k < b.size()) {
        const int64_t d = b[b.size() - 1 - k];
        if (d != 1) p.b_strides[i] = sb;
        sb *= d;
      }
    }
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  using Mode = BroadcastPlan::Mode;
  switch (p.mode) {
    case Mode::same:
      for (int64_t i = 0; i < p.n; ++i) f(i, i, i);
      return;
    case Mode::b_scalar:
      for (int64_t i = 0; i < p.n; ++i) f(i, i, int64_t{0});
      return;
    case Mode::a_scalar:
      for (int64_t i = 0; i < p.n; ++i) f(i, int64_t{0}, i);
      return;
    case Mode::b_suffix:
      for (int64_t i = 0; i < p.n;) {
        for (int64_t j = 0; j < p.nb; ++j, ++i) f(i, i, j);
      }
      return;
    case Mode::a_suffix:
      for (int64_t i = 0; i < p.n;) {
        for (int64_t j = 0; j < p.na; ++j, ++i) f(i, j, i);
      }
      return;
    case Mode::general:
      break;
  }
  const size_t r = p.dims.size();
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < p.n; ++i) {
    f(i, ia, ib);
    for (size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += p.a_strides[k];
      ib += p.b_strides[k];
      if (idx[k] < p.dims[k]) break;
      ia -= p.a_strides[k] * p.dims[k];
      ib -= p.b_strides[k] * p.dims[k];
      idx[k] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul, div };

const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::add: return "add";
    case BinaryKind::sub: return "sub";
    case BinaryKind::mul: return "mul";
    case BinaryKind::div: return "div";
  }
  return "binary";
}

Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  std::vector<real> out(static_cast<size_t>(plan.n));
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  real* po = out.data();
  switch (kind) {
    case BinaryKind::add:
      for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] + pb[ib]; });
      break;
    case BinaryKind::sub:
      for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] - pb[ib]; });
      break;
    case BinaryKind::mul:
      for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] * pb[ib]; });
      break;
    case BinaryKind::div:
      for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) { po[i] = pa[ia] / pb[ib]; });
      break;
  }
  Tensor result = finish(plan.out, std::move(out), binary_name(kind));
  if (detail::should_record({&a, &b})) {
    ImplPtr ia_ = a.impl(), ib_ = b.impl(), io = result.impl();
    record(result, [kind, plan, ia_, ib_, io] {
      const auto* g = incoming(io);
      if (!g) return;
      const real* pg = g->data();
      std::vector<real>* ga = grad_if(ia_);
      std::vector<real>* gb = grad_if(ib_);
      const real* va = ia_->data.data();
      const real* vb = ib_->data.data();
      real* da = ga ? ga->data() : nullptr;
      real* db = gb ? gb->data() : nullptr;
      for_each_broadcast(plan, [&](int64_t i, int64_t a_i, int64_t b_i) {
        const real gi = pg[i];
        switch (kind) {
          case BinaryKind::add:
            if (da) da[a_i] += gi;
            if (db) db[b_i] += gi;
            break;
          case BinaryKind::sub:
            if (da) da[a_i] += gi;
            if (db) db[b_i] -= gi;
            break;
          case BinaryKind::mul:
            if (da) da[a_i] += gi * vb[b_i];
            if (db) db[b_i] += gi * va[a_i];
            break;
          case BinaryKind::div:
            if (da) da[a_i] += gi / vb[b_i];
            if (db) db[b_i] -= gi * va[a_i] / (vb[b_i] * vb[b_i]);
            break;
        }
      });
    });
  }
  return result;
}

// Unary ops whose derivative is expressible from (input, output).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto xs = x.data();
  std::vector<real> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  Tensor result = finish(x.shape(), std::move(out), name);
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [ix, io, deriv] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * deriv(ix->data[i], io->data[i]);
    });
  }
  return result;
}

real stable_sigmoid(real v) {
  if (v >= 0) return real(1) / (real(1) + std::exp(-v));
  const real e = std::exp(v);
  return e / (real(1) + e);
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t k = 0; k < r; ++k) {
    const int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::div, a, b); }

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](real v) { return std::log(v); }, [](real v, real) { return real(1) / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", stable_sigmoid, [](real, real y) { return y * (real(1) - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](real v) { return v * stable_sigmoid(v); },
      [](real v, real) {
        const real s = stable_sigmoid(v);
        return s + v * s * (real(1) - s);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](real v) { return v > 0 ? v : real(0); },
      [](real v, real) { return v > 0 ? real(1) : real(0); });
}

Tensor scale(const Tensor& x, real factor) {
  return unary(
      x, "scale", [factor](real v) { return v * factor; }, [factor](real, real) { return factor; });
}

Tensor add_scalar(const Tensor& x, real offset) {
  return unary(
      x, "add_scalar", [offset](real v) { return v + offset; }, [](real, real) { return real(1); });
}

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b, real factor) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw ShapeError("elementwise: binary kind needs a second operand");
    return *b;
  };
  switch (kind) {
    case ElementwiseKind::add: return add(a, need_b());
    case ElementwiseKind::sub: return sub(a, need_b());
    case ElementwiseKind::mul: return mul(a, need_b());
    case ElementwiseKind::div: return div(a, need_b());
    case ElementwiseKind::exp: return exp(a);
    case ElementwiseKind::log: return log(a);
    case ElementwiseKind::sigmoid: return sigmoid(a);
    case ElementwiseKind::silu: return silu(a);
    case ElementwiseKind::relu: return relu(a);
    case ElementwiseKind::scale: return scale(a, factor);
  }
  throw ShapeError("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  // With a plain 2-D right operand every row of `a` shares it: one GEMM.
  const bool flat = b_batch.empty();
  const BroadcastPlan plan = plan_broadcast(a_batch, b_batch);
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<real> out(static_cast<size_t>(shape_numel(out_shape)));
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  if (flat) {
    const int64_t rows = shape_numel(a_batch) * m;
    MapR(out.data(), rows, n).noalias() = CMapR(pa, rows, k) * CMapR(pb, k, n);
  } else {
    for_each_broadcast(plan, [&](int64_t i, int64_t ia, int64_t ib) {
      MapR(out.data() + i * m * n, m, n).noalias() =
          CMapR(pa + ia * m * k, m, k) * CMapR(pb + ib * k * n, k, n);
    });
  }
  Tensor result = finish(out_shape, std::move(out), "matmul");
  if (detail::should_record({&a, &b})) {
    ImplPtr ia_ = a.impl(), ib_ = b.impl(), io = result.impl();
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      std::vector<real>* ga = grad_if(ia_);
      std::vector<real>* gb = grad_if(ib_);
      const real* va = ia_->data.data();
      const real* vb = ib_->data.data();
      if (flat) {
        const int64_t rows = shape_numel(a_batch) * m;
        CMapR G(g->data(), rows, n);
        if (ga) MapR(ga->data(), rows, k).noalias() += G * CMapR(vb, k, n).transpose();
        if (gb) MapR(gb->data(), k, n).noalias() += CMapR(va, rows, k).transpose() * G;
        return;
      }
      for_each_broadcast(plan, [&](int64_t i, int64_t a_i, int64_t b_i) {
        CMapR G(g->data() + i * m * n, m, n);
        if (ga) {
          MapR(ga->data() + a_i * m * k, m, k).noalias() +=
              G * CMapR(vb + b_i * k * n, k, n).transpose();
        }
        if (gb) {
          MapR(gb->data() + b_i * k * n, k, n).noalias() +=
              CMapR(va + a_i * m * k, m, k).transpose() * G;
        }
      });
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects x[B,C,H,W] and w[O,C,kh,kw], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(w.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel sizes must be odd");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride or padding");
  if (H + 2 * pad < kh || W + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit padded input " + shape_str(x.shape()));
  }
  const bool has_bias = bias.numel() > 0 && bias.rank() == 1;
  if (has_bias && bias.dim(0) != O) throw ShapeError("conv2d bias size mismatch");
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  const int64_t K = C * kh * kw, P = Ho * Wo, BP = B * P;

  // Column matrix [K, B*P] so the whole batch is one GEMM.
  auto cols = std::make_shared<std::vector<real>>(static_cast<size_t>(K * BP), real(0));
  const real* px = x.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const real* plane = px + (b * C + c) * H * W;
      for (int64_t ki = 0; ki < kh; ++ki) {
        for (int64_t kj = 0; kj < kw; ++kj) {
          real* row = cols->data() + ((c * kh + ki) * kw + kj) * BP + b * P;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            const int64_t iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= H) continue;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              const int64_t ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < W) row[oy * Wo + ox] = plane[iy * W + ix];
            }
          }
        }
      }
    }
  }
  std::vector<real> prod(static_cast<size_t>(O * BP));
  MapR(prod.data(), O, BP).noalias() = CMapR(w.data().data(), O, K) * CMapR(cols->data(), K, BP);
  std::vector<real> out(static_cast<size_t>(B * O * P));
  for (int64_t o = 0; o < O; ++o) {
    const real bo = has_bias ? bias.data()[static_cast<size_t>(o)] : real(0);
    for (int64_t b = 0; b < B; ++b) {
      const real* src = prod.data() + o * BP + b * P;
      real* dst = out.data() + (b * O + o) * P;
      for (int64_t p = 0; p < P; ++p) dst[p] = src[p] + bo;
    }
  }
  Tensor result = finish({B, O, Ho, Wo}, std::move(out), "conv2d");
  if (detail::should_record({&x, &w, has_bias ? &bias : nullptr})) {
    ImplPtr ix = x.impl(), iw = w.impl(), io = result.impl();
    ImplPtr ibias = has_bias ? bias.impl() : nullptr;
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      std::vector<real> gmat(static_cast<size_t>(O * BP));
      for (int64_t o = 0; o < O; ++o) {
        for (int64_t b = 0; b < B; ++b) {
          std::copy_n(g->data() + (b * O + o) * P, P, gmat.data() + o * BP + b * P);
        }
      }
      CMapR G(gmat.data(), O, BP);
      if (ibias && ibias->requires_grad) {
        auto& gb = ibias->grad_buffer();
        for (int64_t o = 0; o < O; ++o) {
          real s = 0;
          for (int64_t p = 0; p < BP; ++p) s += gmat[static_cast<size_t>(o * BP + p)];
          gb[static_cast<size_t>(o)] += s;
        }
      }
      if (iw->requires_grad) {
        MapR(iw->grad_buffer().data(), O, K).noalias() += G * CMapR(cols->data(), K, BP).transpose();
      }
      if (ix->requires_grad) {
        std::vector<real> dcols(static_cast<size_t>(K * BP));
        MapR(dcols.data(), K, BP).noalias() = CMapR(iw->data.data(), O, K).transpose() * G;
        real* gx = ix->grad_buffer().data();
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t c = 0; c < C; ++c) {
            real* plane = gx + (b * C + c) * H * W;
            for (int64_t ki = 0; ki < kh; ++ki) {
              for (int64_t kj = 0; kj < kw; ++kj) {
                const real* row = dcols.data() + ((c * kh + ki) * kw + kj) * BP + b * P;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                  const int64_t iy = oy * stride - pad + ki;
                  if (iy < 0 || iy >= H) continue;
                  for (int64_t ox = 0; ox < Wo; ++ox) {
                    const int64_t ix2 = ox * stride - pad + kj;
                    if (ix2 >= 0 && ix2 < W) plane[iy * W + ix2] += row[oy * Wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// softmax family

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const real* px = x.data().data();
  std::vector<real> out(x.data().size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      const int64_t base = o * s.n * s.inner + j;
      real m = -std::numeric_limits<real>::infinity();
      for (int64_t i = 0; i < s.n; ++i) m = std::max(m, px[base + i * s.inner]);
      real total = 0;
      for (int64_t i = 0; i < s.n; ++i) {
        const real e = std::exp(px[base + i * s.inner] - m);
        out[static_cast<size_t>(base + i * s.inner)] = e;
        total += e;
      }
      for (int64_t i = 0; i < s.n; ++i) out[static_cast<size_t>(base + i * s.inner)] /= total;
    }
  }
  Tensor result = finish(x.shape(), std::move(out), "softmax");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [s, ix, io] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      const auto& y = io->data;
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          const int64_t base = o * s.n * s.inner + j;
          real dot = 0;
          for (int64_t i = 0; i < s.n; ++i) {
            const size_t at = static_cast<size_t>(base + i * s.inner);
            dot += (*g)[at] * y[at];
          }
          for (int64_t i = 0; i < s.n; ++i) {
            const size_t at = static_cast<size_t>(base + i * s.inner);
            gx[at] += y[at] * ((*g)[at] - dot);
          }
        }
      }
    });
  }
  return result;
}

namespace {

// log-sum-exp over one strided slice, optionally skipping one element.
real slice_lse(const real* p, int64_t n, int64_t stride, int64_t skip = -1) {
  real m = -std::numeric_limits<real>::infinity();
  for (int64_t i = 0; i < n; ++i) {
    if (i != skip) m = std::max(m, p[i * stride]);
  }
  if (!std::isfinite(m)) return m;
  real total = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (i != skip) total += std::exp(p[i * stride] - m);
  }
  return m + std::log(total);
}

}  // namespace

Tensor log_softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const real* px = x.data().data();
  std::vector<real> out(x.data().size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      const int64_t base = o * s.n * s.inner + j;
      const real lse = slice_lse(px + base, s.n, s.inner);
      for (int64_t i = 0; i < s.n; ++i) {
        out[static_cast<size_t>(base + i * s.inner)] = px[base + i * s.inner] - lse;
      }
    }
  }
  Tensor result = finish(x.shape(), std::move(out), "log_softmax");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [s, ix, io] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      const auto& y = io->data;
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          const int64_t base = o * s.n * s.inner + j;
          real gsum = 0;
          for (int64_t i = 0; i < s.n; ++i) gsum += (*g)[static_cast<size_t>(base + i * s.inner)];
          for (int64_t i = 0; i < s.n; ++i) {
            const size_t at = static_cast<size_t>(base + i * s.inner);
            gx[at] += (*g)[at] - std::exp(y[at]) * gsum;
          }
        }
      }
    });
  }
  return result;
}

Tensor log1m_softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "log1m_softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  const real* px = x.data().data();
  std::vector<real> out(x.data().size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      const int64_t base = o * s.n * s.inner + j;
      const real lse = slice_lse(px + base, s.n, s.inner);
      for (int64_t i = 0; i < s.n; ++i) {
        out[static_cast<size_t>(base + i * s.inner)] = slice_lse(px + base, s.n, s.inner, i) - lse;
      }
    }
  }
  Tensor result = finish(x.shape(), std::move(out), "log1m_softmax");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [s, ix, io] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      const real* px2 = ix->data.data();
      std::vector<real> excl(static_cast<size_t>(s.n));
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          const int64_t base = o * s.n * s.inner + j;
          const real lse = slice_lse(px2 + base, s.n, s.inner);
          real gsum = 0;
          for (int64_t c = 0; c < s.n; ++c) {
            excl[static_cast<size_t>(c)] = slice_lse(px2 + base, s.n, s.inner, c);
            gsum += (*g)[static_cast<size_t>(base + c * s.inner)];
          }
          for (int64_t i = 0; i < s.n; ++i) {
            const real xi = px2[base + i * s.inner];
            real acc = -std::exp(xi - lse) * gsum;
            for (int64_t c = 0; c < s.n; ++c) {
              if (c == i) continue;
              acc += (*g)[static_cast<size_t>(base + c * s.inner)] *
                     std::exp(xi - excl[static_cast<size_t>(c)]);
            }
            gx[static_cast<size_t>(base + i * s.inner)] += acc;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// group_norm

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 2) throw ShapeError("group_norm expects x[B,C,...]");
  const int64_t B = x.dim(0), C = x.dim(1);
  if (groups <= 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm affine size mismatch");
  const int64_t S = x.numel() / (B * C);
  const int64_t cpg = C / groups;
  const int64_t gsize = cpg * S;
  const real* px = x.data().data();
  const real* pg = gamma.data().data();
  const real* pb = beta.data().data();
  auto xhat = std::make_shared<std::vector<real>>(x.data().size());
  auto rstd = std::make_shared<std::vector<real>>(static_cast<size_t>(B * groups));
  std::vector<real> out(x.data().size());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t gi = 0; gi < groups; ++gi) {
      const int64_t base = (b * C + gi * cpg) * S;
      double mean = 0;
      for (int64_t i = 0; i < gsize; ++i) mean += px[base + i];
      mean /= static_cast<double>(gsize);
      double var = 0;
      for (int64_t i = 0; i < gsize; ++i) {
        const double d = px[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[static_cast<size_t>(b * groups + gi)] = static_cast<real>(r);
      for (int64_t c = 0; c < cpg; ++c) {
        const int64_t ch = gi * cpg + c;
        for (int64_t i = 0; i < S; ++i) {
          const size_t at = static_cast<size_t>(base + c * S + i);
          const real h = static_cast<real>((px[at] - mean) * r);
          (*xhat)[at] = h;
          out[at] = h * pg[ch] + pb[ch];
        }
      }
    }
  }
  Tensor result = finish(x.shape(), std::move(out), "group_norm");
  if (detail::should_record({&x, &gamma, &beta})) {
    ImplPtr ix = x.impl(), igam = gamma.impl(), ibet = beta.impl(), io = result.impl();
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      std::vector<real>* gx = grad_if(ix);
      std::vector<real>* ggam = grad_if(igam);
      std::vector<real>* gbet = grad_if(ibet);
      const real* gam = igam->data.data();
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t gi = 0; gi < groups; ++gi) {
          const int64_t base = (b * C + gi * cpg) * S;
          double mean_d = 0, mean_dh = 0;
          for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = gi * cpg + c;
            double sg = 0, sgh = 0;
            for (int64_t i = 0; i < S; ++i) {
              const size_t at = static_cast<size_t>(base + c * S + i);
              const double gv = (*g)[at];
              const double h = (*xhat)[at];
              sg += gv;
              sgh += gv * h;
              mean_d += gv * gam[ch];
              mean_dh += gv * gam[ch] * h;
            }
            if (ggam) (*ggam)[static_cast<size_t>(ch)] += static_cast<real>(sgh);
            if (gbet) (*gbet)[static_cast<size_t>(ch)] += static_cast<real>(sg);
          }
          if (!gx) continue;
          mean_d /= static_cast<double>(gsize);
          mean_dh /= static_cast<double>(gsize);
          const double r = (*rstd)[static_cast<size_t>(b * groups + gi)];
          for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = gi * cpg + c;
            for (int64_t i = 0; i < S; ++i) {
              const size_t at = static_cast<size_t>(base + c * S + i);
              const double d = static_cast<double>((*g)[at]) * gam[ch];
              (*gx)[at] += static_cast<real>(r * (d - mean_d - (*xhat)[at] * mean_dh));
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// upsample

namespace {

struct LerpTap {
  int64_t i0, i1;
  real w1;
};

std::vector<LerpTap> lerp_taps(int64_t in, int factor) {
  std::vector<LerpTap> taps(static_cast<size_t>(in * factor));
  for (int64_t o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, static_cast<real>(src - static_cast<double>(i0))};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("upsample expects x[B,C,H,W], got " + shape_str(x.shape()));
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H * factor, Wo = W * factor;
  const auto ty = lerp_taps(H, factor), tx = lerp_taps(W, factor);
  const real* px = x.data().data();
  std::vector<real> out(static_cast<size_t>(B * C * Ho * Wo));
  for (int64_t p = 0; p < B * C; ++p) {
    const real* src = px + p * H * W;
    real* dst = out.data() + p * Ho * Wo;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      const LerpTap& a = ty[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < Wo; ++ox) {
        const LerpTap& b = tx[static_cast<size_t>(ox)];
        const real top = src[a.i0 * W + b.i0] * (1 - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        const real bot = src[a.i1 * W + b.i0] * (1 - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        dst[oy * Wo + ox] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  Tensor result = finish({B, C, Ho, Wo}, std::move(out), "upsample_bilinear");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      for (int64_t p = 0; p < B * C; ++p) {
        real* dst = gx.data() + p * H * W;
        const real* src = g->data() + p * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          const LerpTap& a = ty[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const LerpTap& b = tx[static_cast<size_t>(ox)];
            const real gv = src[oy * Wo + ox];
            dst[a.i0 * W + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
            dst[a.i0 * W + b.i1] += gv * (1 - a.w1) * b.w1;
            dst[a.i1 * W + b.i0] += gv * a.w1 * (1 - b.w1);
            dst[a.i1 * W + b.i1] += gv * a.w1 * b.w1;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// pooling

Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride) {
  if (x.rank() != 4) throw ShapeError("pool2d expects x[B,C,H,W], got " + shape_str(x.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || stride < 1 || k > H || k > W) throw ShapeError("pool2d: window does not fit");
  if ((H - k) % stride != 0 || (W - k) % stride != 0) {
    throw ShapeError("pool2d: window " + std::to_string(k) + "/stride " + std::to_string(stride) +
                     " does not tile " + shape_str(x.shape()));
  }
  const int64_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  const real* px = x.data().data();
  std::vector<real> out(static_cast<size_t>(B * C * Ho * Wo));
  auto argmax = std::make_shared<std::vector<int64_t>>();
  if (kind == PoolKind::max) argmax->resize(out.size());
  const real inv = real(1) / static_cast<real>(k * k);
  for (int64_t p = 0; p < B * C; ++p) {
    const real* src = px + p * H * W;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      for (int64_t ox = 0; ox < Wo; ++ox) {
        const size_t at = static_cast<size_t>((p * Ho + oy) * Wo + ox);
        if (kind == PoolKind::avg) {
          real s = 0;
          for (int64_t i = 0; i < k; ++i) {
            for (int64_t j = 0; j < k; ++j) s += src[(oy * stride + i) * W + ox * stride + j];
          }
          out[at] = s * inv;
        } else {
          int64_t best = (oy * stride) * W + ox * stride;
          for (int64_t i = 0; i < k; ++i) {
            for (int64_t j = 0; j < k; ++j) {
              const int64_t idx = (oy * stride + i) * W + ox * stride + j;
              if (src[idx] > src[best]) best = idx;
            }
          }
          out[at] = src[best];
          (*argmax)[at] = p * H * W + best;
        }
      }
    }
  }
  Tensor result = finish({B, C, Ho, Wo}, std::move(out), "pool2d");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      if (kind == PoolKind::max) {
        for (size_t at = 0; at < g->size(); ++at) gx[static_cast<size_t>((*argmax)[at])] += (*g)[at];
        return;
      }
      for (int64_t p = 0; p < B * C; ++p) {
        real* dst = gx.data() + p * H * W;
        for (int64_t oy = 0; oy < Ho; ++oy) {
          for (int64_t ox = 0; ox < Wo; ++ox) {
            const real gv = (*g)[static_cast<size_t>((p * Ho + oy) * Wo + ox)] * inv;
            for (int64_t i = 0; i < k; ++i) {
              for (int64_t j = 0; j < k; ++j) dst[(oy * stride + i) * W + ox * stride + j] += gv;
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  double s = 0;
  for (real v : x.data()) s += v;
  Tensor result = finish({}, {static_cast<real>(s)}, "sum");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [ix, io] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      const real gv = (*g)[0];
      for (real& v : gx) v += gv;
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), real(1) / static_cast<real>(x.numel()));
}

namespace {

enum class ReduceKind { sum, mean, max };

Tensor reduce_axis(const Tensor& x, int axis, bool keepdim, ReduceKind kind) {
  const int ax = normalize_axis(axis, x.rank(), "reduce");
  const AxisSplit s = split_at(x.shape(), ax);
  if (s.n == 0) throw ShapeError("reduction over empty axis");
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[static_cast<size_t>(ax)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + ax);
  }
  const real* px = x.data().data();
  std::vector<real> out(static_cast<size_t>(s.outer * s.inner));
  auto arg = std::make_shared<std::vector<int64_t>>();
  if (kind == ReduceKind::max) arg->resize(out.size());
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      const int64_t base = o * s.n * s.inner + j;
      const size_t at = static_cast<size_t>(o * s.inner + j);
      if (kind == ReduceKind::max) {
        int64_t best = 0;
        for (int64_t i = 1; i < s.n; ++i) {
          if (px[base + i * s.inner] > px[base + best * s.inner]) best = i;
        }
        out[at] = px[base + best * s.inner];
        (*arg)[at] = base + best * s.inner;
      } else {
        real acc = 0;
        for (int64_t i = 0; i < s.n; ++i) acc += px[base + i * s.inner];
        out[at] = kind == ReduceKind::mean ? acc / static_cast<real>(s.n) : acc;
      }
    }
  }
  Tensor result = finish(out_shape, std::move(out), "reduce");
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [=] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      if (kind == ReduceKind::max) {
        for (size_t at = 0; at < g->size(); ++at) gx[static_cast<size_t>((*arg)[at])] += (*g)[at];
        return;
      }
      const real f = kind == ReduceKind::mean ? real(1) / static_cast<real>(s.n) : real(1);
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          const real gv = (*g)[static_cast<size_t>(o * s.inner + j)] * f;
          const int64_t base = o * s.n * s.inner + j;
          for (int64_t i = 0; i < s.n; ++i) gx[static_cast<size_t>(base + i * s.inner)] += gv;
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, ReduceKind::sum);
}
Tensor mean(const Tensor& x, int axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, ReduceKind::mean);
}
Tensor max(const Tensor& x, int axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, ReduceKind::max);
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto xs = x.data();
  Tensor result(shape, std::vector<real>(xs.begin(), xs.end()));
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [ix, io] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order length != rank");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int a : order) {
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) throw ShapeError("permute: bad order");
    seen[static_cast<size_t>(a)] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(static_cast<size_t>(r));
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), src_strides(static_cast<size_t>(r));
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * in[static_cast<size_t>(i + 1)];
  }
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<size_t>(i)] = in[static_cast<size_t>(order[static_cast<size_t>(i)])];
    src_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(order[static_cast<size_t>(i)])];
  }
  const int64_t n = x.numel();
  // Source offset of every output element, shared with the backward rule.
  auto src_index = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      (*src_index)[static_cast<size_t>(i)] = off;
      for (int k = r - 1; k >= 0; --k) {
        const size_t kk = static_cast<size_t>(k);
        ++idx[kk];
        off += src_strides[kk];
        if (idx[kk] < out_shape[kk]) break;
        off -= src_strides[kk] * out_shape[kk];
        idx[kk] = 0;
      }
    }
  }
  const real* px = x.data().data();
  std::vector<real> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = px[(*src_index)[static_cast<size_t>(i)]];
  Tensor result(out_shape, std::move(out));
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [ix, io, src_index] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      for (size_t i = 0; i < g->size(); ++i) gx[static_cast<size_t>((*src_index)[i])] += (*g)[i];
    });
  }
  return result;
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  const int a = normalize_axis(axis_a, x.rank(), "transpose");
  const int b = normalize_axis(axis_b, x.rank(), "transpose");
  std::vector<int> order(static_cast<size_t>(x.rank()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<size_t>(a)], order[static_cast<size_t>(b)]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts.front().rank();
  const int ax = normalize_axis(axis, r, "concat");
  Shape out_shape = parts.front().shape();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != ax && p.shape()[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(out_shape));
      }
    }
    total += p.shape()[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total;
  const AxisSplit s = split_at(out_shape, ax);
  std::vector<real> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const Tensor& p : parts) {
    const int64_t n = p.shape()[static_cast<size_t>(ax)];
    const real* src = p.data().data();
    for (int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(src + o * n * s.inner, n * s.inner, out.data() + (o * total + offset) * s.inner);
    }
    offsets.push_back(offset);
    offset += n;
  }
  Tensor result(out_shape, std::move(out));
  if (detail::should_record(parts)) {
    std::vector<ImplPtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.impl());
    ImplPtr io = result.impl();
    record(result, [ins, io, offsets, s, ax, total] {
      const auto* g = incoming(io);
      if (!g) return;
      for (size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k]->requires_grad) continue;
        const int64_t n = ins[k]->shape[static_cast<size_t>(ax)];
        auto& gp = ins[k]->grad_buffer();
        for (int64_t o = 0; o < s.outer; ++o) {
          const real* src = g->data() + (o * total + offsets[k]) * s.inner;
          real* dst = gp.data() + o * n * s.inner;
          for (int64_t i = 0; i < n * s.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  const int r = parts.front().rank() + 1;
  const int ax = normalize_axis(axis, r, "stack");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin() + ax, 1);
    expanded.push_back(reshape(p, s));
  }
  return concat(expanded, ax);
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit s = split_at(x.shape(), ax);
  if (start < 0 || length < 0 || start + length > s.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(ax)] = length;
  std::vector<real> out(static_cast<size_t>(s.outer * length * s.inner));
  const real* px = x.data().data();
  for (int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(px + (o * s.n + start) * s.inner, length * s.inner,
                out.data() + o * length * s.inner);
  }
  Tensor result(out_shape, std::move(out));
  if (detail::should_record({&x})) {
    ImplPtr ix = x.impl(), io = result.impl();
    record(result, [ix, io, s, start, length] {
      const auto* g = incoming(io);
      if (!g) return;
      auto& gx = ix->grad_buffer();
      for (int64_t o = 0; o < s.outer; ++o) {
        const real* src = g->data() + o * length * s.inner;
        real* dst = gx.data() + (o * s.n + start) * s.inner;
        for (int64_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
