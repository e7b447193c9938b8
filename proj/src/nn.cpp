#include "exgn/nn.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "exgn/errors.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

Tensor ParamStore::add(const std::string& name, const Shape& shape, Init init, int64_t fan_in) {
  if (index_.count(name)) throw ShapeError("parameter registered twice: " + name);
  std::vector<real> values(static_cast<size_t>(shape_numel(shape)));
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(values.begin(), values.end(), real(1));
      break;
    case Init::kaiming_uniform: {
      if (fan_in <= 0) throw ShapeError("kaiming init needs fan_in for " + name);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (real& v : values) v = static_cast<real>(dist(engine_));
      break;
    }
  }
  Tensor t(shape, std::move(values));
  t.set_requires_grad(true);
  names_.push_back(name);
  index_.emplace(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("unknown parameter: " + name);
  return it->second;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(names_.size());
  for (const auto& n : names_) out.push_back(index_.at(n));
  return out;
}

int64_t ParamStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : index_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : index_) t.zero_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [name, t] : index_) t.set_requires_grad(on);
}

void ParamStore::save(Container& out, const std::string& prefix) const {
  for (const auto& n : names_) put_tensor(out, prefix + n, index_.at(n));
}

void ParamStore::load(const Container& in, const std::string& prefix) {
  for (const auto& n : names_) {
    const auto& e = in.get_f32(prefix + n);
    Tensor& dst = index_.at(n);
    Shape shape(e.dims.begin(), e.dims.end());
    if (shape != dst.shape()) {
      throw FormatError("checkpoint shape mismatch for " + prefix + n + ": " + shape_str(shape) +
                        " vs " + shape_str(dst.shape()));
    }
    auto values = dst.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<real>(e.f32[i]);
  }
}

void ParamStore::copy_from(const ParamStore& other) {
  for (const auto& n : names_) {
    const Tensor& src = other.get(n);
    Tensor& dst = index_.at(n);
    if (src.shape() != dst.shape()) throw ShapeError("copy_from shape mismatch: " + n);
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

uint64_t ParamStore::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& n : names_) {
    feed(n.data(), n.size());
    const auto d = index_.at(n).data();
    feed(d.data(), d.size() * sizeof(real));
  }
  return h;
}

int norm_groups(int64_t channels) {
  if (channels < 8) return static_cast<int>(channels);
  for (int g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Conv2d make_conv(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int k,
                 int stride, Init init) {
  Conv2d c;
  c.weight = ps.add(name + ".weight", {cout, cin, k, k}, init, cin * k * k);
  c.bias = ps.add(name + ".bias", {cout}, Init::zeros);
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.rank() == 1 ? add(y, bias) : y;
}

Linear make_linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out,
                   bool with_bias, Init init) {
  Linear l;
  l.weight = ps.add(name + ".weight", {in, out}, init, in);
  if (with_bias) l.bias = ps.add(name + ".bias", {out}, Init::zeros);
  return l;
}

GroupNorm make_group_norm(ParamStore& ps, const std::string& name, int64_t channels) {
  GroupNorm g;
  g.gamma = ps.add(name + ".gamma", {channels}, Init::ones);
  g.beta = ps.add(name + ".beta", {channels}, Init::zeros);
  g.groups = norm_groups(channels);
  return g;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const real inv_sqrt_d = real(1) / std::sqrt(static_cast<real>(q.dim(-1)));
  Tensor logits = scale(matmul(q, transpose(k, -2, -1)), inv_sqrt_d);
  return matmul(softmax(logits, -1), v);
}

std::vector<uint8_t> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(1) != 3) {
    throw ShapeError("argmax_classes expects [B, 3, H, W], got " + shape_str(logits.shape()));
  }
  const int64_t b = logits.dim(0), plane = logits.dim(2) * logits.dim(3);
  const auto d = logits.data();
  std::vector<uint8_t> out(static_cast<size_t>(b * plane));
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t p = 0; p < plane; ++p) {
      uint8_t best = 0;
      real best_v = d[static_cast<size_t>(i * 3 * plane + p)];
      for (uint8_t c = 1; c < 3; ++c) {
        const real v = d[static_cast<size_t>((i * 3 + c) * plane + p)];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[static_cast<size_t>(i * plane + p)] = best;
    }
  }
  return out;
}

Tensor one_hot(std::span<const uint8_t> classes, int64_t batch, int64_t h, int64_t w) {
  const int64_t plane = h * w;
  if (static_cast<int64_t>(classes.size()) != batch * plane) {
    throw ShapeError("one_hot: class map size does not match " + std::to_string(batch) + "x" +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<real> v(static_cast<size_t>(batch * 3 * plane), real(0));
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t p = 0; p < plane; ++p) {
      const uint8_t c = classes[static_cast<size_t>(i * plane + p)];
      if (c > 2) throw FormatError("mask value " + std::to_string(c) + " outside {0,1,2}");
      v[static_cast<size_t>((i * 3 + c) * plane + p)] = real(1);
    }
  }
  return Tensor({batch, 3, h, w}, std::move(v));
}

Tensor tensor_from_entry(const Container::Entry& e) {
  if (e.dtype != Container::DType::f32) throw FormatError("expected f32 entry: " + e.name);
  Shape shape(e.dims.begin(), e.dims.end());
  return Tensor(shape, std::vector<real>(e.f32.begin(), e.f32.end()));
}

void put_tensor(Container& out, const std::string& name, const Tensor& t) {
  std::vector<uint64_t> dims(t.shape().begin(), t.shape().end());
  std::vector<float> values(t.data().begin(), t.data().end());
  out.put_f32(name, std::move(dims), values);
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
