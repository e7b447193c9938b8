#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "exgn/container.hpp"
#include "exgn/ops.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

enum class Init { kaiming_uniform, zeros, ones };

/// Named, ordered parameter collection. Every name is registered once;
/// initialization draws from a private engine in registration order, so a
/// seed fully determines the initial values.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : engine_(seed) {}

  /// `fan_in` is required for kaiming_uniform (bound sqrt(6 / fan_in)).
  Tensor add(const std::string& name, const Shape& shape, Init init, int64_t fan_in = 0);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor> tensors() const;
  size_t size() const { return names_.size(); }
  int64_t parameter_count() const;

  void zero_grad();
  void set_requires_grad(bool on);

  void save(Container& out, const std::string& prefix) const;
  /// Loads every registered parameter from `prefix + name`, checking shapes.
  void load(const Container& in, const std::string& prefix);
  /// Copies values from a store with the same names and shapes.
  void copy_from(const ParamStore& other);

  /// FNV-1a over names and raw value bytes; equal iff bitwise equal (modulo
  /// hash collisions).
  uint64_t fingerprint() const;

 private:
  std::mt19937_64 engine_;
  std::vector<std::string> names_;
  std::map<std::string, Tensor> index_;
};

int norm_groups(int64_t channels);

struct Conv2d {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int pad = 0;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

Conv2d make_conv(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int k,
                 int stride = 1, Init init = Init::kaiming_uniform);

/// y = x W + b with W stored [in, out], applied over the last dimension.
struct Linear {
  Tensor weight;
  Tensor bias;  // empty when constructed without bias

  Tensor operator()(const Tensor& x) const;
};

Linear make_linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out,
                   bool with_bias = true, Init init = Init::kaiming_uniform);

struct GroupNorm {
  Tensor gamma;
  Tensor beta;
  int groups = 1;

  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
};

GroupNorm make_group_norm(ParamStore& ps, const std::string& name, int64_t channels);

/// softmax(q k^T / sqrt(d)) v over the last two dims of q[..,Lq,d],
/// k[..,Lk,d], v[..,Lk,dv]. Softmax runs over the key axis.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Class ids of the per-pixel maximum over axis 1 of logits [B, 3, H, W];
/// ties go to the lower class.
std::vector<uint8_t> argmax_classes(const Tensor& logits);
/// One-hot [B, 3, H, W] from class ids laid out [B, H, W]. Throws
/// FormatError for ids above 2.
Tensor one_hot(std::span<const uint8_t> classes, int64_t batch, int64_t h, int64_t w);

Tensor tensor_from_entry(const Container::Entry& e);
void put_tensor(Container& out, const std::string& name, const Tensor& t);

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
