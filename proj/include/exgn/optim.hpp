#pragma once

#include <cstdint>
#include <vector>

#include "exgn/tensor.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

struct AdamState {
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;
  int64_t step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `params` from their gradient buffers.
/// Moment buffers are created on the first call and must keep matching the
/// parameter list afterwards.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
