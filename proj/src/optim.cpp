#include "exgn/optim.hpp"

#include <cmath>

#include "exgn/errors.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty() && state.step == 0) {
    for (const Tensor& p : params) {
      state.m.emplace_back(static_cast<size_t>(p.numel()), real(0));
      state.v.emplace_back(static_cast<size_t>(p.numel()), real(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: parameter list changed");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != static_cast<size_t>(p.numel())) throw ShapeError("adam: moment shape mismatch");
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (size_t j = 0; j < m.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<real>(mj);
      v[j] = static_cast<real>(vj);
      const double update = cfg.lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      w[j] = static_cast<real>(w[j] - update);
    }
  }
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
