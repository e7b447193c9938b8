#include "exgn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace exgn {
inline namespace EXGN_PRECISION_NS {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  Tensor probe = x.detach();
  std::vector<real> out(static_cast<size_t>(x.numel()));
  auto values = probe.mutable_data();
  for (size_t i = 0; i < out.size(); ++i) {
    const real saved = values[i];
    values[i] = static_cast<real>(saved + h);
    const double up = f(probe);
    values[i] = static_cast<real>(saved - h);
    const double down = f(probe);
    values[i] = saved;
    out[i] = static_cast<real>((up - down) / (2.0 * h));
  }
  return Tensor(x.shape(), std::move(out));
}

std::vector<double> finite_diff_at(const std::function<double()>& f, Tensor& param,
                                   const std::vector<int64_t>& indices, double h) {
  std::vector<double> out;
  out.reserve(indices.size());
  auto values = param.mutable_data();
  for (int64_t idx : indices) {
    const size_t i = static_cast<size_t>(idx);
    const real saved = values[i];
    values[i] = static_cast<real>(saved + h);
    const double up = f();
    values[i] = static_cast<real>(saved - h);
    const double down = f();
    values[i] = saved;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < floor) return 0.0;
  return std::abs(a - b) / scale;
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
