#pragma once

#include <functional>
#include <vector>

#include "exgn/tensor.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
/// `x` is not modified.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h);

/// Central differences of a closure that reads `param` in place, evaluated
/// only at `indices`. The parameter values are restored afterwards.
std::vector<double> finite_diff_at(const std::function<double()>& f, Tensor& param,
                                   const std::vector<int64_t>& indices, double h);

/// |a - b| / max(|a|, |b|), or 0 when both magnitudes are below `floor`.
double relative_error(double a, double b, double floor = 1e-8);

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
