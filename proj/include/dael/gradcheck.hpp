#pragma once

#include <functional>
#include <vector>

#include "dael/tensor.hpp"

namespace dael {

/// Compares autodiff gradients of a scalar function against central
/// differences (f(p+h) - f(p-h)) / 2h, element by element over every
/// parameter. Returns the largest |a - n| / max(1e-8, |a| + |n|).
/// Parameters are restored to their original values on return.
double grad_check(const std::function<Tensor<double>()>& f,
                  std::vector<Tensor<double>> params, double h = 1e-5);

}  // namespace dael
