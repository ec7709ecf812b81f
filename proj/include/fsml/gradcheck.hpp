#pragma once

#include <functional>

#include "fsml/tensor.hpp"

namespace fsml {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
/// coordinate of x. This is the reference the reverse-mode gradients are
/// checked against.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double eps);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-8);

}  // namespace fsml
