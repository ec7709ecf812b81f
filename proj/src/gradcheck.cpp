#include "fsml/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fsml {

Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(probe);
    probe[i] = orig - eps;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_relative_error: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace fsml
