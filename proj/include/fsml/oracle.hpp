#pragma once

// Independent verifiers for the optimization machinery. Everything here is
// written with plain loops over doubles so it shares no code path with the
// autograd engine it checks.

#include <cstdint>
#include <string>
#include <vector>

#include "fsml/tensor.hpp"

namespace fsml::oracle {

/// One linear-regression task under a feature map w [d_feat, d_in].
struct RidgeTask {
  Tensor<double> x_support;  // [n_s, d_in]
  Tensor<double> y_support;  // [n_s, 1]
  Tensor<double> x_query;    // [n_q, d_in]
  Tensor<double> y_query;    // [n_q, 1]
};

struct RidgeFamily {
  std::size_t d_in = 4;
  std::size_t d_feat = 3;
  double lambda = 1.0;
  double noise_std = 0.1;
  Tensor<double> w;       // current meta-knowledge
  Tensor<double> beta;    // the task's true linear map [d_in, 1]
  RidgeTask task;
};

RidgeFamily make_ridge_family(std::uint64_t seed, std::size_t d_in = 4, std::size_t d_feat = 3,
                              std::size_t n_support = 10, std::size_t n_query = 10,
                              double lambda = 1.0, double noise_std = 0.1);

/// Solves A x = b ([n,n], [n,1]) by Gaussian elimination with partial
/// pivoting. Throws ConditioningError on a vanishing pivot.
Tensor<double> solve_linear(Tensor<double> a, Tensor<double> b);

/// theta* = (Phi^T Phi + lambda I)^-1 Phi^T y with Phi = X w^T.
Tensor<double> closed_form_inner(const Tensor<double>& x, const Tensor<double>& y,
                                 const Tensor<double>& w, double lambda);

/// 0.5 |X w^T theta - y|^2
double ridge_query_loss(const Tensor<double>& x, const Tensor<double>& y, const Tensor<double>& w,
                        const Tensor<double>& theta);

/// Central differences in w of the query loss with theta* solved in closed
/// form at the unperturbed w and then held fixed.
Tensor<double> fd_meta_gradient(const RidgeFamily& family, double eps);

/// Sum over all 2^n keep/drop masks of P(mask) * mask * activation / keep.
/// Refuses n > 12.
Tensor<double> brute_force_dropout_expectation(const Tensor<double>& activation, double keep_prob);

/// |a - b| / max(|a|, |b|, floor) in the Euclidean norm.
double norm_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-12);

/// Largest per-coordinate relative error between reverse-mode and central
/// difference gradients of a small Conv-4 classifier (double precision). The
/// instance is redrawn until no relu or pooling kink lies within 10 eps of the
/// evaluation point.
double conv4_gradient_check(std::uint64_t seed, double eps = 1e-5);

struct Faults {
  /// Test fixture: negates the trainer-side meta-gradient before comparison.
  bool flip_meta_gradient_sign = false;
};

struct GateResult {
  std::string name;
  double worst = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct GateReport {
  std::vector<GateResult> gates;
  bool passed() const;
  std::string text() const;
};

/// Trainer-side pieces the gates compare against the oracles.
Tensor<double> trainer_inner_solution(const RidgeFamily& family, std::size_t steps, double lr);
Tensor<double> trainer_meta_gradient(const RidgeFamily& family, const Tensor<double>& theta);
/// A step size with guaranteed contraction for the family's inner problem.
double safe_inner_lr(const RidgeFamily& family);

GateReport run_gates(const Faults& faults = {});

}  // namespace fsml::oracle
