#include <doctest.h>

#include <cmath>

#include "fsml/meta.hpp"
#include "fsml/oracle.hpp"

using namespace fsml;
using namespace fsml::oracle;

namespace {

double norm(const Tensor<double>& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> phi_times(const RidgeFamily& f, const Tensor<double>& x, const Tensor<double>& theta) {
  const std::size_t n = x.dim(0);
  Tensor<double> y(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < f.d_feat; ++k) {
      double phi = 0.0;
      for (std::size_t i = 0; i < f.d_in; ++i) phi += x[r * f.d_in + i] * f.w[k * f.d_in + i];
      y[r] += phi * theta[k];
    }
  return y;
}

}  // namespace

TEST_CASE("linear solver") {
  const Tensor<double> a(Shape{3, 3}, {0, 2, 1, 1, 1, 1, 2, 1, 0});  // needs pivoting
  const Tensor<double> b(Shape{3, 1}, {5, 4, 4});
  const auto x = solve_linear(a, b);
  CHECK(x[0] == doctest::Approx(1.0));
  CHECK(x[1] == doctest::Approx(2.0));
  CHECK(x[2] == doctest::Approx(1.0));
  CHECK_THROWS_AS(solve_linear(Tensor<double>(Shape{2, 2}, {1, 2, 2, 4}), Tensor<double>(Shape{2, 1}, 1.0)),
                  ConditioningError);
}

TEST_CASE("closed-form inner solution limits") {
  RidgeFamily f = make_ridge_family(3, 3, 3);
  f.w = Tensor<double>(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto& t = f.task;
  const auto shrunk = closed_form_inner(t.x_support, t.y_support, f.w, 1e6);
  Tensor<double> phit_y(Shape{3, 1});
  for (std::size_t r = 0; r < t.x_support.dim(0); ++r)
    for (std::size_t k = 0; k < 3; ++k) phit_y[k] += t.x_support[r * 3 + k] * t.y_support[r];
  CHECK(norm(shrunk) < 1e-3 * norm(phit_y));

  const RidgeFamily g = make_ridge_family(4);
  const Tensor<double> theta0(Shape{3, 1}, {0.5, -1.0, 2.0});
  const auto exact = closed_form_inner(g.task.x_support, phi_times(g, g.task.x_support, theta0), g.w, 1e-10);
  CHECK(max_abs(exact, theta0) < 1e-5);
  CHECK_THROWS_AS(closed_form_inner(g.task.x_support, g.task.y_support, g.w, 0.0), ContractError);
}

TEST_CASE("inner_adapt converges to the closed form and stays there") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const RidgeFamily f = make_ridge_family(s);
    const auto closed = closed_form_inner(f.task.x_support, f.task.y_support, f.w, f.lambda);
    const double lr = 0.5 * safe_inner_lr(f);
    CHECK(max_abs(trainer_inner_solution(f, 10000, lr), closed) < 1e-6);

    ParamStore<double> p;
    p.emplace(ridge::kW, f.w);
    p.emplace(ridge::kTheta, closed);
    const auto next = inner_adapt<double>(p, {ridge::kTheta},
                                          ridge::task_loss(f.task.x_support, f.task.y_support, f.lambda), 1, 1e-3);
    CHECK(max_abs(next.at(ridge::kTheta), closed) < 1e-8);
  }
}

TEST_CASE("finite-difference meta-gradient") {
  CHECK_THROWS_AS(fd_meta_gradient(make_ridge_family(0), 0.0), ContractError);

  // query targets reproduced exactly at theta*: stationary
  RidgeFamily f = make_ridge_family(6);
  const auto theta = closed_form_inner(f.task.x_support, f.task.y_support, f.w, f.lambda);
  f.task.y_query = phi_times(f, f.task.x_query, theta);
  CHECK(norm(fd_meta_gradient(f, 1e-5)) < 1e-8);
  CHECK(norm(trainer_meta_gradient(f, theta)) < 1e-8);
}

TEST_CASE("meta-gradient is affine in the query targets") {
  const RidgeFamily f = make_ridge_family(7);
  const auto theta = closed_form_inner(f.task.x_support, f.task.y_support, f.w, f.lambda);
  auto with_targets = [&](double factor) {
    RidgeFamily g = f;
    for (std::size_t i = 0; i < g.task.y_query.numel(); ++i) g.task.y_query[i] *= factor;
    return trainer_meta_gradient(g, theta);
  };
  const auto g0 = with_targets(0.0), g1 = with_targets(1.0), g2 = with_targets(2.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < g0.numel(); ++i) worst = std::max(worst, std::abs((g2[i] - g0[i]) - 2.0 * (g1[i] - g0[i])));
  CHECK(worst < 1e-8);
}

TEST_CASE("trainer meta-gradient agrees with finite differences on 20 families") {
  double worst = 0.0;
  for (std::uint64_t s = 100; s < 120; ++s) {
    const RidgeFamily f = make_ridge_family(s, 5, 3, 12, 9, 1.0, 0.2);
    const double lr = safe_inner_lr(f);
    const auto theta = trainer_inner_solution(f, 3000, lr);
    worst = std::max(worst, norm_relative_error(trainer_meta_gradient(f, theta), fd_meta_gradient(f, 1e-5)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("brute-force dropout expectation") {
  const Tensor<double> pair(Shape{2}, {2.0, -4.0});
  const auto e = brute_force_dropout_expectation(pair, 0.5);
  CHECK(e[0] == 2.0);
  CHECK(e[1] == -4.0);
  const auto id = brute_force_dropout_expectation(pair, 1.0);
  CHECK(id[0] == 2.0);
  CHECK(id[1] == -4.0);

  Rng rng(3);
  for (double keep : {0.3, 0.7, 0.9}) {
    Tensor<double> a(Shape{10});
    for (std::size_t i = 0; i < 10; ++i) a[i] = rng.uniform(-3.0, 3.0);
    CHECK(max_abs(brute_force_dropout_expectation(a, keep), a) <= 1e-12);
  }
  CHECK_THROWS_AS(brute_force_dropout_expectation(Tensor<double>(Shape{13}), 0.5), ContractError);
}

TEST_CASE("gates pass and detect an injected sign error") {
  const GateReport ok = run_gates();
  CHECK(ok.passed());
  CHECK(ok.text().find("fd_meta_gradient") != std::string::npos);

  Faults faults;
  faults.flip_meta_gradient_sign = true;
  const GateReport bad = run_gates(faults);
  CHECK_FALSE(bad.passed());
  for (const auto& g : bad.gates) CHECK(g.passed == (g.name != "fd_meta_gradient"));
}
