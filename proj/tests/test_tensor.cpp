#include <doctest.h>

#include <cmath>
#include <set>

#include "fsml/autograd.hpp"
#include "fsml/gradcheck.hpp"
#include "fsml/rng.hpp"
#include "support/op_gradients.hpp"

using namespace fsml;

TEST_CASE("tensor rejects zero extents and bad reshapes") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(bitwise_equal(t.cast<double>().cast<float>(), t));
}

TEST_CASE("splitmix64 matches the reference sequence") {
  Rng r(1234567);
  CHECK(r.next_u64() == 6457827717110365317ULL);
  CHECK(r.next_u64() == 3203168211198807973ULL);
  CHECK(r.next_u64() == 9817491932198370423ULL);
  CHECK(Rng(0).next_u64() == 16294208416658607535ULL);
}

TEST_CASE("derived streams are stable and independent of each other") {
  CHECK(derive_seed(7, "dropout", 3) == derive_seed(7, "dropout", 3));
  std::set<std::uint64_t> seen;
  for (const char* p : {"dropout", "init/conv1", "eval-episode", "synthetic/samples"})
    for (std::uint64_t i = 0; i < 4; ++i) seen.insert(derive_seed(7, p, i));
  CHECK(seen.size() == 16);
}

TEST_CASE("rng draws have the advertised ranges") {
  Rng r(11);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double z = r.normal();
    mean += z;
    var += z * z;
  }
  CHECK(std::abs(mean / n) < 0.03);
  CHECK(std::abs(var / n - 1.0) < 0.05);
  const auto perm = r.permutation(50);
  CHECK(std::set<std::size_t>(perm.begin(), perm.end()).size() == 50);
  const auto pick = r.choose(10, 10);
  CHECK(std::set<std::size_t>(pick.begin(), pick.end()).size() == 10);
  for (int i = 0; i < 1000; ++i) REQUIRE(r.below(7) < 7);
}

TEST_CASE("every differentiable op matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& [name, err] : testing::op_gradient_suite(seed)) {
      INFO(name << " seed " << seed);
      CHECK(err < 1e-6);
    }
}

TEST_CASE("forward values agree with independently computed references") {
  Tape<double> t;
  // cross-entropy of logits (10, 0, 0) at the first class: ln(1 + 2 e^-10)
  const Var ce = softmax_cross_entropy(
      t, t.constant(Tensor<double>(Shape{1, 3}, std::vector<double>{10, 0, 0})), std::vector<int>{0});
  CHECK(t.value(ce).item() == doctest::Approx(9.079573746724446e-05).epsilon(1e-12));

  // 3x3 Laplacian over 1..9 with zero padding, bias 0.5
  const Var y = conv2d(t, t.constant(Tensor<double>(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9})),
                       t.constant(Tensor<double>(Shape{1, 1, 3, 3}, {0, 1, 0, 1, -4, 1, 0, 1, 0})),
                       t.constant(Tensor<double>(Shape{1}, {0.5})), 1, 1);
  const std::vector<double> want{2.5, 1.5, -3.5, -2.5, 0.5, -6.5, -15.5, -10.5, -21.5};
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(t.value(y)[i] == doctest::Approx(want[i]));

  const Var cl = cosine_logits(t, t.constant(Tensor<double>(Shape{2, 2}, {3, 4, 1, 0})),
                               t.constant(Tensor<double>(Shape{3, 2}, {1, 0, 0, 2, -1, -1})), 10.0);
  const std::vector<double> cw{5.999999928000001, 7.999999944000001, -9.899494846812676,
                               9.999999800000005, 0.0, -7.071067691154799};
  for (std::size_t i = 0; i < cw.size(); ++i) CHECK(t.value(cl)[i] == doctest::Approx(cw[i]).epsilon(1e-12));
}

TEST_CASE("maxpool routes the gradient of a tie to the lowest index") {
  Tape<double> t;
  const Var x = t.parameter("x", Tensor<double>(Shape{1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}));
  const auto g = t.backward(sum(t, maxpool2(t, x))).at("x");
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("tape contracts") {
  Tape<double> t;
  const Var a = t.parameter("a", Tensor<double>(Shape{2, 3}, 1.0));
  CHECK_THROWS_AS(t.parameter("a", Tensor<double>(Shape{1}, 0.0)), ContractError);
  const Var unused = t.parameter("unused", Tensor<double>(Shape{2}, 3.0));
  (void)unused;
  CHECK_THROWS_AS(t.backward(a), ContractError);  // not a scalar
  const auto g = t.backward(sum(t, a));
  CHECK(g.at("unused")[0] == 0.0);
  CHECK(g.at("unused")[1] == 0.0);
  CHECK_THROWS_AS(matmul(t, a, a), DimensionError);
  const Var logits = t.constant(Tensor<double>(Shape{1, 3}, 0.0));
  CHECK_THROWS_AS(softmax_cross_entropy(t, logits, std::vector<int>{3}), IndexError);
  const Var big = t.constant(Tensor<double>(Shape{1}, 1e200));
  CHECK_THROWS_AS(square(t, big), ContractError);  // overflow is caught, not propagated
}

TEST_CASE("gradcheck helpers") {
  CHECK_THROWS_AS(finite_diff_grad([](const Tensor<double>&) { return 0.0; }, Tensor<double>(Shape{1}), 0.0),
                  ContractError);
  const auto g = finite_diff_grad(
      [](const Tensor<double>& x) { return x[0] * x[0] * x[0]; }, Tensor<double>(Shape{1}, 2.0), 1e-5);
  CHECK(g[0] == doctest::Approx(12.0).epsilon(1e-8));
  CHECK(max_relative_error(Tensor<double>(Shape{2}, {1.0, 0.0}), Tensor<double>(Shape{2}, {1.0, 0.0})) == 0.0);
}
