#include "fsml/oracle.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <limits>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fsml/gradcheck.hpp"
#include "fsml/meta.hpp"
#include "fsml/rng.hpp"

namespace fsml::oracle {

namespace {

Tensor<double> normal_tensor(Shape shape, Rng& rng, double std) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std * rng.normal();
  return t;
}

// Phi = X w^T
Tensor<double> features(const Tensor<double>& x, const Tensor<double>& w) {
  const std::size_t n = x.dim(0), d_in = x.dim(1), d_feat = w.dim(0);
  if (w.dim(1) != d_in) throw DimensionError("feature map width does not match inputs");
  Tensor<double> phi(Shape{n, d_feat});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t f = 0; f < d_feat; ++f) {
      double s = 0.0;
      for (std::size_t i = 0; i < d_in; ++i) s += x[r * d_in + i] * w[f * d_in + i];
      phi[r * d_feat + f] = s;
    }
  return phi;
}

GateResult make_gate(std::string name, double worst, double tol, std::string detail = "") {
  return GateResult{std::move(name), worst, tol, worst < tol, std::move(detail)};
}

}  // namespace

RidgeFamily make_ridge_family(std::uint64_t seed, std::size_t d_in, std::size_t d_feat,
                              std::size_t n_support, std::size_t n_query, double lambda,
                              double noise_std) {
  if (!(lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
  Rng rng(derive_seed(seed, "oracle/ridge"));
  RidgeFamily f;
  f.d_in = d_in;
  f.d_feat = d_feat;
  f.lambda = lambda;
  f.noise_std = noise_std;
  f.w = normal_tensor({d_feat, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
  f.beta = normal_tensor({d_in, 1}, rng, 1.0);
  auto draw = [&](std::size_t n, Tensor<double>& x, Tensor<double>& y) {
    x = normal_tensor({n, d_in}, rng, 1.0);
    y = Tensor<double>(Shape{n, 1});
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < d_in; ++i) s += x[r * d_in + i] * f.beta[i];
      y[r] = s + noise_std * rng.normal();
    }
  };
  draw(n_support, f.task.x_support, f.task.y_support);
  draw(n_query, f.task.x_query, f.task.y_query);
  return f;
}

Tensor<double> solve_linear(Tensor<double> a, Tensor<double> b) {
  const std::size_t n = a.dim(0);
  if (a.rank() != 2 || a.dim(1) != n || b.numel() != n) {
    throw DimensionError("solve_linear: expected [n,n] and [n,1], got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  const double tiny = 1e-13 * std::max(scale, 1e-300);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (!(std::abs(a[piv * n + col]) > tiny)) {
      throw ConditioningError("solve_linear: pivot " + std::to_string(a[piv * n + col]) +
                              " in column " + std::to_string(col) + " is numerically zero");
    }
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double m = a[r * n + col] / a[col * n + col];
      if (m == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= m * a[col * n + c];
      b[r] -= m * b[col];
    }
  }
  Tensor<double> x(Shape{n, 1});
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t c = k + 1; c < n; ++c) s -= a[k * n + c] * x[c];
    x[k] = s / a[k * n + k];
  }
  return x;
}

Tensor<double> closed_form_inner(const Tensor<double>& x, const Tensor<double>& y,
                                 const Tensor<double>& w, double lambda) {
  if (!(lambda > 0.0)) throw ContractError("closed_form_inner: lambda must be positive");
  const Tensor<double> phi = features(x, w);
  const std::size_t n = phi.dim(0), d = phi.dim(1);
  if (y.numel() != n) throw DimensionError("closed_form_inner: target count mismatch");
  Tensor<double> a(Shape{d, d});
  Tensor<double> b(Shape{d, 1});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < n; ++r) s += phi[r * d + i] * phi[r * d + j];
      a[i * d + j] = s + (i == j ? lambda : 0.0);
    }
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) s += phi[r * d + i] * y[r];
    b[i] = s;
  }
  return solve_linear(std::move(a), std::move(b));
}

double ridge_query_loss(const Tensor<double>& x, const Tensor<double>& y, const Tensor<double>& w,
                        const Tensor<double>& theta) {
  const Tensor<double> phi = features(x, w);
  const std::size_t n = phi.dim(0), d = phi.dim(1);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double p = 0.0;
    for (std::size_t f = 0; f < d; ++f) p += phi[r * d + f] * theta[f];
    loss += 0.5 * (p - y[r]) * (p - y[r]);
  }
  return loss;
}

Tensor<double> fd_meta_gradient(const RidgeFamily& family, double eps) {
  if (!(eps > 0.0)) throw ContractError("fd_meta_gradient: eps must be positive");
  const RidgeTask& t = family.task;
  const Tensor<double> theta = closed_form_inner(t.x_support, t.y_support, family.w, family.lambda);
  Tensor<double> grad(family.w.shape());
  Tensor<double> w = family.w;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double orig = w[i];
    w[i] = orig + eps;
    const double up = ridge_query_loss(t.x_query, t.y_query, w, theta);
    w[i] = orig - eps;
    const double down = ridge_query_loss(t.x_query, t.y_query, w, theta);
    w[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

Tensor<double> brute_force_dropout_expectation(const Tensor<double>& activation, double keep_prob) {
  const std::size_t n = activation.numel();
  if (n > 12) {
    throw ContractError("brute_force_dropout_expectation: " + std::to_string(n) +
                        " elements exceeds the enumeration limit of 12");
  }
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ContractError("brute_force_dropout_expectation: keep_prob must lie in (0, 1]");
  }
  const double scale = inverted_dropout_scale(keep_prob);
  Tensor<double> out(activation.shape());
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    double p = 1.0;
    for (std::size_t i = 0; i < n; ++i) p *= (mask >> i) & 1u ? keep_prob : 1.0 - keep_prob;
    if (p == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i)
      if ((mask >> i) & 1u) out[i] += p * (activation[i] * scale);
  }
  return out;
}

double norm_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor) {
  if (a.shape() != b.shape()) throw DimensionError("norm_relative_error: shape mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

namespace {

// Distance of the nearest non-differentiable point of the backbone: the
// smallest |relu input| and the smallest gap between the two largest positive
// entries of a pooling window.
double kink_margin(const Network<double>& net, const Tensor<double>& images) {
  Tape<double> tape;
  const ParamVars vars = net.bind_all(tape);
  Var x = tape.constant(images);
  double margin = std::numeric_limits<double>::infinity();
  for (const char* name : {"conv1", "conv2", "conv3", "conv4"}) {
    const std::string n(name);
    x = conv2d(tape, x, vars.at(n + ".weight"), vars.at(n + ".bias"), 1, 1);
    for (double z : tape.value(x).data()) margin = std::min(margin, std::abs(z));
    x = relu(tape, x);
    const Tensor<double>& a = tape.value(x);
    const std::size_t planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i + 1 < h; i += 2)
        for (std::size_t j = 0; j + 1 < w; j += 2) {
          std::array<double, 4> v{};
          for (std::size_t k = 0; k < 4; ++k) v[k] = a[(p * h + i + k / 2) * w + j + k % 2];
          std::sort(v.begin(), v.end(), std::greater<>());
          if (v[0] > 0.0) margin = std::min(margin, v[0] - v[1]);
        }
    x = maxpool2(tape, x);
  }
  return margin;
}

// A cosine head is blind to the length of the feature vector, so a sample
// with a single active feature gives the backbone an exactly zero gradient.
bool features_span(const Network<double>& net, const Tensor<double>& images) {
  Tape<double> tape;
  const Var f = net.features(tape, net.bind_all(tape), tape.constant(images), {});
  const Tensor<double>& v = tape.value(f);
  const std::size_t n = v.dim(0), d = v.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t active = 0;
    for (std::size_t k = 0; k < d; ++k) active += v[r * d + k] > 0.0 ? 1 : 0;
    if (active < 2) return false;
  }
  return true;
}

}  // namespace

double conv4_gradient_check(std::uint64_t seed, double eps) {
  NetworkSpec spec;
  spec.widths = {2, 3, 4, 6};
  spec.input_shape = {1, 16, 16};
  spec.n_classes = 3;
  spec.head = seed % 2 == 0 ? HeadKind::Linear : HeadKind::Cosine;

  // Central differences are only meaningful away from kinks, so the instance
  // is redrawn until every kink is at least 10 eps away and every sample keeps
  // two live features.
  Network<double> net;
  Tensor<double> images(Shape{2, 1, 16, 16});
  std::vector<int> labels;
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt == 1000) throw ContractError("conv4_gradient_check: no kink-free instance found");
    net = Network<double>::build_conv4(spec, derive_seed(seed, "oracle/gradcheck-net", attempt));
    Rng rng(derive_seed(seed, "oracle/gradcheck", attempt));
    for (std::size_t i = 0; i < images.numel(); ++i) images[i] = rng.uniform();
    labels = {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
    if (kink_margin(net, images) > 10.0 * eps && features_span(net, images)) break;
  }

  auto loss_with = [&](const ParamStore<double>& params) {
    Tape<double> tape;
    ParamVars vars;
    for (const auto& [id, t] : params) vars.emplace(id, tape.parameter(id, t));
    const Var loss = softmax_cross_entropy(tape, net.forward(tape, vars, images, {}), labels);
    return std::pair{tape.value(loss).item(), tape.backward(loss)};
  };
  const Gradients<double> analytic = loss_with(net.params()).second;

  double worst = 0.0;
  for (const auto& [id, value] : net.params()) {
    auto f = [&, id = id](const Tensor<double>& x) {
      ParamStore<double> p = net.params();
      p.at(id) = x;
      return loss_with(p).first;
    };
    worst = std::max(worst, max_relative_error(analytic.at(id), finite_diff_grad(f, value, eps), 1e-6));
  }
  return worst;
}

double safe_inner_lr(const RidgeFamily& family) {
  const Tensor<double> phi = features(family.task.x_support, family.w);
  double fro = 0.0;
  for (double v : phi.data()) fro += v * v;
  return 1.0 / (fro + family.lambda);
}

Tensor<double> trainer_inner_solution(const RidgeFamily& family, std::size_t steps, double lr) {
  ParamStore<double> params;
  params.emplace(ridge::kW, family.w);
  params.emplace(ridge::kTheta, Tensor<double>(Shape{family.d_feat, 1}));
  const auto loss = ridge::task_loss(family.task.x_support, family.task.y_support, family.lambda);
  return inner_adapt<double>(params, {ridge::kTheta}, loss, steps, lr).at(ridge::kTheta);
}

Tensor<double> trainer_meta_gradient(const RidgeFamily& family, const Tensor<double>& theta) {
  ParamStore<double> params;
  params.emplace(ridge::kW, family.w);
  params.emplace(ridge::kTheta, theta);
  const auto loss = ridge::query_loss(family.task.x_query, family.task.y_query);
  return first_order_meta_gradient<double>(params, {ridge::kW}, loss).at(ridge::kW);
}

namespace {

// Steps until the inner iteration has contracted the initial error by 1e-14.
std::size_t convergence_steps(const RidgeFamily& f, double lr) {
  const double rate = 1.0 - lr * f.lambda;
  const auto steps = static_cast<std::size_t>(std::ceil(std::log(1e-14) / std::log(rate)));
  return std::clamp<std::size_t>(steps, 100, 10000);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

GateResult dropout_gate() {
  double worst = 0.0;
  Rng rng(derive_seed(0, "oracle/dropout"));
  for (double keep : {0.3, 0.7, 0.9}) {
    Tensor<double> a(Shape{10});
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = 4.0 * rng.uniform() - 2.0;
    worst = std::max(worst, max_abs_diff(brute_force_dropout_expectation(a, keep), a));
  }
  const Tensor<double> pair(Shape{2}, std::vector<double>{2.0, -4.0});
  worst = std::max(worst, max_abs_diff(brute_force_dropout_expectation(pair, 0.5), pair));
  return make_gate("dropout_expectation", worst, 1e-12, "max abs error, keep in {0.3, 0.5, 0.7, 0.9}");
}

}  // namespace

bool GateReport::passed() const {
  return std::all_of(gates.begin(), gates.end(), [](const GateResult& g) { return g.passed; });
}

std::string GateReport::text() const {
  std::ostringstream os;
  for (const GateResult& g : gates) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-4s %-22s worst=%.3e tol=%.1e", g.passed ? "ok" : "FAIL",
                  g.name.c_str(), g.worst, g.tolerance);
    os << buf;
    if (!g.detail.empty()) os << "  (" << g.detail << ")";
    os << "\n";
  }
  return os.str();
}

GateReport run_gates(const Faults& faults) {
  GateReport report;
  report.gates.push_back(dropout_gate());

  double cf_worst = 0.0, fixed_worst = 0.0, meta_worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RidgeFamily fam = make_ridge_family(s);
    const Tensor<double> closed =
        closed_form_inner(fam.task.x_support, fam.task.y_support, fam.w, fam.lambda);
    const double lr = safe_inner_lr(fam);
    const Tensor<double> theta = trainer_inner_solution(fam, convergence_steps(fam, lr), lr);
    cf_worst = std::max(cf_worst, max_abs_diff(theta, closed));

    // One more inner step from the closed form must not move it.
    ParamStore<double> at_closed;
    at_closed.emplace(ridge::kW, fam.w);
    at_closed.emplace(ridge::kTheta, closed);
    const auto step = inner_adapt<double>(
        at_closed, {ridge::kTheta},
        ridge::task_loss(fam.task.x_support, fam.task.y_support, fam.lambda), 1, 1e-3);
    fixed_worst = std::max(fixed_worst, max_abs_diff(step.at(ridge::kTheta), closed));

    Tensor<double> analytic = trainer_meta_gradient(fam, theta);
    if (faults.flip_meta_gradient_sign)
      for (std::size_t i = 0; i < analytic.numel(); ++i) analytic[i] = -analytic[i];
    meta_worst = std::max(meta_worst, norm_relative_error(analytic, fd_meta_gradient(fam, 1e-5)));
  }
  report.gates.push_back(make_gate("closed_form_vs_inner", cf_worst, 1e-6, "max abs, 20 families"));
  report.gates.push_back(make_gate("inner_fixed_point", fixed_worst, 1e-8, "one step at lr 1e-3"));
  report.gates.push_back(make_gate("fd_meta_gradient", meta_worst, 1e-5, "rel. err, 20 families"));

  double grad_worst = 0.0;
  for (std::uint64_t s = 0; s < 2; ++s) grad_worst = std::max(grad_worst, conv4_gradient_check(s));
  report.gates.push_back(make_gate("conv4_gradient", grad_worst, 1e-4, "max rel. err, 2 seeds"));
  return report;
}

}  // namespace fsml::oracle
