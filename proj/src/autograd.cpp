#include "fsml/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kernels.hpp"

namespace fsml {

// ---------------------------------------------------------------- tape

template <class Real>
const typename Tape<Real>::Node& Tape<Real>::node(Var v) const {
  if (!v.valid() || v.index >= nodes_.size()) {
    throw ContractError("variable is not on this tape");
  }
  return nodes_[v.index];
}

template <class Real>
const Tensor<Real>& Tape<Real>::value(Var v) const {
  return node(v).value;
}

template <class Real>
Var Tape<Real>::constant(Tensor<Real> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Var Tape<Real>::parameter(const std::string& id, Tensor<Real> value) {
  for (const auto& [pid, _] : params_) {
    if (pid == id) throw ContractError("parameter '" + id + "' registered twice on a tape");
  }
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  Var v{static_cast<std::uint32_t>(nodes_.size() - 1)};
  params_.emplace_back(id, v);
  return v;
}

template <class Real>
Var Tape<Real>::record(const char* op, Tensor<Real> value, std::vector<Var> inputs,
                       BackwardFn backward) {
  if (!value.all_finite()) {
    throw ContractError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.value = std::move(value);
  n.backward = std::move(backward);
  for (Var in : inputs) {
    const Node& src = node(in);
    n.requires_grad = n.requires_grad || src.requires_grad;
    n.inputs.push_back(in.index);
  }
  if (!n.requires_grad) n.backward = nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class Real>
Gradients<Real> Tape<Real>::backward(Var loss) const {
  const Node& root = node(loss);
  if (root.value.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(root.value.shape()));
  }
  std::vector<Tensor<Real>> grads(loss.index + 1);
  grads[loss.index] = Tensor<Real>(root.value.shape(), Real(1));
  std::vector<Tensor<Real>*> slots;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (grads[i].empty() || !n.backward) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::uint32_t in = n.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (grads[in].empty()) grads[in] = Tensor<Real>(nodes_[in].value.shape(), Real(0));
      slots[k] = &grads[in];
    }
    n.backward(grads[i], slots);
    // intermediate gradients are not needed once propagated
    if (!n.inputs.empty()) grads[i] = Tensor<Real>();
  }
  Gradients<Real> out;
  for (const auto& [id, v] : params_) {
    if (v.index <= loss.index && !grads[v.index].empty()) {
      out.emplace(id, std::move(grads[v.index]));
    } else {
      out.emplace(id, Tensor<Real>(nodes_[v.index].value.shape(), Real(0)));
    }
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------- ops

namespace {

template <class Real>
void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class Real>
void require_rank(const char* op, const Tensor<Real>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(a.shape()));
  }
}

}  // namespace

template <class Real>
Var matmul(Tape<Real>& t, Var a, Var b) {
  const Tensor<Real>& av = t.value(a);
  const Tensor<Real>& bv = t.value(b);
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Tensor<Real> c(Shape{m, n});
  kernels::gemm_acc(m, k, n, av.data().data(), bv.data().data(), c.data().data());
  return t.record("matmul", std::move(c), {a, b},
                  [&t, a, b, m, k, n](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Real* A = t.value(a).data().data();
                    const Real* B = t.value(b).data().data();
                    // dA = G B^T, dB = A^T G
                    if (gi[0]) kernels::gemm_nt_acc(m, n, k, g.data().data(), B, gi[0]->data().data());
                    if (gi[1]) kernels::gemm_tn_acc(k, m, n, A, g.data().data(), gi[1]->data().data());
                  });
}

template <class Real>
Var transpose(Tape<Real>& t, Var a) {
  const Tensor<Real>& av = t.value(a);
  require_rank("transpose", av, 2);
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<Real> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return t.record("transpose", std::move(out), {a},
                  [r, c](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[j * r + i];
                  });
}

template <class Real>
Var add(Tape<Real>& t, Var a, Var b) {
  const Tensor<Real>& av = t.value(a);
  const Tensor<Real>& bv = t.value(b);
  require_same_shape("add", av, bv);
  Tensor<Real> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return t.record("add", std::move(out), {a, b},
                  [](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (Tensor<Real>* dst : gi) {
                      if (!dst) continue;
                      for (std::size_t i = 0; i < g.numel(); ++i) (*dst)[i] += g[i];
                    }
                  });
}

template <class Real>
Var sub(Tape<Real>& t, Var a, Var b) {
  const Tensor<Real>& av = t.value(a);
  const Tensor<Real>& bv = t.value(b);
  require_same_shape("sub", av, bv);
  Tensor<Real> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return t.record("sub", std::move(out), {a, b},
                  [](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    if (gi[0])
                      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[i] -= g[i];
                  });
}

template <class Real>
Var mul(Tape<Real>& t, Var a, Var b) {
  const Tensor<Real>& av = t.value(a);
  const Tensor<Real>& bv = t.value(b);
  require_same_shape("mul", av, bv);
  Tensor<Real> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return t.record("mul", std::move(out), {a, b},
                  [&t, a, b](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Tensor<Real>& av = t.value(a);
                    const Tensor<Real>& bv = t.value(b);
                    if (gi[0])
                      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * bv[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[1])[i] += g[i] * av[i];
                  });
}

template <class Real>
Var scale(Tape<Real>& t, Var a, Real factor) {
  Tensor<Real> out = t.value(a);
  for (Real& v : out.data()) v *= factor;
  return t.record("scale", std::move(out), {a},
                  [factor](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * factor;
                  });
}

template <class Real>
Var square(Tape<Real>& t, Var a) {
  Tensor<Real> out = t.value(a);
  for (Real& v : out.data()) v *= v;
  return t.record("square", std::move(out), {a},
                  [&t, a](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Tensor<Real>& av = t.value(a);
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += Real(2) * av[i] * g[i];
                  });
}

template <class Real>
Var sum(Tape<Real>& t, Var a) {
  Real s = 0;
  for (Real v : t.value(a).data()) s += v;
  return t.record("sum", Tensor<Real>::scalar(s), {a},
                  [](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Real gv = g[0];
                    for (Real& v : gi[0]->data()) v += gv;
                  });
}

template <class Real>
Var add_row_bias(Tape<Real>& t, Var x, Var bias) {
  const Tensor<Real>& xv = t.value(x);
  const Tensor<Real>& bv = t.value(bias);
  require_rank("add_row_bias", xv, 2);
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(bv.shape()) + " does not fit " +
                         shape_str(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor<Real> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return t.record("add_row_bias", std::move(out), {x, bias},
                  [rows, cols](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    if (gi[0])
                      for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i];
                    if (gi[1])
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) (*gi[1])[c] += g[r * cols + c];
                  });
}

template <class Real>
Var reshape(Tape<Real>& t, Var a, Shape shape) {
  Tensor<Real> out = t.value(a).reshaped(std::move(shape));
  return t.record("reshape", std::move(out), {a},
                  [](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i];
                  });
}

template <class Real>
Var mul_mask(Tape<Real>& t, Var a, const Tensor<Real>& mask) {
  const Tensor<Real>& av = t.value(a);
  require_same_shape("mul_mask", av, mask);
  Tensor<Real> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  auto m = std::make_shared<const Tensor<Real>>(mask);
  return t.record("mul_mask", std::move(out), {a},
                  [m](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[i] += g[i] * (*m)[i];
                  });
}

template <class Real>
Var relu(Tape<Real>& t, Var x) {
  Tensor<Real> out = t.value(x);
  for (Real& v : out.data()) v = v > Real(0) ? v : Real(0);
  return t.record("relu", std::move(out), {x},
                  [&t, x](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Tensor<Real>& xv = t.value(x);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                      if (xv[i] > Real(0)) (*gi[0])[i] += g[i];
                  });
}

template <class Real>
Var conv2d(Tape<Real>& t, Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor<Real>& iv = t.value(input);
  const Tensor<Real>& kv = t.value(kernel);
  if (iv.rank() != 3 && iv.rank() != 4) {
    throw DimensionError("conv2d: input must be [c,h,w] or [B,c,h,w], got " +
                         shape_str(iv.shape()));
  }
  require_rank("conv2d", kv, 4);
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const bool batched = iv.rank() == 4;
  const std::size_t B = batched ? iv.dim(0) : 1;
  const std::size_t C = iv.dim(batched ? 1 : 0);
  const std::size_t H = iv.dim(batched ? 2 : 1);
  const std::size_t W = iv.dim(batched ? 3 : 2);
  const std::size_t O = kv.dim(0), KH = kv.dim(2), KW = kv.dim(3);
  if (kv.dim(1) != C) {
    throw DimensionError("conv2d: kernel " + shape_str(kv.shape()) + " does not match input " +
                         shape_str(iv.shape()));
  }
  if (KH > H + 2 * pad || KW > W + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_str(kv.shape()) +
                         " larger than padded input " + shape_str(iv.shape()) + " (pad " +
                         std::to_string(pad) + ")");
  }
  if (bias.valid()) {
    const Tensor<Real>& bv = t.value(bias);
    if (bv.rank() != 1 || bv.dim(0) != O) {
      throw DimensionError("conv2d: bias " + shape_str(bv.shape()) + " for " +
                           std::to_string(O) + " output channels");
    }
  }
  const std::size_t HO = (H + 2 * pad - KH) / stride + 1;
  const std::size_t WO = (W + 2 * pad - KW) / stride + 1;
  const std::size_t K = C * KH * KW;
  const std::size_t P = HO * WO;
  const std::size_t N = B * P;

  // im2col: cols[k, n] with k = (c, i, j) and n = (b, y, x)
  auto cols = std::make_shared<std::vector<Real>>(K * N, Real(0));
  const Real* in = iv.data().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < KH; ++i)
      for (std::size_t j = 0; j < KW; ++j) {
        Real* row = cols->data() + ((c * KH + i) * KW + j) * N;
        for (std::size_t b = 0; b < B; ++b) {
          const Real* plane = in + (b * C + c) * H * W;
          for (std::size_t y = 0; y < HO; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y * stride + i) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t x = 0; x < WO; ++x) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x * stride + j) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
              row[b * P + y * WO + x] = plane[sy * W + sx];
            }
          }
        }
      }

  std::vector<Real> y(O * N, Real(0));
  kernels::gemm_acc(O, K, N, kv.data().data(), cols->data(), y.data());

  Shape out_shape = batched ? Shape{B, O, HO, WO} : Shape{O, HO, WO};
  Tensor<Real> out(out_shape);
  const Real* bptr = bias.valid() ? t.value(bias).data().data() : nullptr;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const Real* src = y.data() + o * N + b * P;
      Real* dst = out.data().data() + (b * O + o) * P;
      const Real bo = bptr ? bptr[o] : Real(0);
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bo;
    }

  std::vector<Var> inputs{input, kernel};
  if (bias.valid()) inputs.push_back(bias);
  return t.record(
      "conv2d", std::move(out), std::move(inputs),
      [&t, kernel, cols, B, C, H, W, O, KH, KW, HO, WO, K, P, N, stride, pad](
          const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
        // regroup the output gradient as dy[o, n]
        std::vector<Real> dy(O * N);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t o = 0; o < O; ++o) {
            const Real* src = g.data().data() + (b * O + o) * P;
            std::copy(src, src + P, dy.data() + o * N + b * P);
          }
        if (gi.size() > 2 && gi[2]) {
          for (std::size_t o = 0; o < O; ++o) {
            Real s = 0;
            for (std::size_t n = 0; n < N; ++n) s += dy[o * N + n];
            (*gi[2])[o] += s;
          }
        }
        if (gi[1]) kernels::gemm_nt_acc(O, N, K, dy.data(), cols->data(), gi[1]->data().data());
        if (gi[0]) {
          std::vector<Real> dcols(K * N, Real(0));
          kernels::gemm_tn_acc(K, O, N, t.value(kernel).data().data(), dy.data(), dcols.data());
          Real* din = gi[0]->data().data();
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < KH; ++i)
              for (std::size_t j = 0; j < KW; ++j) {
                const Real* row = dcols.data() + ((c * KH + i) * KW + j) * N;
                for (std::size_t b = 0; b < B; ++b) {
                  Real* plane = din + (b * C + c) * H * W;
                  for (std::size_t y = 0; y < HO; ++y) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y * stride + i) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t x = 0; x < WO; ++x) {
                      const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x * stride + j) -
                                                static_cast<std::ptrdiff_t>(pad);
                      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                      plane[sy * W + sx] += row[b * P + y * WO + x];
                    }
                  }
                }
              }
        }
      });
}

template <class Real>
Var maxpool2(Tape<Real>& t, Var input) {
  const Tensor<Real>& iv = t.value(input);
  if (iv.rank() < 2) throw DimensionError("maxpool2: rank too small " + shape_str(iv.shape()));
  const std::size_t H = iv.dim(iv.rank() - 2), W = iv.dim(iv.rank() - 1);
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("maxpool2: spatial extents must be even, got " + shape_str(iv.shape()));
  }
  const std::size_t planes = iv.numel() / (H * W);
  const std::size_t HO = H / 2, WO = W / 2;
  Shape out_shape = iv.shape();
  out_shape[out_shape.size() - 2] = HO;
  out_shape[out_shape.size() - 1] = WO;
  Tensor<Real> out(out_shape);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = iv.data().data() + p * H * W;
    for (std::size_t y = 0; y < HO; ++y)
      for (std::size_t x = 0; x < WO; ++x) {
        // window visited in row-major order; strict > keeps the lowest index on ties
        std::size_t best = (2 * y) * W + 2 * x;
        const std::size_t cand[3] = {(2 * y) * W + 2 * x + 1, (2 * y + 1) * W + 2 * x,
                                     (2 * y + 1) * W + 2 * x + 1};
        for (std::size_t c : cand)
          if (src[c] > src[best]) best = c;
        const std::size_t o = (p * HO + y) * WO + x;
        out[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(p * H * W + best);
      }
  }
  return t.record("maxpool2", std::move(out), {input},
                  [argmax](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    for (std::size_t o = 0; o < g.numel(); ++o) (*gi[0])[(*argmax)[o]] += g[o];
                  });
}

template <class Real>
Var softmax_cross_entropy(Tape<Real>& t, Var logits, std::span<const int> targets) {
  const Tensor<Real>& lv = t.value(logits);
  require_rank("softmax_cross_entropy", lv, 2);
  const std::size_t B = lv.dim(0), C = lv.dim(1);
  if (targets.size() != B) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(lv.shape()));
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] < 0 || static_cast<std::size_t>(targets[b]) >= C) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[b]) +
                       " out of range [0, " + std::to_string(C) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<Real>>(B * C);
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  Real total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const Real* row = lv.data().data() + b * C;
    const Real mx = *std::max_element(row, row + C);
    Real z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const Real e = std::exp(row[c] - mx);
      (*probs)[b * C + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] /= z;
    total += std::log(z) - (row[targets[b]] - mx);
  }
  return t.record("softmax_cross_entropy", Tensor<Real>::scalar(total / static_cast<Real>(B)),
                  {logits},
                  [probs, tg, B, C](const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
                    const Real s = g[0] / static_cast<Real>(B);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c) {
                        const Real onehot = static_cast<int>(c) == (*tg)[b] ? Real(1) : Real(0);
                        (*gi[0])[b * C + c] += s * ((*probs)[b * C + c] - onehot);
                      }
                  });
}

template <class Real>
Var cosine_logits(Tape<Real>& t, Var features, Var class_vectors, Real scale) {
  const Tensor<Real>& fv = t.value(features);
  const Tensor<Real>& vv = t.value(class_vectors);
  require_rank("cosine_logits", fv, 2);
  require_rank("cosine_logits", vv, 2);
  const std::size_t B = fv.dim(0), C = vv.dim(0), D = fv.dim(1);
  if (vv.dim(1) != D) {
    throw DimensionError("cosine_logits: features " + shape_str(fv.shape()) +
                         " vs class vectors " + shape_str(vv.shape()));
  }
  const Real eps = static_cast<Real>(kCosineNormEps);
  auto fnorm = std::make_shared<std::vector<Real>>(B);
  auto vnorm = std::make_shared<std::vector<Real>>(C);
  for (std::size_t b = 0; b < B; ++b) {
    const Real* f = fv.data().data() + b * D;
    (*fnorm)[b] = std::sqrt(kernels::dot(f, f, D));
  }
  for (std::size_t c = 0; c < C; ++c) {
    const Real* v = vv.data().data() + c * D;
    (*vnorm)[c] = std::sqrt(kernels::dot(v, v, D));
  }
  Tensor<Real> out(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const Real d = kernels::dot(fv.data().data() + b * D, vv.data().data() + c * D, D);
      out[b * C + c] = scale * d / (((*fnorm)[b] + eps) * ((*vnorm)[c] + eps));
    }
  return t.record(
      "cosine_logits", std::move(out), {features, class_vectors},
      [&t, features, class_vectors, fnorm, vnorm, B, C, D, scale, eps](
          const Tensor<Real>& g, std::span<Tensor<Real>* const> gi) {
        const Real* F = t.value(features).data().data();
        const Real* V = t.value(class_vectors).data().data();
        // d/dx (x/(|x|+eps)) . u = u/(|x|+eps) - (x.u) x / (|x| (|x|+eps)^2)
        auto project = [D](const Real* x, Real norm, Real eps, const std::vector<Real>& u,
                           Real s, Real* dst) {
          const Real a = norm + eps;
          const Real xu = kernels::dot(x, u.data(), D);
          const Real radial = norm > Real(0) ? xu / (norm * a * a) : Real(0);
          for (std::size_t k = 0; k < D; ++k) dst[k] += s * (u[k] / a - radial * x[k]);
        };
        std::vector<Real> u(D);
        if (gi[0]) {
          for (std::size_t b = 0; b < B; ++b) {
            std::fill(u.begin(), u.end(), Real(0));
            for (std::size_t c = 0; c < C; ++c) {
              const Real w = g[b * C + c] / ((*vnorm)[c] + eps);
              for (std::size_t k = 0; k < D; ++k) u[k] += w * V[c * D + k];
            }
            project(F + b * D, (*fnorm)[b], eps, u, scale, gi[0]->data().data() + b * D);
          }
        }
        if (gi[1]) {
          for (std::size_t c = 0; c < C; ++c) {
            std::fill(u.begin(), u.end(), Real(0));
            for (std::size_t b = 0; b < B; ++b) {
              const Real w = g[b * C + c] / ((*fnorm)[b] + eps);
              for (std::size_t k = 0; k < D; ++k) u[k] += w * F[b * D + k];
            }
            project(V + c * D, (*vnorm)[c], eps, u, scale, gi[1]->data().data() + c * D);
          }
        }
      });
}

#define FSML_INSTANTIATE_OPS(R)                                                          \
  template Var matmul<R>(Tape<R>&, Var, Var);                                            \
  template Var transpose<R>(Tape<R>&, Var);                                              \
  template Var add<R>(Tape<R>&, Var, Var);                                               \
  template Var sub<R>(Tape<R>&, Var, Var);                                               \
  template Var mul<R>(Tape<R>&, Var, Var);                                               \
  template Var scale<R>(Tape<R>&, Var, R);                                               \
  template Var square<R>(Tape<R>&, Var);                                                 \
  template Var sum<R>(Tape<R>&, Var);                                                    \
  template Var add_row_bias<R>(Tape<R>&, Var, Var);                                      \
  template Var reshape<R>(Tape<R>&, Var, Shape);                                         \
  template Var mul_mask<R>(Tape<R>&, Var, const Tensor<R>&);                             \
  template Var relu<R>(Tape<R>&, Var);                                                   \
  template Var conv2d<R>(Tape<R>&, Var, Var, Var, std::size_t, std::size_t);            \
  template Var maxpool2<R>(Tape<R>&, Var);                                               \
  template Var softmax_cross_entropy<R>(Tape<R>&, Var, std::span<const int>);            \
  template Var cosine_logits<R>(Tape<R>&, Var, Var, R);

FSML_INSTANTIATE_OPS(float)
FSML_INSTANTIATE_OPS(double)

}  // namespace fsml
