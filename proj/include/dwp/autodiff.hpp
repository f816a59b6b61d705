#pragma once

// Tape-based reverse-mode autodiff over Tensor<T>. Graph construction and
// backward are single-threaded per training step; the compute kernels under
// an op may be data-parallel (see kernels.hpp) without changing results.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dwp/kernels.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline bool& grad_enabled() {
  static thread_local bool enabled = true;
  return enabled;
}

// RAII guard that disables graph recording (evaluation paths).
struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev_; }

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.defined(); }
  void zero_grad() {
    if (node_->grad.defined())
      for (std::int64_t i = 0; i < node_->grad.numel(); ++i) node_->grad[i] = T(0);
  }
  T item() const {
    if (node_->value.numel() != 1) throw ShapeError("item: tensor is not scalar");
    return node_->value[0];
  }
  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericalError(std::string("non-finite values after op ") + op);
#else
  (void)t;
  (void)op;
#endif
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
Var<T> make_op(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  detail::check_finite(value, op);
  Var<T> out(std::move(value));
  bool need = false;
  if (grad_enabled())
    for (const auto& p : parents) need = need || p.requires_grad();
  if (need) {
    out.node()->requires_grad = true;
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward = std::move(backward);
  }
  return out;
}

// Runs reverse-mode accumulation from a scalar root. Every reachable node is
// visited exactly once, in reverse topological order.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) throw ShapeError("backward: root must be scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.defined()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a.value(), b.value());
  Tensor<T> v = a.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] += b.value()[i];
  return make_op<T>("add", std::move(v), {a, b}, [](Node<T>& n) {
    for (int p = 0; p < 2; ++p)
      if (n.parents[p]->requires_grad) detail::accumulate(n.parents[p]->ensure_grad(), n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> v = a.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] -= b.value()[i];
  return make_op<T>("sub", std::move(v), {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad) detail::accumulate(n.parents[0]->ensure_grad(), n.grad);
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor<T> v = a.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] *= b.value()[i];
  return make_op<T>("mul", std::move(v), {a, b}, [](Node<T>& n) {
    auto& av = n.parents[0]->value;
    auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

// Elementwise a*x + b with scalar constants.
template <class T>
Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> v = x.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = a * v[i] + b;
  return make_op<T>("affine", std::move(v), {x}, [a](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += a * n.grad[i];
  });
}

template <class T>
Var<T> neg(const Var<T>& x) {
  return affine(x, T(-1), T(0));
}

template <class T, class FwdFn, class GradFn>
Var<T> unary_map(const char* op, const Var<T>& x, FwdFn fwd, GradFn dfdx_from_xy) {
  Tensor<T> v = x.value();
  for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = fwd(v[i]);
  return make_op<T>(op, std::move(v), {x}, [dfdx_from_xy](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    auto& xv = n.parents[0]->value;
    auto& yv = n.value;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * dfdx_from_xy(xv[i], yv[i]);
  });
}

template <class T>
Var<T> exp_v(const Var<T>& x) {
  return unary_map(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log_v(const Var<T>& x) {
  return unary_map(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Var<T> sqrt_v(const Var<T>& x) {
  return unary_map(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <class T>
Var<T> sigmoid_v(const Var<T>& x) {
  return unary_map(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> softplus_v(const Var<T>& x) {
  return unary_map(
      "softplus", x,
      [](T v) { return v > T(30) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01)) {
  return unary_map(
      "leaky_relu", x, [slope](T v) { return v >= T(0) ? v : slope * v; },
      [slope](T v, T) { return v >= T(0) ? T(1) : slope; });
}

template <class T>
Var<T> elu(const Var<T>& x) {
  return unary_map(
      "elu", x, [](T v) { return v >= T(0) ? v : std::expm1(v); },
      [](T v, T y) { return v >= T(0) ? T(1) : y + T(1); });
}

// Hard clamp; gradient is 1 strictly inside [lo, hi], 0 outside.
template <class T>
Var<T> clamp_v(const Var<T>& x, T lo, T hi) {
  return unary_map(
      "clamp", x, [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions / shape
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (std::int64_t i = 0; i < x.value().numel(); ++i) s += x.value()[i];
  return make_op<T>("sum", Tensor<T>::scalar(s), {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const T go = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += go;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return affine(sum(x), T(1) / static_cast<T>(x.value().numel()), T(0));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> v = x.value().reshaped(std::move(shape));
  return make_op<T>("reshape", std::move(v), {x}, [](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& as = a.value().shape();
  const auto& bs = b.value().shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw ShapeError("matmul: incompatible " + shape_str(as) + " x " + shape_str(bs));
  const std::int64_t m = as[0], k = as[1], n = bs[1];
  Tensor<T> v({m, n});
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), v.data());
  return make_op<T>("matmul", std::move(v), {a, b}, [m, k, n](Node<T>& n_) {
    if (n_.parents[0]->requires_grad)  // dA += dC * B^T
      kernels::gemm_nt<T, true>(m, n, k, n_.grad.data(), n_.parents[1]->value.data(),
                                n_.parents[0]->ensure_grad().data());
    if (n_.parents[1]->requires_grad)  // dB += A^T * dC
      kernels::gemm_tn<T, true>(k, m, n, n_.parents[0]->value.data(), n_.grad.data(),
                                n_.parents[1]->ensure_grad().data());
  });
}

// x (N,in) * w^T (in,out) + b (out)
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.value().shape();
  const auto& ws = w.value().shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw ShapeError("linear: incompatible input " + shape_str(xs) + " weight " + shape_str(ws));
  if (b.value().numel() != ws[0]) throw ShapeError("linear: bias size mismatch");
  const std::int64_t N = xs[0], in = xs[1], out = ws[0];
  Tensor<T> v({N, out});
  kernels::gemm_nt(N, in, out, x.value().data(), w.value().data(), v.data());
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < out; ++j) v[i * out + j] += b.value()[j];
  return make_op<T>("linear", std::move(v), {x, w, b}, [N, in, out](Node<T>& n_) {
    if (n_.parents[0]->requires_grad)  // dX += dY * W
      kernels::gemm_nn<T, true>(N, out, in, n_.grad.data(), n_.parents[1]->value.data(),
                                n_.parents[0]->ensure_grad().data());
    if (n_.parents[1]->requires_grad)  // dW += dY^T * X
      kernels::gemm_tn<T, true>(out, N, in, n_.grad.data(), n_.parents[0]->value.data(),
                                n_.parents[1]->ensure_grad().data());
    if (n_.parents[2]->requires_grad) {
      auto& g = n_.parents[2]->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < out; ++j) g[j] += n_.grad[i * out + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + gemm)
// ---------------------------------------------------------------------------

namespace conv {

// x (N,C,H,W), k (O,C,kh,kw) -> y (N,O,oh,ow)
template <class T>
Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& k, std::int64_t stride, std::int64_t pad) {
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != C)
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(k.shape()));
  const std::int64_t oh = kernels::conv_out_extent(H, kh, stride, pad);
  const std::int64_t ow = kernels::conv_out_extent(W, kw, stride, pad);
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " too large for input " +
                     shape_str(x.shape()));
  const std::int64_t ckk = C * kh * kw;
  Tensor<T> y({N, O, oh, ow});
  std::vector<T> cols(static_cast<std::size_t>(ckk * oh * ow));
  for (std::int64_t n = 0; n < N; ++n) {
    kernels::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, cols.data());
    kernels::gemm_nn(O, ckk, oh * ow, k.data(), cols.data(), y.data() + n * O * oh * ow);
  }
  return y;
}

// Adjoint w.r.t. input: dy (N,O,oh,ow), k (O,C,kh,kw) -> dx (N,C,H,W)
template <class T>
Tensor<T> backward_input(const Tensor<T>& dy, const Tensor<T>& k, std::int64_t stride,
                         std::int64_t pad, std::int64_t H, std::int64_t W) {
  const std::int64_t N = dy.dim(0), O = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const std::int64_t C = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const std::int64_t ckk = C * kh * kw;
  Tensor<T> dx({N, C, H, W});
  std::vector<T> dcols(static_cast<std::size_t>(ckk * oh * ow));
  for (std::int64_t n = 0; n < N; ++n) {
    kernels::gemm_tn(ckk, O, oh * ow, k.data(), dy.data() + n * O * oh * ow, dcols.data());
    kernels::col2im(dcols.data(), C, H, W, kh, kw, stride, pad, dx.data() + n * C * H * W);
  }
  return dx;
}

// Adjoint w.r.t. kernel: x (N,C,H,W), dy (N,O,oh,ow) -> dk (O,C,kh,kw), accumulated into dk.
template <class T>
void backward_kernel_acc(const Tensor<T>& x, const Tensor<T>& dy, std::int64_t stride,
                         std::int64_t pad, std::int64_t kh, std::int64_t kw, Tensor<T>& dk) {
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const std::int64_t ckk = C * kh * kw;
  std::vector<T> cols(static_cast<std::size_t>(ckk * oh * ow));
  for (std::int64_t n = 0; n < N; ++n) {
    kernels::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, cols.data());
    kernels::gemm_nt<T, true>(O, oh * ow, ckk, dy.data() + n * O * oh * ow, cols.data(),
                              dk.data());
  }
}

}  // namespace conv

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, std::int64_t stride = 1, std::int64_t pad = 0) {
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/padding");
  Tensor<T> y = conv::forward(x.value(), k.value(), stride, pad);
  const std::int64_t H = x.value().dim(2), W = x.value().dim(3);
  const std::int64_t kh = k.value().dim(2), kw = k.value().dim(3);
  return make_op<T>("conv2d", std::move(y), {x, k}, [stride, pad, H, W, kh, kw](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      Tensor<T> dx = conv::backward_input(n.grad, n.parents[1]->value, stride, pad, H, W);
      detail::accumulate(n.parents[0]->ensure_grad(), dx);
    }
    if (n.parents[1]->requires_grad)
      conv::backward_kernel_acc(n.parents[0]->value, n.grad, stride, pad, kh, kw,
                                n.parents[1]->ensure_grad());
  });
}

// Transposed convolution; kernel layout (Cin, Cout, kh, kw).
// Forward is the adjoint of conv2d by construction.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& k, std::int64_t stride = 1,
                        std::int64_t pad = 0) {
  if (stride < 1 || pad < 0) throw ShapeError("conv_transpose2d: bad stride/padding");
  const auto& xs = x.value().shape();
  const auto& ks = k.value().shape();
  if (xs.size() != 4 || ks.size() != 4 || xs[1] != ks[0])
    throw ShapeError("conv_transpose2d: input " + shape_str(xs) + " vs kernel " + shape_str(ks));
  const std::int64_t H = (xs[2] - 1) * stride - 2 * pad + ks[2];
  const std::int64_t W = (xs[3] - 1) * stride - 2 * pad + ks[3];
  if (H <= 0 || W <= 0) throw ShapeError("conv_transpose2d: empty output");
  Tensor<T> y = conv::backward_input(x.value(), k.value(), stride, pad, H, W);
  const std::int64_t kh = ks[2], kw = ks[3];
  return make_op<T>("conv_transpose2d", std::move(y), {x, k},
                    [stride, pad, kh, kw](Node<T>& n) {
                      if (n.parents[0]->requires_grad) {
                        Tensor<T> dx = conv::forward(n.grad, n.parents[1]->value, stride, pad);
                        detail::accumulate(n.parents[0]->ensure_grad(), dx);
                      }
                      if (n.parents[1]->requires_grad)
                        conv::backward_kernel_acc(n.grad, n.parents[0]->value, stride, pad, kh,
                                                  kw, n.parents[1]->ensure_grad());
                    });
}

// Per-channel bias add on (N,C,H,W).
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  const auto& xs = x.value().shape();
  if (xs.size() != 4 || b.value().numel() != xs[1])
    throw ShapeError("add_channel_bias: input " + shape_str(xs) + " bias " +
                     shape_str(b.value().shape()));
  Tensor<T> v = x.value();
  const std::int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      T* p = v.data() + (n * C + c) * HW;
      const T bc = b.value()[c];
      for (std::int64_t i = 0; i < HW; ++i) p[i] += bc;
    }
  return make_op<T>("add_channel_bias", std::move(v), {x, b}, [N, C, HW](Node<T>& n_) {
    if (n_.parents[0]->requires_grad) detail::accumulate(n_.parents[0]->ensure_grad(), n_.grad);
    if (n_.parents[1]->requires_grad) {
      auto& g = n_.parents[1]->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const T* p = n_.grad.data() + (n * C + c) * HW;
          T s = 0;
          for (std::int64_t i = 0; i < HW; ++i) s += p[i];
          g[c] += s;
        }
    }
  });
}

// 2x2 max pooling with stride 2; gradient routes to the argmax position only.
template <class T>
Var<T> maxpool2x2(const Var<T>& x) {
  const auto& xs = x.value().shape();
  if (xs.size() != 4 || xs[2] < 2 || xs[3] < 2)
    throw ShapeError("maxpool2x2: bad input " + shape_str(xs));
  const std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::int64_t oh = H / 2, ow = W / 2;
  Tensor<T> y({N, C, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(N * C * oh * ow));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* in = x.value().data() + nc * H * W;
    T* out = y.data() + nc * oh * ow;
    std::int64_t* am = argmax->data() + nc * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t best = (2 * i) * W + 2 * j;
        T bv = in[best];
        const std::int64_t cand[3] = {(2 * i) * W + 2 * j + 1, (2 * i + 1) * W + 2 * j,
                                      (2 * i + 1) * W + 2 * j + 1};
        for (auto c : cand)
          if (in[c] > bv) {
            bv = in[c];
            best = c;
          }
        out[i * ow + j] = bv;
        am[i * ow + j] = nc * H * W + best;
      }
  }
  return make_op<T>("maxpool2x2", std::move(y), {x}, [argmax](Node<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[(*argmax)[i]] += n.grad[i];
  });
}

// Summed cross-entropy: sum_i -log softmax(logits_i)[label_i].
template <class T>
Var<T> cross_entropy_sum(const Var<T>& logits, const std::vector<std::int64_t>& labels) {
  const auto& ls = logits.value().shape();
  if (ls.size() != 2 || static_cast<std::size_t>(ls[0]) != labels.size())
    throw ShapeError("cross_entropy_sum: logits " + shape_str(ls) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::int64_t N = ls[0], C = ls[1];
  auto softmax = std::make_shared<Tensor<T>>(Tensor<T>({N, C}));
  T loss = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    const T* row = logits.value().data() + i * C;
    T mx = row[0];
    for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    loss += lse - row[labels[static_cast<std::size_t>(i)]];
    for (std::int64_t j = 0; j < C; ++j)
      (*softmax)[i * C + j] = std::exp(row[j] - lse);
  }
  auto lbl = std::make_shared<std::vector<std::int64_t>>(labels);
  return make_op<T>("cross_entropy_sum", Tensor<T>::scalar(loss), {logits},
                    [softmax, lbl, N, C](Node<T>& n) {
                      auto& g = n.parents[0]->ensure_grad();
                      const T go = n.grad[0];
                      for (std::int64_t i = 0; i < N; ++i)
                        for (std::int64_t j = 0; j < C; ++j)
                          g[i * C + j] +=
                              go * ((*softmax)[i * C + j] -
                                    (j == (*lbl)[static_cast<std::size_t>(i)] ? T(1) : T(0)));
                    });
}

}  // namespace dwp
