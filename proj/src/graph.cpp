#include "codednet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace codednet::autodiff {

template <typename T>
void Graph<T>::check(Var v, const char* op) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::invalid_argument(std::string(op) + ": invalid Var");
}

template <typename T>
bool Graph<T>::needs(Var v) const {
  return nodes_[static_cast<std::size_t>(v.id)].needs_grad;
}

template <typename T>
typename Graph<T>::Var Graph<T>::make(Tensor<T> value, bool needs_grad,
                                      std::function<void()> pull) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.pull = needs_grad ? std::move(pull) : std::function<void()>();
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
typename Graph<T>::Var Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  return make(std::move(value), requires_grad, {});
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  check(v, "value");
  return nodes_[static_cast<std::size_t>(v.id)].value;
}

template <typename T>
Tensor<T>& Graph<T>::grad_ref(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.reached) {
    n.grad = Tensor<T>::zeros(n.value.shape);
    n.reached = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) {
  check(v, "grad");
  return grad_ref(v.id);
}

template <typename T>
void Graph<T>::backward(Var output) {
  check(output, "backward");
  if (value(output).numel() != 1)
    throw std::invalid_argument("backward: output must be scalar");
  for (Node& n : nodes_) n.reached = false;
  grad_ref(output.id).data[0] = T(1);
  for (std::int32_t id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.reached && n.pull) n.pull();
  }
}

// ---------- elementwise binary ----------

template <typename T>
typename Graph<T>::Var Graph<T>::add(Var a, Var b) {
  check(a, "add");
  check(b, "add");
  if (!val(a).same_shape(val(b)))
    throw std::invalid_argument("add: shape mismatch " + val(a).shape_str() +
                                " vs " + val(b).shape_str());
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += vb.data[i];
  Var out = make(std::move(y), needs(a) || needs(b), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, a, b, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    if (needs(a)) {
      Tensor<T>& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::sub(Var a, Var b) {
  check(a, "sub");
  check(b, "sub");
  if (!val(a).same_shape(val(b)))
    throw std::invalid_argument("sub: shape mismatch " + val(a).shape_str() +
                                " vs " + val(b).shape_str());
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] -= vb.data[i];
  Var out = make(std::move(y), needs(a) || needs(b), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, a, b, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    if (needs(a)) {
      Tensor<T>& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    }
    if (needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::mul(Var a, Var b) {
  check(a, "mul");
  check(b, "mul");
  if (!val(a).same_shape(val(b)))
    throw std::invalid_argument("mul: shape mismatch " + val(a).shape_str() +
                                " vs " + val(b).shape_str());
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] *= vb.data[i];
  Var out = make(std::move(y), needs(a) || needs(b), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, a, b, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb2 = val(b);
    if (needs(a)) {
      Tensor<T>& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += g.data[i] * vb2.data[i];
    }
    if (needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gb.data[i] += g.data[i] * va.data[i];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::div(Var a, Var b) {
  check(a, "div");
  check(b, "div");
  if (!val(a).same_shape(val(b)))
    throw std::invalid_argument("div: shape mismatch " + val(a).shape_str() +
                                " vs " + val(b).shape_str());
  Tensor<T> y = val(a);
  const Tensor<T>& vb = val(b);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] /= vb.data[i];
  Var out = make(std::move(y), needs(a) || needs(b), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, a, b, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vy = nodes_[static_cast<std::size_t>(yid)].value;
    const Tensor<T>& vb2 = val(b);
    if (needs(a)) {
      Tensor<T>& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += g.data[i] / vb2.data[i];
    }
    if (needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gb.data[i] -= g.data[i] * vy.data[i] / vb2.data[i];
    }
  };
  return out;
}

// ---------- elementwise unary ----------

template <typename T>
typename Graph<T>::Var Graph<T>::add_scalar(Var x, T c) {
  check(x, "add_scalar");
  Tensor<T> y = val(x);
  for (T& v : y.data) v += c;
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::scale(Var x, T c) {
  check(x, "scale");
  Tensor<T> y = val(x);
  for (T& v : y.data) v *= c;
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, c, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += c * g.data[i];
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::square(Var x) {
  check(x, "square");
  Tensor<T> y = val(x);
  for (T& v : y.data) v *= v;
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx = val(x);
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i)
      gx.data[i] += T(2) * vx.data[i] * g.data[i];
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::sqrt(Var x) {
  check(x, "sqrt");
  Tensor<T> y = val(x);
  for (T& v : y.data) v = std::sqrt(v);
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vy = nodes_[static_cast<std::size_t>(yid)].value;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i)
      gx.data[i] += g.data[i] / (T(2) * vy.data[i]);
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::abs(Var x) {
  check(x, "abs");
  Tensor<T> y = val(x);
  for (T& v : y.data) v = std::abs(v);
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx = val(x);
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      T s = vx.data[i] > T(0) ? T(1) : (vx.data[i] < T(0) ? T(-1) : T(0));
      gx.data[i] += s * g.data[i];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::pow_even(Var x, int exponent) {
  check(x, "pow_even");
  if (exponent < 2 || exponent % 2 != 0)
    throw std::invalid_argument("pow_even: exponent must be even and >= 2");
  Tensor<T> y = val(x);
  for (T& v : y.data) {
    T p = v;
    for (int e = 1; e < exponent; ++e) p *= v;
    v = p;
  }
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, exponent, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx = val(x);
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      T p = T(1);
      for (int e = 1; e < exponent; ++e) p *= vx.data[i];
      gx.data[i] += static_cast<T>(exponent) * p * g.data[i];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::relu(Var x) {
  check(x, "relu");
  Tensor<T> y = val(x);
  for (T& v : y.data) v = std::max(v, T(0));
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx = val(x);
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i)
      if (vx.data[i] > T(0)) gx.data[i] += g.data[i];
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::sub_const(Var x, Tensor<T> c) {
  check(x, "sub_const");
  if (!val(x).same_shape(c))
    throw std::invalid_argument("sub_const: shape mismatch " +
                                val(x).shape_str() + " vs " + c.shape_str());
  Tensor<T> y = val(x);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] -= c.data[i];
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
  };
  return out;
}

// ---------- linear algebra ----------

template <typename T>
typename Graph<T>::Var Graph<T>::affine(Var x, Var w, Var b) {
  check(x, "affine");
  check(w, "affine");
  const Tensor<T>& vx = val(x);
  const Tensor<T>& vw = val(w);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1))
    throw std::invalid_argument("affine: need x[B,I], w[O,I]; got " +
                                vx.shape_str() + ", " + vw.shape_str());
  const std::int64_t B = vx.dim(0), I = vx.dim(1), O = vw.dim(0);
  bool has_bias = b.valid();
  if (has_bias) {
    check(b, "affine");
    if (val(b).rank() != 1 || val(b).dim(0) != O)
      throw std::invalid_argument("affine: bias must be [O]");
  }
  Tensor<T> y = Tensor<T>::zeros({B, O});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t o = 0; o < O; ++o) {
      T acc = has_bias ? val(b).data[static_cast<std::size_t>(o)] : T(0);
      const T* xr = vx.data.data() + n * I;
      const T* wr = vw.data.data() + o * I;
      for (std::int64_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
      y.data[static_cast<std::size_t>(n * O + o)] = acc;
    }
  bool req = needs(x) || needs(w) || (has_bias && needs(b));
  Var out = make(std::move(y), req, {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, w, b, has_bias, B, I, O,
                                                yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx2 = val(x);
    const Tensor<T>& vw2 = val(w);
    if (needs(x)) {
      Tensor<T>& gx = grad_ref(x.id);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
          T go = g.data[static_cast<std::size_t>(n * O + o)];
          const T* wr = vw2.data.data() + o * I;
          T* gxr = gx.data.data() + n * I;
          for (std::int64_t i = 0; i < I; ++i) gxr[i] += go * wr[i];
        }
    }
    if (needs(w)) {
      Tensor<T>& gw = grad_ref(w.id);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
          T go = g.data[static_cast<std::size_t>(n * O + o)];
          const T* xr = vx2.data.data() + n * I;
          T* gwr = gw.data.data() + o * I;
          for (std::int64_t i = 0; i < I; ++i) gwr[i] += go * xr[i];
        }
    }
    if (has_bias && needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t o = 0; o < O; ++o)
          gb.data[static_cast<std::size_t>(o)] +=
              g.data[static_cast<std::size_t>(n * O + o)];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::conv2d(Var x, Var w, Var b, int stride,
                                        int padding, int groups) {
  check(x, "conv2d");
  check(w, "conv2d");
  const Tensor<T>& vx = val(x);
  const Tensor<T>& vw = val(w);
  if (vx.rank() != 4 || vw.rank() != 4)
    throw std::invalid_argument("conv2d: need x[B,C,H,W], w[O,C/g,kh,kw]");
  const std::int64_t B = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const std::int64_t Co = vw.dim(0), Cg = vw.dim(1), kh = vw.dim(2), kw = vw.dim(3);
  if (stride < 1 || padding < 0 || groups < 1 || Ci % groups != 0 ||
      Co % groups != 0 || Cg != Ci / groups)
    throw std::invalid_argument("conv2d: inconsistent channel/group layout");
  const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  bool has_bias = b.valid();
  if (has_bias) {
    check(b, "conv2d");
    if (val(b).rank() != 1 || val(b).dim(0) != Co)
      throw std::invalid_argument("conv2d: bias must be [Co]");
  }
  const std::int64_t co_per_g = Co / groups;

  Tensor<T> y = Tensor<T>::zeros({B, Co, Ho, Wo});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t co = 0; co < Co; ++co) {
      const std::int64_t g0 = (co / co_per_g) * Cg;  // first input channel
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          T acc = has_bias ? val(b).data[static_cast<std::size_t>(co)] : T(0);
          for (std::int64_t c = 0; c < Cg; ++c)
            for (std::int64_t i = 0; i < kh; ++i) {
              const std::int64_t ih = oh * stride - padding + i;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t iw = ow * stride - padding + j;
                if (iw < 0 || iw >= W) continue;
                acc += vx.data[static_cast<std::size_t>(
                           ((n * Ci + g0 + c) * H + ih) * W + iw)] *
                       vw.data[static_cast<std::size_t>(
                           ((co * Cg + c) * kh + i) * kw + j)];
              }
            }
          y.data[static_cast<std::size_t>(((n * Co + co) * Ho + oh) * Wo + ow)] =
              acc;
        }
    }

  bool req = needs(x) || needs(w) || (has_bias && needs(b));
  Var out = make(std::move(y), req, {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, w, b, has_bias, stride,
                                                padding, B, Ci, H, W, Co, Cg, kh,
                                                kw, Ho, Wo, co_per_g, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vx2 = val(x);
    const Tensor<T>& vw2 = val(w);
    const bool nx = needs(x), nw = needs(w);
    Tensor<T>* gx = nx ? &grad_ref(x.id) : nullptr;
    Tensor<T>* gw = nw ? &grad_ref(w.id) : nullptr;
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t co = 0; co < Co; ++co) {
        const std::int64_t g0 = (co / co_per_g) * Cg;
        for (std::int64_t oh = 0; oh < Ho; ++oh)
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const T go = g.data[static_cast<std::size_t>(
                ((n * Co + co) * Ho + oh) * Wo + ow)];
            if (go == T(0)) continue;
            for (std::int64_t c = 0; c < Cg; ++c)
              for (std::int64_t i = 0; i < kh; ++i) {
                const std::int64_t ih = oh * stride - padding + i;
                if (ih < 0 || ih >= H) continue;
                for (std::int64_t j = 0; j < kw; ++j) {
                  const std::int64_t iw = ow * stride - padding + j;
                  if (iw < 0 || iw >= W) continue;
                  const std::size_t xi = static_cast<std::size_t>(
                      ((n * Ci + g0 + c) * H + ih) * W + iw);
                  const std::size_t wi = static_cast<std::size_t>(
                      ((co * Cg + c) * kh + i) * kw + j);
                  if (nx) gx->data[xi] += go * vw2.data[wi];
                  if (nw) gw->data[wi] += go * vx2.data[xi];
                }
              }
          }
      }
    if (has_bias && needs(b)) {
      Tensor<T>& gb = grad_ref(b.id);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t co = 0; co < Co; ++co)
          for (std::int64_t s = 0; s < Ho * Wo; ++s)
            gb.data[static_cast<std::size_t>(co)] += g.data[static_cast<std::size_t>(
                (n * Co + co) * Ho * Wo + s)];
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::batch_norm(Var x, Var gamma, Var beta,
                                            BatchNormStats<T>* stats,
                                            bool training, T momentum, T eps) {
  check(x, "batch_norm");
  check(gamma, "batch_norm");
  check(beta, "batch_norm");
  const Tensor<T>& vx = val(x);
  if (vx.rank() != 2 && vx.rank() != 4)
    throw std::invalid_argument("batch_norm: rank must be 2 or 4, got " +
                                vx.shape_str());
  const std::int64_t B = vx.dim(0), C = vx.dim(1);
  const std::int64_t S = vx.rank() == 4 ? vx.dim(2) * vx.dim(3) : 1;
  const std::int64_t m = B * S;  // reduction count per channel
  if (val(gamma).numel() != C || val(beta).numel() != C)
    throw std::invalid_argument("batch_norm: gamma/beta must be [C]");
  if (stats == nullptr || stats->running_mean.numel() != C ||
      stats->running_var.numel() != C)
    throw std::invalid_argument("batch_norm: stats missing or wrong size");

  auto at = [C, S](std::int64_t n, std::int64_t c, std::int64_t s) {
    return static_cast<std::size_t>((n * C + c) * S + s);
  };

  Tensor<T> mean = Tensor<T>::zeros({C});
  Tensor<T> inv_sigma = Tensor<T>::zeros({C});
  if (training) {
    for (std::int64_t c = 0; c < C; ++c) {
      T mu = 0;
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t s = 0; s < S; ++s) mu += vx.data[at(n, c, s)];
      mu /= static_cast<T>(m);
      T var = 0;
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t s = 0; s < S; ++s) {
          T d = vx.data[at(n, c, s)] - mu;
          var += d * d;
        }
      var /= static_cast<T>(m);
      mean.data[static_cast<std::size_t>(c)] = mu;
      inv_sigma.data[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
      // Running stats follow the "momentum" convention where `momentum`
      // weights the new batch value; running variance uses the unbiased
      // batch variance.
      T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      auto& rm = stats->running_mean.data[static_cast<std::size_t>(c)];
      auto& rv = stats->running_var.data[static_cast<std::size_t>(c)];
      rm = (T(1) - momentum) * rm + momentum * mu;
      rv = (T(1) - momentum) * rv + momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean.data[static_cast<std::size_t>(c)] =
          stats->running_mean.data[static_cast<std::size_t>(c)];
      inv_sigma.data[static_cast<std::size_t>(c)] =
          T(1) / std::sqrt(stats->running_var.data[static_cast<std::size_t>(c)] + eps);
    }
  }

  Tensor<T> xhat = Tensor<T>::zeros(vx.shape);
  Tensor<T> y = Tensor<T>::zeros(vx.shape);
  const Tensor<T>& vg = val(gamma);
  const Tensor<T>& vb = val(beta);
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T mu = mean.data[static_cast<std::size_t>(c)];
      const T is = inv_sigma.data[static_cast<std::size_t>(c)];
      const T ga = vg.data[static_cast<std::size_t>(c)];
      const T be = vb.data[static_cast<std::size_t>(c)];
      for (std::int64_t s = 0; s < S; ++s) {
        T xh = (vx.data[at(n, c, s)] - mu) * is;
        xhat.data[at(n, c, s)] = xh;
        y.data[at(n, c, s)] = ga * xh + be;
      }
    }

  bool req = needs(x) || needs(gamma) || needs(beta);
  Var out = make(std::move(y), req, {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull =
      [this, x, gamma, beta, training, B, C, S, m, yid, at,
       xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)]() {
        const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
        const Tensor<T>& vg2 = val(gamma);
        // Per-channel reductions of g and g*xhat, shared by all three grads.
        std::vector<T> sum_g(static_cast<std::size_t>(C), T(0));
        std::vector<T> sum_gx(static_cast<std::size_t>(C), T(0));
        for (std::int64_t n = 0; n < B; ++n)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t s = 0; s < S; ++s) {
              const std::size_t i = at(n, c, s);
              sum_g[static_cast<std::size_t>(c)] += g.data[i];
              sum_gx[static_cast<std::size_t>(c)] += g.data[i] * xhat.data[i];
            }
        if (needs(gamma)) {
          Tensor<T>& gg = grad_ref(gamma.id);
          for (std::int64_t c = 0; c < C; ++c)
            gg.data[static_cast<std::size_t>(c)] += sum_gx[static_cast<std::size_t>(c)];
        }
        if (needs(beta)) {
          Tensor<T>& gb = grad_ref(beta.id);
          for (std::int64_t c = 0; c < C; ++c)
            gb.data[static_cast<std::size_t>(c)] += sum_g[static_cast<std::size_t>(c)];
        }
        if (needs(x)) {
          Tensor<T>& gx = grad_ref(x.id);
          for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
              const std::size_t cc = static_cast<std::size_t>(c);
              const T k = vg2.data[cc] * inv_sigma.data[cc];
              for (std::int64_t s = 0; s < S; ++s) {
                const std::size_t i = at(n, c, s);
                if (training) {
                  // d/dx of batch standardisation: remove the per-channel
                  // mean of g and the xhat-projected component.
                  gx.data[i] += k * (g.data[i] - sum_g[cc] / static_cast<T>(m) -
                                     xhat.data[i] * sum_gx[cc] / static_cast<T>(m));
                } else {
                  gx.data[i] += k * g.data[i];
                }
              }
            }
        }
      };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::max_pool2d(Var x, int kernel, int stride,
                                            int padding) {
  check(x, "max_pool2d");
  const Tensor<T>& vx = val(x);
  if (vx.rank() != 4) throw std::invalid_argument("max_pool2d: need [B,C,H,W]");
  if (kernel < 1 || stride < 1 || padding < 0)
    throw std::invalid_argument("max_pool2d: bad kernel/stride/padding");
  const std::int64_t B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
  const std::int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("max_pool2d: window larger than padded input");
  Tensor<T> y = Tensor<T>::zeros({B, C, Ho, Wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.numel()), -1);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          T best = T(0);
          std::int64_t best_idx = -1;
          for (std::int64_t ki = 0; ki < kernel; ++ki)
            for (std::int64_t kj = 0; kj < kernel; ++kj) {
              const std::int64_t hi = i * stride - padding + ki;
              const std::int64_t wj = j * stride - padding + kj;
              if (hi < 0 || hi >= H || wj < 0 || wj >= W) continue;
              const std::int64_t idx = ((b * C + c) * H + hi) * W + wj;
              const T v = vx.data[static_cast<std::size_t>(idx)];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = idx;
              }
            }
          const std::int64_t o = ((b * C + c) * Ho + i) * Wo + j;
          y.data[static_cast<std::size_t>(o)] = best;
          argmax[static_cast<std::size_t>(o)] = best_idx;
        }
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, yid,
                                                am = std::move(argmax)]() {
    if (!needs(x)) return;
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::size_t o = 0; o < am.size(); ++o)
      if (am[o] >= 0) gx.data[static_cast<std::size_t>(am[o])] += g.data[o];
  };
  return out;
}

// ---------- reductions / per-sample ops ----------

template <typename T>
typename Graph<T>::Var Graph<T>::mean_per_sample(Var x) {
  check(x, "mean_per_sample");
  const Tensor<T>& vx = val(x);
  if (vx.rank() < 1)
    throw std::invalid_argument("mean_per_sample: rank must be >= 1");
  const std::int64_t B = vx.dim(0);
  const std::int64_t m = vx.numel() / B;
  Tensor<T> y = Tensor<T>::zeros({B});
  for (std::int64_t n = 0; n < B; ++n) {
    T acc = 0;
    for (std::int64_t j = 0; j < m; ++j)
      acc += vx.data[static_cast<std::size_t>(n * m + j)];
    y.data[static_cast<std::size_t>(n)] = acc / static_cast<T>(m);
  }
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, B, m, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::int64_t n = 0; n < B; ++n) {
      const T gn = g.data[static_cast<std::size_t>(n)] / static_cast<T>(m);
      for (std::int64_t j = 0; j < m; ++j)
        gx.data[static_cast<std::size_t>(n * m + j)] += gn;
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::mean_all(Var x) {
  check(x, "mean_all");
  const Tensor<T>& vx = val(x);
  const std::int64_t m = vx.numel();
  T acc = 0;
  for (T v : vx.data) acc += v;
  Var out = make(Tensor<T>::scalar(acc / static_cast<T>(m)), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, m, yid]() {
    const T g = nodes_[static_cast<std::size_t>(yid)].grad.data[0] / static_cast<T>(m);
    Tensor<T>& gx = grad_ref(x.id);
    for (T& v : gx.data) v += g;
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::div_rows(Var x, Var denom) {
  check(x, "div_rows");
  check(denom, "div_rows");
  const Tensor<T>& vx = val(x);
  const Tensor<T>& vd = val(denom);
  if (vx.rank() < 1 || vd.rank() != 1 || vd.dim(0) != vx.dim(0))
    throw std::invalid_argument("div_rows: need x[B,...], denom[B]");
  const std::int64_t B = vx.dim(0);
  const std::int64_t m = vx.numel() / B;
  Tensor<T> y = vx;
  for (std::int64_t n = 0; n < B; ++n) {
    const T d = vd.data[static_cast<std::size_t>(n)];
    for (std::int64_t j = 0; j < m; ++j)
      y.data[static_cast<std::size_t>(n * m + j)] /= d;
  }
  Var out = make(std::move(y), needs(x) || needs(denom), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, denom, B, m, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    const Tensor<T>& vy = nodes_[static_cast<std::size_t>(yid)].value;
    const Tensor<T>& vd2 = val(denom);
    if (needs(x)) {
      Tensor<T>& gx = grad_ref(x.id);
      for (std::int64_t n = 0; n < B; ++n) {
        const T d = vd2.data[static_cast<std::size_t>(n)];
        for (std::int64_t j = 0; j < m; ++j)
          gx.data[static_cast<std::size_t>(n * m + j)] +=
              g.data[static_cast<std::size_t>(n * m + j)] / d;
      }
    }
    if (needs(denom)) {
      Tensor<T>& gd = grad_ref(denom.id);
      for (std::int64_t n = 0; n < B; ++n) {
        const T d = vd2.data[static_cast<std::size_t>(n)];
        T acc = 0;
        for (std::int64_t j = 0; j < m; ++j)
          acc += g.data[static_cast<std::size_t>(n * m + j)] *
                 vy.data[static_cast<std::size_t>(n * m + j)];
        gd.data[static_cast<std::size_t>(n)] -= acc / d;
      }
    }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::global_avg_pool(Var x) {
  check(x, "global_avg_pool");
  const Tensor<T>& vx = val(x);
  if (vx.rank() != 4)
    throw std::invalid_argument("global_avg_pool: need [B,C,H,W]");
  const std::int64_t B = vx.dim(0), C = vx.dim(1), S = vx.dim(2) * vx.dim(3);
  Tensor<T> y = Tensor<T>::zeros({B, C});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::int64_t s = 0; s < S; ++s)
        acc += vx.data[static_cast<std::size_t>((n * C + c) * S + s)];
      y.data[static_cast<std::size_t>(n * C + c)] = acc / static_cast<T>(S);
    }
  Var out = make(std::move(y), needs(x), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, x, B, C, S, yid]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gx = grad_ref(x.id);
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T gn = g.data[static_cast<std::size_t>(n * C + c)] / static_cast<T>(S);
        for (std::int64_t s = 0; s < S; ++s)
          gx.data[static_cast<std::size_t>((n * C + c) * S + s)] += gn;
      }
  };
  return out;
}

template <typename T>
typename Graph<T>::Var Graph<T>::softmax_cross_entropy(
    Var logits, const std::vector<int>& labels) {
  check(logits, "softmax_cross_entropy");
  const Tensor<T>& vz = val(logits);
  if (vz.rank() != 2)
    throw std::invalid_argument("softmax_cross_entropy: need logits[B,K]");
  const std::int64_t B = vz.dim(0), K = vz.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    throw std::invalid_argument("softmax_cross_entropy: labels size != B");
  for (int y : labels)
    if (y < 0 || y >= K)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");

  Tensor<T> probs = Tensor<T>::zeros({B, K});
  Tensor<T> loss = Tensor<T>::zeros({B});
  for (std::int64_t n = 0; n < B; ++n) {
    const T* z = vz.data.data() + n * K;
    T zmax = z[0];
    for (std::int64_t k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    T sum = 0;
    for (std::int64_t k = 0; k < K; ++k) {
      T e = std::exp(z[k] - zmax);
      probs.data[static_cast<std::size_t>(n * K + k)] = e;
      sum += e;
    }
    for (std::int64_t k = 0; k < K; ++k)
      probs.data[static_cast<std::size_t>(n * K + k)] /= sum;
    const std::int64_t y = labels[static_cast<std::size_t>(n)];
    loss.data[static_cast<std::size_t>(n)] =
        std::log(sum) + zmax - z[y];
  }
  Var out = make(std::move(loss), needs(logits), {});
  std::int32_t yid = out.id;
  nodes_[static_cast<std::size_t>(yid)].pull = [this, logits, labels, B, K, yid,
                                                probs = std::move(probs)]() {
    const Tensor<T>& g = nodes_[static_cast<std::size_t>(yid)].grad;
    Tensor<T>& gz = grad_ref(logits.id);
    for (std::int64_t n = 0; n < B; ++n) {
      const T gn = g.data[static_cast<std::size_t>(n)];
      const std::int64_t y = labels[static_cast<std::size_t>(n)];
      for (std::int64_t k = 0; k < K; ++k) {
        T p = probs.data[static_cast<std::size_t>(n * K + k)];
        gz.data[static_cast<std::size_t>(n * K + k)] +=
            gn * (p - (k == y ? T(1) : T(0)));
      }
    }
  };
  return out;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace codednet::autodiff
