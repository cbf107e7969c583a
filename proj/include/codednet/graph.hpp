#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "codednet/tensor.hpp"

namespace codednet::autodiff {

// Running batch-norm statistics; owned by the model, mutated by train-mode
// forward passes, read by eval-mode passes.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  static BatchNormStats fresh(std::int64_t channels) {
    BatchNormStats s;
    s.running_mean = Tensor<T>::zeros({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
  }
};

// Define-by-run reverse-mode tape over dense tensors. Every op appends a
// node holding its output value plus a closure that scatters the node's
// gradient to its inputs; backward() replays closures in reverse creation
// order, visiting only nodes the seed actually reaches. A graph represents
// one forward pass: build, call backward once, read grads, discard.
template <typename T>
class Graph {
 public:
  struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;             // backprop closures capture `this`
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor<T> value, bool requires_grad = false);
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(Var v) const;
  // Gradient accumulated by the last backward(); zeros if the node was
  // never reached.
  const Tensor<T>& grad(Var v);
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(output)/d(output) = 1 (output must be scalar) and propagates.
  // Resets all gradients first, so repeated calls do not accumulate.
  void backward(Var output);

  // --- elementwise, same shape ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);  // caller guarantees nonzero denominator
  // --- elementwise, unary ---
  Var add_scalar(Var x, T c);
  Var scale(Var x, T c);
  Var square(Var x);
  Var sqrt(Var x);        // caller guarantees positive input
  Var abs(Var x);
  Var pow_even(Var x, int exponent);  // exponent >= 2 and even
  Var relu(Var x);
  Var sub_const(Var x, Tensor<T> c);
  // --- linear algebra ---
  // x [B,I], w [O,I], optional b [O] (pass Var{} for none) -> [B,O].
  Var affine(Var x, Var w, Var b);
  // x [B,Ci,H,W], w [Co,Ci/groups,kh,kw], optional bias [Co] -> [B,Co,H',W'].
  Var conv2d(Var x, Var w, Var b, int stride, int padding, int groups);
  // x [B,C] or [B,C,H,W], gamma/beta [C]. Train mode normalises by batch
  // statistics and folds them into `stats` (running <- (1-momentum)*running
  // + momentum*batch, variance made unbiased); eval mode normalises by the
  // running statistics.
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats<T>* stats,
                 bool training, T momentum, T eps);
  // x [B,C,H,W] -> [B,C,H',W']; padding cells never win the max.
  Var max_pool2d(Var x, int kernel, int stride, int padding);
  // --- reductions / per-sample ops (axis 0 is the batch) ---
  Var mean_per_sample(Var x);            // [B,...] -> [B]
  Var mean_all(Var x);                   // any -> scalar [1]
  Var div_rows(Var x, Var denom);        // x[b,...] / denom[b]
  Var global_avg_pool(Var x);            // [B,C,H,W] -> [B,C]
  // logits [B,K] -> per-sample cross-entropy loss [B] (softmax folded in).
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;  // gradient flows into this node
    bool reached = false;     // grad allocated during the current backward
    std::function<void()> pull;
  };
  std::vector<Node> nodes_;

  Var make(Tensor<T> value, bool needs_grad, std::function<void()> pull);
  Tensor<T>& grad_ref(std::int32_t id);
  bool needs(Var v) const;
  const Tensor<T>& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  void check(Var v, const char* op) const;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace codednet::autodiff
