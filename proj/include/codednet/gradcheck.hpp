#pragma once

#include <functional>
#include <vector>

#include "codednet/graph.hpp"
#include "codednet/tensor.hpp"

namespace codednet::autodiff {

// Compares reverse-mode gradients against central finite differences.
// `build` must construct the same scalar-valued expression each call from
// the leaves it is handed (one leaf per input tensor, requires_grad set).
struct GradCheckResult {
  double max_rel_err = 0.0;   // max over all components of all inputs
  std::int64_t components = 0;
};

using BuildFn = std::function<Graph<double>::Var(
    Graph<double>&, const std::vector<Graph<double>::Var>&)>;

GradCheckResult grad_check(const BuildFn& build,
                           const std::vector<Tensor<double>>& inputs,
                           double delta = 1e-5);

}  // namespace codednet::autodiff
