#include "codednet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace codednet::autodiff {

namespace {

double eval_scalar(const BuildFn& build, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g;
  std::vector<Graph<double>::Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor<double>& t : inputs) leaves.push_back(g.leaf(t, false));
  return g.value(build(g, leaves)).data[0];
}

}  // namespace

GradCheckResult grad_check(const BuildFn& build,
                           const std::vector<Tensor<double>>& inputs,
                           double delta) {
  // Analytic gradients in one reverse pass.
  Graph<double> g;
  std::vector<Graph<double>::Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor<double>& t : inputs) leaves.push_back(g.leaf(t, true));
  Graph<double>::Var out = build(g, leaves);
  if (g.value(out).numel() != 1)
    throw std::invalid_argument("grad_check: expression must be scalar");
  g.backward(out);

  GradCheckResult res;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    const Tensor<double>& analytic = g.grad(leaves[ti]);
    for (std::size_t j = 0; j < probe[ti].data.size(); ++j) {
      const double saved = probe[ti].data[j];
      probe[ti].data[j] = saved + delta;
      const double hi = eval_scalar(build, probe);
      probe[ti].data[j] = saved - delta;
      const double lo = eval_scalar(build, probe);
      probe[ti].data[j] = saved;
      const double numeric = (hi - lo) / (2.0 * delta);
      const double a = analytic.data[j];
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.components;
    }
  }
  return res;
}

}  // namespace codednet::autodiff
