#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dcn/graph.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t arg_index = 0;  // worst input tensor
  std::size_t coord = 0;      // worst coordinate within it
  bool finite = true;
  std::string note;

  bool ok(double tol) const { return finite && max_rel_error < tol; }
};

/// Central-difference validation of reverse-mode gradients, 64-bit only.
///
/// `build` constructs a scalar loss from freshly registered copies of
/// `inputs`; it is re-invoked for every perturbed evaluation, so it must be a
/// pure function of the tensor values.
inline GradCheckResult grad_check(
    const std::function<Var(Graph<double>&, const std::vector<Var>&)>& build,
    std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw ValidationError("grad_check: eps must lie in [1e-7, 1e-3]");

  auto eval = [&](bool with_grad) -> double {
    Graph<double> g;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (auto& t : inputs) vars.push_back(with_grad ? g.param(t) : g.constant(t));
    Var loss = build(g, vars);
    if (g.value(loss).size() != 1)
      throw ValidationError("grad_check: build must produce a scalar");
    const double v = g.value(loss)[0];
    if (with_grad) g.backward(loss);
    return v;
  };

  for (auto& t : inputs) {
    t.ensure_grad();
    t.zero_grad();
  }
  eval(true);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult res;
  for (std::size_t ai = 0; ai < inputs.size(); ++ai) {
    Tensor<double>& t = inputs[ai];
    for (std::size_t c = 0; c < t.size(); ++c) {
      const double a = analytic[ai][c];
      if (!std::isfinite(a)) {
        res.finite = false;
        res.arg_index = ai;
        res.coord = c;
        res.note = "non-finite analytic gradient at input " + std::to_string(ai) +
                   " coordinate " + std::to_string(c);
        return res;
      }
      const double saved = t[c];
      t[c] = saved + eps;
      const double fp = eval(false);
      t[c] = saved - eps;
      const double fm = eval(false);
      t[c] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(fd)) {
        res.finite = false;
        res.arg_index = ai;
        res.coord = c;
        res.note = "non-finite central difference at input " + std::to_string(ai) +
                   " coordinate " + std::to_string(c);
        return res;
      }
      const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-8});
      const double rel = std::fabs(a - fd) / denom;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.arg_index = ai;
        res.coord = c;
      }
    }
  }
  return res;
}

/// Scalarizes an arbitrary-shaped op output with fixed weights so grad_check
/// exercises every output coordinate: loss = sum(w * f(x)).
inline Var weighted_scalarize(Graph<double>& g, Var v, const Tensor<double>& weights) {
  return g.sum_all(g.mul(v, g.constant(weights)));
}

}  // namespace dcn
