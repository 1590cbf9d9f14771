// Central finite-difference verification of analytic gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "unigen/autodiff.hpp"

namespace unigen {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares `analytic(store)` with central differences of `value(store)`
/// over every scalar of the listed parameters. The error of one scalar is
/// |analytic - numeric| / max(1, |numeric|); the maximum is returned.
template <class ValueFn, class GradFn>
GradCheckResult grad_check(ValueFn&& value, GradFn&& analytic, ParamStore& store, const std::vector<ParamId>& params, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  const GradientRecord grads = analytic(static_cast<const ParamStore&>(store));
  GradCheckResult res;
  for (ParamId id : params) {
    Tensor& theta = store.value(id);
    const Tensor* g = grads.find(id);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double orig = theta[i];
      theta[i] = orig + h;
      const double fp = value(static_cast<const ParamStore&>(store));
      theta[i] = orig - h;
      const double fm = value(static_cast<const ParamStore&>(store));
      theta[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteError("grad_check: non-finite objective at " + store.name(id));
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = g ? (*g)[i] : 0.0;
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (res.checked == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = store.name(id);
        res.worst_index = i;
      }
      ++res.checked;
    }
  }
  return res;
}

/// Convenience form: `loss(graph, store)` builds a scalar; both the value and
/// the analytic gradient are derived from it.
template <class LossFn>
GradCheckResult grad_check(LossFn&& loss, ParamStore& store, const std::vector<ParamId>& params, double h = 1e-5) {
  auto value = [&](const ParamStore& s) {
    Graph g(false);
    return loss(g, s).value()[0];
  };
  auto analytic = [&](const ParamStore& s) {
    Graph g(true);
    Var l = loss(g, s);
    g.backward(l);
    return g.param_grads();
  };
  return grad_check(value, analytic, store, params, h);
}

}  // namespace unigen
