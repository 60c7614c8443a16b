#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sona/tensor.hpp"

namespace sona {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

// Compares backward() against central differences for every element of
// every tensor in `wrt`. The error of one element is
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// `f` must be deterministic; stochastic layers need frozen masks.
inline GradCheckResult grad_check_all(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                                      double eps = 1e-5) {
  if (!(eps > 0.0)) throw contract_error("grad_check: eps must be positive");
  for (auto& t : wrt) {
    if (!t.is_leaf()) throw contract_error("grad_check: can only perturb leaf tensors");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor loss = f();
  if (!std::isfinite(loss.item())) throw numeric_error("grad_check: non-finite loss at the base point");
  backward(loss);

  GradCheckResult result;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& t = wrt[ti];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      const double hi = orig + eps, lo = orig - eps;
      values[i] = hi;
      const double up = f().item();
      values[i] = lo;
      const double down = f().item();
      values[i] = orig;
      // Divide by the step actually taken after rounding.
      const double numeric = (up - down) / (hi - lo);
      if (std::isnan(numeric) || std::isnan(analytic[i]))
        throw numeric_error("grad_check: NaN at tensor " + std::to_string(ti) + " index " + std::to_string(i));
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > result.max_rel_error) result = {err, ti, i};
    }
    t.zero_grad();
  }
  return result;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5) {
  return grad_check_all([&] { return f(x); }, {x}, eps).max_rel_error;
}

}  // namespace sona
