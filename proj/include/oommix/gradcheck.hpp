#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "oommix/graph.hpp"

namespace oommix {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the largest relative error
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

namespace detail {

template <typename T, typename Build>
T scalar_output(Build& build) {
  Graph<T> g;
  Var<T> out = build(g);
  if (out.size() != 1) {
    throw ShapeError("grad_check: function output must be scalar");
  }
  return out.value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients of `build` (precision T) against central
/// differences of `ref_build` evaluated in precision R on `ref_params`, a
/// parameter list mirroring `params` entry for entry. The reference values
/// are overwritten with the values in `params` first.
///
/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-8). A nonzero
/// `max_entries` checks that many evenly spaced entries per parameter.
template <typename T, typename R, typename Build, typename RefBuild>
GradCheckResult grad_check_ref(Build&& build, const std::vector<Parameter<T>*>& params,
                               RefBuild&& ref_build,
                               const std::vector<Parameter<R>*>& ref_params, R eps,
                               std::size_t max_entries = 0) {
  if (params.size() != ref_params.size()) {
    throw std::invalid_argument("grad_check: reference parameter count differs");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->value.shape != ref_params[k]->value.shape) {
      throw ShapeError("grad_check: reference shape differs for " + params[k]->name);
    }
    for (std::size_t i = 0; i < params[k]->value.size(); ++i) {
      ref_params[k]->value.data[i] = static_cast<R>(params[k]->value.data[i]);
    }
  }

  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g;
    Var<T> out = build(g);
    if (out.size() != 1) {
      throw ShapeError("grad_check: function output must be scalar");
    }
    g.backward(out, GroupMask::all());
  }
  const R base = detail::scalar_output<R>(ref_build);
  if (detail::scalar_output<R>(ref_build) != base) {
    throw std::runtime_error(
        "grad_check: function is not deterministic (disable dropout)");
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* p = params[k];
    auto& data = ref_params[k]->value.data;
    const std::size_t n = data.size();
    const std::size_t count = max_entries ? std::min(n, max_entries) : n;
    for (std::size_t t = 0; t < count; ++t) {
      const std::size_t i = t * n / count;
      const R saved = data[i];
      data[i] = saved + eps;
      const R up = detail::scalar_output<R>(ref_build);
      data[i] = saved - eps;
      const R down = detail::scalar_output<R>(ref_build);
      data[i] = saved;
      const double numeric = static_cast<double>((up - down) / (R(2) * eps));
      const double analytic = static_cast<double>(p->value.grad[i]);
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = rel;
        result.worst = p->name + "[" + std::to_string(i) + "]";
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
      result.max_abs_analytic =
          std::max(result.max_abs_analytic, std::abs(analytic));
      ++result.checked;
    }
  }
  return result;
}

/// Same-precision check: `build` is both the subject and the oracle.
template <typename T, typename Build>
GradCheckResult grad_check(Build&& build, const std::vector<Parameter<T>*>& params,
                           T eps = T(1e-5), std::size_t max_entries = 0) {
  return grad_check_ref<T, T>(build, params, build, params, eps, max_entries);
}

}  // namespace oommix
