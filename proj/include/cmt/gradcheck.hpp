#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <vector>

#include "cmt/ops.hpp"
#include "cmt/tape.hpp"

namespace cmt {

// Central finite-difference gradient check. `f` must be scalar-valued; inputs
// are treated as the differentiation targets. Meant to run in 64-bit mode.
// Returns the max relative error over all coordinates, with denominator
// max(|analytic|, |numeric|, 1e-8).
//
// `order` selects the stencil: 2 is the plain (f(x+e)-f(x-e))/2e rule; 4 is
// its Richardson extrapolation (4*D(e) - D(2e))/3. Composite blocks need the
// latter: their layer norms are stiff at init (truncation grows with eps)
// while gradients through the nine-map attention product sit near the 1e-8
// floor (cancellation noise grows as eps shrinks), and no second-order step
// width satisfies both.
template <typename T>
struct GradCheckResult {
  T max_rel_error = 0;
  int64_t worst_input = -1;
  int64_t worst_coord = -1;
  T analytic = 0, numeric = 0;
};

template <typename T>
GradCheckResult<T> grad_check_multi(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> inputs, const std::vector<T>& eps_list,
    const std::vector<std::vector<int64_t>>* coord_subset = nullptr, int order = 2,
    T early_stop = T(0)) {
  // analytic pass
  Tape<T> tape;
  std::vector<Tensor<T>> taped;
  taped.reserve(inputs.size());
  for (auto& in : inputs) {
    Tensor<T> t = in.clone();
    tape.watch(t);
    taped.push_back(std::move(t));
  }
  Tensor<T> loss = f(taped);
  if (loss.size() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  Gradients<T> grads = tape.backward(loss);
  std::vector<Tensor<T>> analytic;
  for (auto& t : taped) analytic.push_back(grads.of(t));

  // numeric pass; inputs evaluated off-tape
  auto eval = [&](const std::vector<Tensor<T>>& xs) -> T {
    Tensor<T> v = f(xs);
    return v[0];
  };
  GradCheckResult<T> result;
  for (size_t which = 0; which < inputs.size(); ++which) {
    std::vector<int64_t> coords;
    if (coord_subset) {
      coords = (*coord_subset)[which];
    } else {
      coords.resize(static_cast<size_t>(inputs[which].size()));
      for (int64_t i = 0; i < inputs[which].size(); ++i) coords[static_cast<size_t>(i)] = i;
    }
    for (int64_t ci : coords) {
      std::vector<Tensor<T>> xs;
      for (auto& in : inputs) xs.push_back(in.clone());
      const T saved = xs[which][ci];
      auto probe = [&](T delta) {
        xs[which][ci] = saved + delta;
        return eval(xs);
      };
      const T an = analytic[which][ci];
      // A coordinate passes if the analytic value matches the numeric
      // derivative at any of the step widths; the best-agreeing width is the
      // valid estimate (the others are dominated by truncation or noise).
      T best_rel = std::numeric_limits<T>::infinity();
      T best_numeric = 0;
      for (T eps : eps_list) {
        T numeric;
        if (order == 4) {
          const T d1 = (probe(eps) - probe(-eps)) / (2 * eps);
          const T d2 = (probe(2 * eps) - probe(-2 * eps)) / (4 * eps);
          numeric = (4 * d1 - d2) / 3;
        } else {
          numeric = (probe(eps) - probe(-eps)) / (2 * eps);
        }
        const T denom = std::max({std::fabs(an), std::fabs(numeric), T(1e-8)});
        const T rel = std::fabs(an - numeric) / denom;
        if (rel < best_rel) {
          best_rel = rel;
          best_numeric = numeric;
        }
        // a coordinate that already agrees this well needs no further widths
        if (early_stop > 0 && best_rel < early_stop) break;
      }
      if (best_rel > result.max_rel_error) {
        result.max_rel_error = best_rel;
        result.worst_input = static_cast<int64_t>(which);
        result.worst_coord = ci;
        result.analytic = an;
        result.numeric = best_numeric;
      }
    }
  }
  return result;
}

// Single-step-width form, the default oracle for individual ops.
template <typename T>
GradCheckResult<T> grad_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> inputs, T eps = T(1e-5),
    const std::vector<std::vector<int64_t>>* coord_subset = nullptr, int order = 2) {
  return grad_check_multi(f, std::move(inputs), std::vector<T>{eps}, coord_subset, order);
}

// Composite-block form: fourth-order stencils over a width ladder so stiff
// (high-truncation), near-floor (noise-limited), and in-between coordinates
// each get one well-conditioned estimate. Widths run largest-first with an
// early stop, so the common flat coordinates cost a single stencil.
template <typename T>
GradCheckResult<T> grad_check_block(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
    std::vector<Tensor<T>> inputs,
    const std::vector<std::vector<int64_t>>* coord_subset = nullptr, T early_stop = T(5e-5)) {
  return grad_check_multi(f, std::move(inputs), std::vector<T>{T(5e-4), T(2e-5), T(3e-3)},
                          coord_subset, 4, early_stop);
}

}  // namespace cmt
