#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt {

// Adam with bias correction. `params` is the stable-order (name, tensor*)
// list from named_params; state is kept aligned with it.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  int64_t t = 0;

  template <typename Params>
  void init(const Params& params) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& [name, tensor] : params) {
      m.push_back(Tensor<T>::zeros(tensor->shape()));
      v.push_back(Tensor<T>::zeros(tensor->shape()));
    }
  }
};

template <typename T>
struct AdamConfig {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Updates parameters in place. Gradients must be aligned with params; a
// non-finite gradient aborts with the parameter's name.
template <typename T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>*>>& params,
               const std::vector<Tensor<T>>& grads, AdamState<T>& state, T lr,
               const AdamConfig<T>& cfg = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state count mismatch");
  ++state.t;
  const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(state.t));
  const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i].second;
    const Tensor<T>& g = grads[i];
    if (!p.same_shape(g))
      throw ShapeError("adam_step: gradient shape mismatch for " + params[i].first);
    Tensor<T>& mi = state.m[i];
    Tensor<T>& vi = state.v[i];
    for (int64_t k = 0; k < p.size(); ++k) {
      const T gk = g[k];
      if (!std::isfinite(static_cast<double>(gk)))
        throw NumericError("non-finite gradient for parameter " + params[i].first);
      mi[k] = cfg.beta1 * mi[k] + (T(1) - cfg.beta1) * gk;
      vi[k] = cfg.beta2 * vi[k] + (T(1) - cfg.beta2) * gk * gk;
      const T m_hat = mi[k] / bc1;
      const T v_hat = vi[k] / bc2;
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

// Scales gradients in place so their global l2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename T>
T clip_global_norm(std::vector<Tensor<T>>& grads, T max_norm) {
  double total = 0;
  for (const auto& g : grads)
    for (int64_t k = 0; k < g.size(); ++k)
      total += static_cast<double>(g[k]) * static_cast<double>(g[k]);
  const T norm = static_cast<T>(std::sqrt(total));
  if (max_norm > 0 && norm > max_norm) {
    const T s = max_norm / norm;
    for (auto& g : grads)
      for (int64_t k = 0; k < g.size(); ++k) g[k] *= s;
  }
  return norm;
}

// Cosine annealing from lr_init at t=0 to lr_final at t=total_iters. The
// endpoints return the configured rates exactly (cos(pi*t/T) only lands on
// +-1 up to rounding).
inline double cosine_lr(int64_t t, int64_t total_iters, double lr_init, double lr_final) {
  if (t < 0 || t > total_iters)
    throw UsageError("cosine_lr: step " + std::to_string(t) + " outside [0," +
                     std::to_string(total_iters) + "]");
  if (t == 0) return lr_init;
  if (t == total_iters) return lr_final;
  return lr_final +
         0.5 * (lr_init - lr_final) *
             (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total_iters)));
}

}  // namespace cmt
