#pragma once

#include <string>
#include <vector>

#include "cmt/layers.hpp"
#include "cmt/ops.hpp"

namespace cmt {

// How auxiliary features enter the attention block. `cm_msa` is the full
// cross-modal scheme; `msa` is the no-injection baseline; the rest are the
// alternative injection mechanisms used by the ablation harness.
enum class InjectionMode { msa, add, concat, q_replace, v_pointwise_mul, cm_msa };

inline const char* to_string(InjectionMode mode) {
  switch (mode) {
    case InjectionMode::msa: return "msa";
    case InjectionMode::add: return "add";
    case InjectionMode::concat: return "concat";
    case InjectionMode::q_replace: return "q_replace";
    case InjectionMode::v_pointwise_mul: return "v_pointwise_mul";
    case InjectionMode::cm_msa: return "cm_msa";
  }
  return "?";
}

inline InjectionMode injection_mode_from_string(const std::string& s) {
  for (InjectionMode m : {InjectionMode::msa, InjectionMode::add, InjectionMode::concat,
                          InjectionMode::q_replace, InjectionMode::v_pointwise_mul,
                          InjectionMode::cm_msa})
    if (s == to_string(m)) return m;
  throw UsageError("unknown injection mode '" + s + "'");
}

// Channel-wise (transposed) multi-head attention with cross-modal fusion.
// Temperatures and gates live as unconstrained pre-activations; their
// effective values sigmoid into (0,1) on every forward, so they stay in range
// after any optimizer step.
template <typename T>
struct CmMsaParams {
  int64_t channels = 0;
  int heads = 1;
  InjectionMode mode = InjectionMode::cm_msa;
  std::vector<int> active;  // modality indices (0..8) this layer consumes

  ConvLayer<T> qkv;       // 1x1, C -> 3C
  ConvLayer<T> out_proj;  // 1x1, C -> C
  Tensor<T> tau_raw;      // scalar pre-activation, effective tau = sigmoid

  std::vector<ConvLayer<T>> mod_qk;   // per active modality, 1x1 C -> 2C
  std::vector<Tensor<T>> mod_tau_raw; // per active modality
  std::vector<Tensor<T>> theta_raw;   // per active modality

  ConvLayer<T> concat_reduce;  // 1x1 2C -> C (mode == concat)
  ConvLayer<T> v_gate;         // 1x1 C -> C (mode == v_pointwise_mul)

  static CmMsaParams make(int64_t c, int heads, InjectionMode mode, std::vector<int> active,
                          Rng& rng) {
    if (heads <= 0 || c % heads != 0)
      throw ShapeError("attention: channel count " + std::to_string(c) +
                       " not divisible by head count " + std::to_string(heads));
    CmMsaParams p;
    p.channels = c;
    p.heads = heads;
    p.mode = mode;
    p.active = std::move(active);
    p.qkv = ConvLayer<T>::make(1, 1, c, 3 * c, rng);
    p.out_proj = ConvLayer<T>::make(1, 1, c, c, rng);
    p.tau_raw = Tensor<T>({1});
    if (mode == InjectionMode::cm_msa) {
      for (size_t j = 0; j < p.active.size(); ++j) {
        p.mod_qk.push_back(ConvLayer<T>::make(1, 1, c, 2 * c, rng));
        p.mod_tau_raw.push_back(Tensor<T>({1}));
        p.theta_raw.push_back(Tensor<T>({1}));
      }
    }
    if (mode == InjectionMode::concat) p.concat_reduce = ConvLayer<T>::make(1, 1, 2 * c, c, rng);
    if (mode == InjectionMode::v_pointwise_mul) p.v_gate = ConvLayer<T>::make(1, 1, c, c, rng);
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    qkv.visit(prefix + ".qkv", fn);
    out_proj.visit(prefix + ".out", fn);
    fn(prefix + ".tau", tau_raw);
    for (size_t j = 0; j < mod_qk.size(); ++j) {
      const std::string mp = prefix + ".mod" + std::to_string(active[j]);
      mod_qk[j].visit(mp + ".qk", fn);
      fn(mp + ".tau", mod_tau_raw[j]);
      fn(mp + ".theta", theta_raw[j]);
    }
    if (mode == InjectionMode::concat) concat_reduce.visit(prefix + ".concat_reduce", fn);
    if (mode == InjectionMode::v_pointwise_mul) v_gate.visit(prefix + ".vgate", fn);
  }
};

// Per-head attention maps, exposed for tests and diagnostics. Each map is
// [heads, d, d] with d = C/heads, column-stochastic along its first map axis.
template <typename T>
struct AttentionMaps {
  Tensor<T> a_rgb;
  std::vector<Tensor<T>> a_mod;
  Tensor<T> a_cm;
};

namespace detail {

// [H,W,C] -> per-head token matrices [HW, C/k]
template <typename T>
std::vector<Tensor<T>> head_tokens(const Tensor<T>& fmap, int heads) {
  const int64_t hw = fmap.dim(0) * fmap.dim(1);
  Tensor<T> tokens = reshape(fmap, {hw, fmap.dim(2)});
  return split_equal(tokens, 1, heads);
}

// per-head [HW,d] outputs -> [H,W,C]
template <typename T>
Tensor<T> merge_heads(std::vector<Tensor<T>> heads_out, int64_t h, int64_t w) {
  Tensor<T> tokens = concat(heads_out, 1);
  return reshape(tokens, {h, w, tokens.dim(1)});
}

// stack per-head [d,d] maps into [k,d,d]
template <typename T>
Tensor<T> stack_maps(const std::vector<Tensor<T>>& maps) {
  std::vector<Tensor<T>> lifted;
  for (const auto& m : maps) lifted.push_back(reshape(m, {1, m.dim(0), m.dim(1)}));
  return concat(lifted, 0);
}

template <typename T>
std::vector<Tensor<T>> unstack_maps(const Tensor<T>& stacked) {
  std::vector<Tensor<T>> out;
  for (auto& part : split_equal(stacked, 0, static_cast<int>(stacked.dim(0))))
    out.push_back(reshape(part, {part.dim(1), part.dim(2)}));
  return out;
}

// softmax(K^T Q / tau) per head; column-stochastic over the K-derived axis
template <typename T>
std::vector<Tensor<T>> score_maps(const std::vector<Tensor<T>>& q_heads,
                                  const std::vector<Tensor<T>>& k_heads,
                                  const Tensor<T>& tau_eff) {
  std::vector<Tensor<T>> maps;
  for (size_t h = 0; h < q_heads.size(); ++h) {
    Tensor<T> scores = matmul(transpose(k_heads[h]), q_heads[h]);
    maps.push_back(softmax(div(scores, tau_eff), 0));
  }
  return maps;
}

}  // namespace detail

// Internal result of the RGB branch: pre-projection attended tokens per head
// plus the stacked map.
template <typename T>
struct RgbAttentionResult {
  Tensor<T> f_msa;                     // [H,W,C], V x A_RGB before out-projection
  std::vector<Tensor<T>> f_msa_heads;  // per-head [HW, d]
  Tensor<T> a_rgb;                     // [k, d, d]
};

template <typename T>
RgbAttentionResult<T> rgb_attention(const Tensor<T>& f_in, const CmMsaParams<T>& params) {
  if (f_in.rank() != 3 || f_in.dim(2) != params.channels)
    throw ShapeError("rgb_attention: expected [H,W," + std::to_string(params.channels) +
                     "], got " + shape_str(f_in.shape()));
  const int64_t h = f_in.dim(0), w = f_in.dim(1), c = params.channels;
  Tensor<T> qkv = params.qkv(f_in);  // [H,W,3C]
  auto qkv_parts = split(reshape(qkv, {h * w, 3 * c}), 1, {c, c, c});
  auto q_heads = split_equal(qkv_parts[0], 1, params.heads);
  auto k_heads = split_equal(qkv_parts[1], 1, params.heads);
  auto v_heads = split_equal(qkv_parts[2], 1, params.heads);
  Tensor<T> tau_eff = sigmoid(params.tau_raw);
  auto maps = detail::score_maps(q_heads, k_heads, tau_eff);
  RgbAttentionResult<T> result;
  for (int hh = 0; hh < params.heads; ++hh)
    result.f_msa_heads.push_back(matmul(v_heads[static_cast<size_t>(hh)],
                                        maps[static_cast<size_t>(hh)]));
  result.f_msa = detail::merge_heads(result.f_msa_heads, h, w);
  result.a_rgb = detail::stack_maps(maps);
  return result;
}

// Attention map of one injected modality feature (Q_j/K_j only, no value).
template <typename T>
Tensor<T> modality_attention(const Tensor<T>& f_mj, size_t j, const CmMsaParams<T>& params) {
  if (j >= params.mod_qk.size())
    throw ShapeError("modality_attention: modality slot " + std::to_string(j) + " out of range");
  if (f_mj.rank() != 3 || f_mj.dim(2) != params.channels)
    throw ShapeError("modality_attention: expected [H,W," + std::to_string(params.channels) +
                     "], got " + shape_str(f_mj.shape()));
  const int64_t c = params.channels;
  Tensor<T> qk = params.mod_qk[j](f_mj);
  auto parts = split(reshape(qk, {f_mj.dim(0) * f_mj.dim(1), 2 * c}), 1, {c, c});
  auto q_heads = split_equal(parts[0], 1, params.heads);
  auto k_heads = split_equal(parts[1], 1, params.heads);
  Tensor<T> tau_eff = sigmoid(params.mod_tau_raw[j]);
  return detail::stack_maps(detail::score_maps(q_heads, k_heads, tau_eff));
}

// A_CM = softmax of the ordered matrix product of the theta-gated modality
// maps (ascending modality order), re-normalized along the same axis as the
// primary softmax.
template <typename T>
Tensor<T> cross_modal_fuse(const std::vector<Tensor<T>>& a_mod,
                           const std::vector<Tensor<T>>& theta_raw) {
  if (a_mod.empty()) throw ShapeError("cross_modal_fuse: no modality maps");
  if (a_mod.size() != theta_raw.size())
    throw ShapeError("cross_modal_fuse: map/gate count mismatch");
  const int heads = static_cast<int>(a_mod[0].dim(0));
  for (const auto& m : a_mod)
    if (!(m.shape() == a_mod[0].shape()))
      throw ShapeError("cross_modal_fuse: map shape mismatch: " + shape_str(m.shape()) +
                       " vs " + shape_str(a_mod[0].shape()));
  std::vector<std::vector<Tensor<T>>> per_head;
  for (const auto& m : a_mod) per_head.push_back(detail::unstack_maps(m));
  std::vector<Tensor<T>> fused;
  for (int h = 0; h < heads; ++h) {
    Tensor<T> prod = mul(per_head[0][static_cast<size_t>(h)], sigmoid(theta_raw[0]));
    for (size_t j = 1; j < a_mod.size(); ++j)
      prod = matmul(prod, mul(per_head[j][static_cast<size_t>(h)], sigmoid(theta_raw[j])));
    fused.push_back(softmax(prod, 0));
  }
  return detail::stack_maps(fused);
}

namespace detail {

// mean over the active modality features, used by the alternative modes
template <typename T>
Tensor<T> mean_modality(const std::vector<Tensor<T>>& f_mods) {
  if (f_mods.empty()) throw ShapeError("injection: no modality features");
  Tensor<T> acc = f_mods[0];
  for (size_t j = 1; j < f_mods.size(); ++j) acc = add(acc, f_mods[j]);
  return scale(acc, T(1) / static_cast<T>(f_mods.size()));
}

template <typename T>
Tensor<T> plain_msa_from(const std::vector<Tensor<T>>& q_heads,
                         const std::vector<Tensor<T>>& k_heads,
                         const std::vector<Tensor<T>>& v_heads, const CmMsaParams<T>& params,
                         int64_t h, int64_t w) {
  Tensor<T> tau_eff = sigmoid(params.tau_raw);
  auto maps = score_maps(q_heads, k_heads, tau_eff);
  std::vector<Tensor<T>> outs;
  for (size_t hh = 0; hh < maps.size(); ++hh) outs.push_back(matmul(v_heads[hh], maps[hh]));
  return params.out_proj(merge_heads(outs, h, w));
}

}  // namespace detail

template <typename T>
void check_modality_features(const Tensor<T>& f_in, const std::vector<Tensor<T>>& f_mods,
                             const CmMsaParams<T>& params) {
  if (f_mods.size() != params.active.size())
    throw ShapeError("attention: got " + std::to_string(f_mods.size()) +
                     " modality features, layer is configured for " +
                     std::to_string(params.active.size()));
  for (const auto& m : f_mods)
    if (m.dim(0) != f_in.dim(0) || m.dim(1) != f_in.dim(1) || m.dim(2) != f_in.dim(2))
      throw ShapeError("attention: modality feature shape " + shape_str(m.shape()) +
                       " does not match input " + shape_str(f_in.shape()));
}

// Full CM-MSA: RGB branch, modality maps, gated fusion, secondary softmax,
// application to the RGB-attended tokens, output projection.
template <typename T>
Tensor<T> cm_msa_forward(const Tensor<T>& f_in, const std::vector<Tensor<T>>& f_mods,
                         const CmMsaParams<T>& params, AttentionMaps<T>* maps_out = nullptr) {
  if (params.mode != InjectionMode::cm_msa)
    throw UsageError("cm_msa_forward called with mode " + std::string(to_string(params.mode)));
  check_modality_features(f_in, f_mods, params);
  const int64_t h = f_in.dim(0), w = f_in.dim(1);
  RgbAttentionResult<T> rgb = rgb_attention(f_in, params);
  std::vector<Tensor<T>> a_mod;
  for (size_t j = 0; j < f_mods.size(); ++j)
    a_mod.push_back(modality_attention(f_mods[j], j, params));
  Tensor<T> a_cm = cross_modal_fuse(a_mod, params.theta_raw);
  auto a_cm_heads = detail::unstack_maps(a_cm);
  std::vector<Tensor<T>> outs;
  for (size_t hh = 0; hh < rgb.f_msa_heads.size(); ++hh)
    outs.push_back(matmul(rgb.f_msa_heads[hh], a_cm_heads[hh]));
  Tensor<T> result = params.out_proj(detail::merge_heads(outs, h, w));
  if (maps_out) {
    maps_out->a_rgb = rgb.a_rgb;
    maps_out->a_mod = a_mod;
    maps_out->a_cm = a_cm;
  }
  return result;
}

// The alternative injection mechanisms (ablation table rows) plus the plain
// MSA baseline. Modality features are reduced by channel mean before use.
template <typename T>
Tensor<T> inject_alternative(const Tensor<T>& f_in, const std::vector<Tensor<T>>& f_mods,
                             const CmMsaParams<T>& params) {
  if (params.mode == InjectionMode::cm_msa)
    throw UsageError("inject_alternative called with mode cm_msa");
  const int64_t h = f_in.dim(0), w = f_in.dim(1), c = params.channels;
  if (params.mode != InjectionMode::msa) check_modality_features(f_in, f_mods, params);

  auto qkv_heads = [&](const Tensor<T>& src) {
    Tensor<T> qkv = params.qkv(src);
    auto parts = split(reshape(qkv, {h * w, 3 * c}), 1, {c, c, c});
    return std::array<std::vector<Tensor<T>>, 3>{split_equal(parts[0], 1, params.heads),
                                                 split_equal(parts[1], 1, params.heads),
                                                 split_equal(parts[2], 1, params.heads)};
  };

  switch (params.mode) {
    case InjectionMode::msa: {
      auto [q, k, v] = qkv_heads(f_in);
      return detail::plain_msa_from(q, k, v, params, h, w);
    }
    case InjectionMode::add: {
      auto [q, k, v] = qkv_heads(add(f_in, detail::mean_modality(f_mods)));
      return detail::plain_msa_from(q, k, v, params, h, w);
    }
    case InjectionMode::concat: {
      Tensor<T> fused = params.concat_reduce(
          concat<T>({f_in, detail::mean_modality(f_mods)}, 2));
      auto [q, k, v] = qkv_heads(fused);
      return detail::plain_msa_from(q, k, v, params, h, w);
    }
    case InjectionMode::q_replace: {
      auto [q_in, k, v] = qkv_heads(f_in);
      auto [q_mod, k_mod, v_mod] = qkv_heads(detail::mean_modality(f_mods));
      (void)q_in;
      (void)k_mod;
      (void)v_mod;
      return detail::plain_msa_from(q_mod, k, v, params, h, w);
    }
    case InjectionMode::v_pointwise_mul: {
      auto [q, k, v] = qkv_heads(f_in);
      Tensor<T> gate =
          reshape(sigmoid(params.v_gate(detail::mean_modality(f_mods))), {h * w, c});
      auto gate_heads = split_equal(gate, 1, params.heads);
      std::vector<Tensor<T>> gated;
      for (size_t hh = 0; hh < v.size(); ++hh) gated.push_back(mul(v[hh], gate_heads[hh]));
      return detail::plain_msa_from(q, k, gated, params, h, w);
    }
    default:
      throw UsageError("unknown injection mode");
  }
}

// Mode dispatch used by the transformer block.
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& f_in, const std::vector<Tensor<T>>& f_mods,
                            const CmMsaParams<T>& params) {
  return params.mode == InjectionMode::cm_msa ? cm_msa_forward(f_in, f_mods, params)
                                              : inject_alternative(f_in, f_mods, params);
}

}  // namespace cmt
