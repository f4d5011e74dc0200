#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cmt/layers.hpp"
#include "cmt/ops.hpp"

namespace cmt {

// ---------------------------------------------------------------------------
// SSIM / MS-SSIM machinery (differentiable; built from tensor ops)
// ---------------------------------------------------------------------------

namespace detail {

// 11x11 Gaussian window (sigma 1.5) as a [11,11,1,1] conv kernel
template <typename T>
Tensor<T> ssim_window() {
  constexpr int kSize = 11;
  constexpr double kSigma = 1.5;
  Tensor<T> w({kSize, kSize, 1, 1});
  double total = 0;
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const double dy = y - (kSize - 1) / 2.0;
      const double dx = x - (kSize - 1) / 2.0;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
      w.at({y, x, 0, 0}) = static_cast<T>(v);
      total += v;
    }
  for (int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] / total);
  return w;
}

// differentiable NTSC luminance of an [H,W,3] tensor -> [H,W,1]
template <typename T>
Tensor<T> luminance_op(const Tensor<T>& rgb) {
  Tensor<T> coeff({1, 1, 3, 1});
  coeff[0] = T(0.299);
  coeff[1] = T(0.587);
  coeff[2] = T(0.114);
  return conv2d(rgb, coeff, 1, Pad::same);
}

template <typename T>
struct SsimTerms {
  Tensor<T> luminance;          // scalar mean of the luminance comparison
  Tensor<T> contrast_structure; // scalar mean of the cs comparison
};

// single-scale SSIM terms on 1-channel maps, valid 11x11 Gaussian window
template <typename T>
SsimTerms<T> ssim_terms(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("ssim: shape mismatch");
  if (a.dim(0) < 11 || a.dim(1) < 11)
    throw ShapeError("ssim: image " + std::to_string(a.dim(0)) + "x" + std::to_string(a.dim(1)) +
                     " smaller than the 11x11 window");
  const T c1 = T(0.01) * T(0.01);
  const T c2 = T(0.03) * T(0.03);
  Tensor<T> window = ssim_window<T>();
  auto blur = [&](const Tensor<T>& x) { return conv2d(x, window, 1, Pad::valid); };
  Tensor<T> mu_a = blur(a);
  Tensor<T> mu_b = blur(b);
  Tensor<T> mu_aa = mul(mu_a, mu_a);
  Tensor<T> mu_bb = mul(mu_b, mu_b);
  Tensor<T> mu_ab = mul(mu_a, mu_b);
  Tensor<T> sigma_aa = sub(blur(mul(a, a)), mu_aa);
  Tensor<T> sigma_bb = sub(blur(mul(b, b)), mu_bb);
  Tensor<T> sigma_ab = sub(blur(mul(a, b)), mu_ab);
  Tensor<T> lum = div(add_scalar(scale(mu_ab, T(2)), c1), add_scalar(add(mu_aa, mu_bb), c1));
  Tensor<T> cs =
      div(add_scalar(scale(sigma_ab, T(2)), c2), add_scalar(add(sigma_aa, sigma_bb), c2));
  return SsimTerms<T>{mean(lum), mean(cs)};
}

// standard weights of the 5-scale reference, renormalized to the first M
inline std::vector<double> ms_ssim_weights(int scales) {
  static const double kStandard[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  if (scales < 1 || scales > 5)
    throw UsageError("ms_ssim: scale count must be in [1,5], got " + std::to_string(scales));
  double total = 0;
  for (int i = 0; i < scales; ++i) total += kStandard[i];
  std::vector<double> w(static_cast<size_t>(scales));
  for (int i = 0; i < scales; ++i) w[static_cast<size_t>(i)] = kStandard[i] / total;
  return w;
}

}  // namespace detail

inline int64_t ms_ssim_min_side(int scales) { return (int64_t{1} << (scales - 1)) * 11; }

// MS-SSIM of two RGB images in [0,1], computed on their NTSC luminance.
// Contrast-structure terms enter at every scale; the luminance comparison
// only at the coarsest. Scales connect by 2x average pooling.
template <typename T>
Tensor<T> ms_ssim(const Tensor<T>& a, const Tensor<T>& b, int scales = 3) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("ms_ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int64_t min_side = std::min(a.dim(0), a.dim(1));
  if (min_side < ms_ssim_min_side(scales))
    throw ShapeError("ms_ssim: image side " + std::to_string(min_side) + " too small for " +
                     std::to_string(scales) + " scales (needs >= " +
                     std::to_string(ms_ssim_min_side(scales)) +
                     "); use fewer scales");
  const auto weights = detail::ms_ssim_weights(scales);
  Tensor<T> la = detail::luminance_op(a);
  Tensor<T> lb = detail::luminance_op(b);
  Tensor<T> product = Tensor<T>::scalar(T(1));
  for (int s = 0; s < scales; ++s) {
    auto terms = detail::ssim_terms(la, lb);
    const T weight = static_cast<T>(weights[static_cast<size_t>(s)]);
    Tensor<T> cs_pos = clamp_min(terms.contrast_structure, T(1e-6));
    if (s == scales - 1) {
      Tensor<T> full = mul(clamp_min(terms.luminance, T(1e-6)), cs_pos);
      product = mul(product, pow_scalar(full, weight));
    } else {
      product = mul(product, pow_scalar(cs_pos, weight));
      la = avg_pool2(la);
      lb = avg_pool2(lb);
    }
  }
  return product;
}

template <typename T>
Tensor<T> ms_ssim_loss(const Tensor<T>& i_hat, const Tensor<T>& i_gt, int scales = 3) {
  return sub(Tensor<T>::scalar(T(1)), ms_ssim(i_hat, i_gt, scales));
}

// Single-scale SSIM (the full luminance*cs comparison) on NTSC luminance.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b) {
  auto terms =
      detail::ssim_terms(detail::luminance_op(a), detail::luminance_op(b));
  return mul(terms.luminance, terms.contrast_structure);
}

// ---------------------------------------------------------------------------
// pixel losses and metrics
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& i_hat, const Tensor<T>& i_gt) {
  if (!(i_hat.shape() == i_gt.shape()))
    throw ShapeError("mse_loss: shape mismatch " + shape_str(i_hat.shape()) + " vs " +
                     shape_str(i_gt.shape()));
  Tensor<T> d = sub(i_hat, i_gt);
  return mean(mul(d, d));
}

// PSNR in dB against max_val, capped at 100 dB for (near-)identical images.
inline double psnr(double mse, double max_val = 1.0) {
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(max_val * max_val / mse);
}

template <typename T>
double psnr(const Tensor<T>& i_hat, const Tensor<T>& i_gt, double max_val = 1.0) {
  Tensor<T> m = mse_loss(i_hat, i_gt);
  return psnr(static_cast<double>(m[0]), max_val);
}

// ---------------------------------------------------------------------------
// perceptual loss with a frozen seeded feature stack
// ---------------------------------------------------------------------------

// Psi: a fixed 4-conv feature extractor (3->16->32->64->64 channels, stride 2
// on the first three, GELU after each). Weights are seeded and never trained.
template <typename T>
struct FixedFeatureNet {
  ConvLayer<T> c1, c2, c3, c4;

  static FixedFeatureNet make(uint64_t seed = 0x9e11) {
    Rng rng(seed);
    FixedFeatureNet net;
    net.c1 = ConvLayer<T>::make(3, 3, 3, 16, rng);
    net.c2 = ConvLayer<T>::make(3, 3, 16, 32, rng);
    net.c3 = ConvLayer<T>::make(3, 3, 32, 64, rng);
    net.c4 = ConvLayer<T>::make(3, 3, 64, 64, rng);
    // random-projection scale: O(1) responses on O(1) inputs
    for (Tensor<T>* w : {&net.c1.w, &net.c2.w, &net.c3.w, &net.c4.w}) {
      const T s = T(1) / std::sqrt(static_cast<T>(w->dim(0) * w->dim(1) * w->dim(2)));
      for (int64_t i = 0; i < w->size(); ++i)
        (*w)[i] = static_cast<T>(rng.normal()) * s;
    }
    return net;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> f = gelu(c1(x, 2));
    f = gelu(c2(f, 2));
    f = gelu(c3(f, 2));
    return gelu(c4(f, 1));
  }
};

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& i_hat, const Tensor<T>& i_gt,
                          const FixedFeatureNet<T>& psi) {
  if (!(i_hat.shape() == i_gt.shape()))
    throw ShapeError("perceptual_loss: shape mismatch");
  Tensor<T> fa = psi(i_hat);
  Tensor<T> fb = psi(i_gt);
  return mean(abs(sub(fa, fb)));
}

// ---------------------------------------------------------------------------
// multimodal reconstruction loss and the hybrid composition
// ---------------------------------------------------------------------------

// Mean MSE across the reconstructed/target modality pairs.
template <typename T>
Tensor<T> mm_loss(const std::vector<Tensor<T>>& m_hat, const std::vector<Tensor<T>>& m_gt) {
  if (m_hat.empty() || m_hat.size() != m_gt.size())
    throw ShapeError("mm_loss: modality count mismatch (" + std::to_string(m_hat.size()) +
                     " vs " + std::to_string(m_gt.size()) + ")");
  Tensor<T> acc = mse_loss(m_hat[0], m_gt[0]);
  for (size_t j = 1; j < m_hat.size(); ++j) acc = add(acc, mse_loss(m_hat[j], m_gt[j]));
  return scale(acc, T(1) / static_cast<T>(m_hat.size()));
}

// Largest MS-SSIM scale count an image supports (at most the requested one).
inline int feasible_ms_ssim_scales(int64_t h, int64_t w_, int requested) {
  int scales = std::min(requested, 5);
  while (scales > 1 && std::min(h, w_) < ms_ssim_min_side(scales)) --scales;
  return scales;
}

struct LossWeights {
  double gamma = 0.1;   // L_MM
  double alpha = 0.2;   // L_MS-SSIM
  double beta = 0.01;   // L_Perc
  int ms_ssim_scales = 3;
  bool use_mse = true;
  bool use_ms_ssim = true;
  bool use_perceptual = true;
  bool use_mm = true;
};

// Per-term values; disabled terms are absent. `total` stays on the tape for
// backward, the doubles are for reporting. Metric fields are filled by
// hybrid_loss when requested (they never contribute to the gradient).
template <typename T>
struct LossReport {
  Tensor<T> total;
  std::optional<double> l_mse, l_ms_ssim, l_perc, l_mm;
  double l_total = 0;
  std::optional<double> psnr, ssim, ms_ssim;
};

template <typename T>
LossReport<T> hybrid_loss(const Tensor<T>& i_hat, const Tensor<T>& i_gt,
                          const std::vector<Tensor<T>>& m_hat,
                          const std::vector<Tensor<T>>& m_gt, const FixedFeatureNet<T>& psi,
                          const LossWeights& weights, bool with_metrics = false) {
  LossReport<T> report;
  Tensor<T> total = Tensor<T>::scalar(T(0));
  if (weights.use_mse) {
    Tensor<T> term = mse_loss(i_hat, i_gt);
    report.l_mse = static_cast<double>(term[0]);
    total = add(total, term);
  }
  if (weights.use_ms_ssim) {
    Tensor<T> term = ms_ssim_loss(i_hat, i_gt, weights.ms_ssim_scales);
    report.l_ms_ssim = static_cast<double>(term[0]);
    total = add(total, scale(term, static_cast<T>(weights.alpha)));
  }
  if (weights.use_perceptual) {
    Tensor<T> term = perceptual_loss(i_hat, i_gt, psi);
    report.l_perc = static_cast<double>(term[0]);
    total = add(total, scale(term, static_cast<T>(weights.beta)));
  }
  if (weights.use_mm) {
    Tensor<T> term = mm_loss(m_hat, m_gt);
    report.l_mm = static_cast<double>(term[0]);
    total = add(total, scale(term, static_cast<T>(weights.gamma)));
  }
  report.total = total;
  report.l_total = static_cast<double>(total[0]);
  if (with_metrics) {
    // metrics are evaluated off the tape on clipped copies
    Tensor<T> hat_c = i_hat.clone();
    for (int64_t i = 0; i < hat_c.size(); ++i) hat_c[i] = std::clamp(hat_c[i], T(0), T(1));
    Tensor<T> gt_c = i_gt.clone();
    report.psnr = psnr(hat_c, gt_c);
    report.ssim = static_cast<double>(ssim(hat_c, gt_c)[0]);
    const int scales = feasible_ms_ssim_scales(i_hat.dim(0), i_hat.dim(1), weights.ms_ssim_scales
                                                                               ? weights.ms_ssim_scales
                                                                               : 3);
    report.ms_ssim = static_cast<double>(ms_ssim(hat_c, gt_c, scales)[0]);
  }
  return report;
}

}  // namespace cmt
