#pragma once

#include <string>

#include "cmt/ops.hpp"

namespace cmt {

// Conv layer parameters. Init: truncated-normal (2 sigma) weights with
// sigma=0.02, zero biases.
template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [kh,kw,cin,cout]
  Tensor<T> b;  // [cout]

  static ConvLayer make(int64_t kh, int64_t kw, int64_t cin, int64_t cout, Rng& rng) {
    ConvLayer layer;
    layer.w = Tensor<T>({kh, kw, cin, cout});
    for (int64_t i = 0; i < layer.w.size(); ++i)
      layer.w[i] = static_cast<T>(rng.trunc_normal(0.02));
    layer.b = Tensor<T>({cout});
    return layer;
  }

  Tensor<T> operator()(const Tensor<T>& x, int stride = 1, Pad pad = Pad::same) const {
    return conv2d(x, w, b, stride, pad);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

// Stride-2 transposed conv layer; doubles spatial dims.
template <typename T>
struct DeconvLayer {
  Tensor<T> w;  // [kh,kw,cout,cin]
  Tensor<T> b;  // [cout]

  static DeconvLayer make(int64_t kh, int64_t kw, int64_t cin, int64_t cout, Rng& rng) {
    DeconvLayer layer;
    layer.w = Tensor<T>({kh, kw, cout, cin});
    for (int64_t i = 0; i < layer.w.size(); ++i)
      layer.w[i] = static_cast<T>(rng.trunc_normal(0.02));
    layer.b = Tensor<T>({cout});
    return layer;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return transposed_conv2d(x, w, b); }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

// Layer-norm affine parameters (gain ones, bias zeros).
template <typename T>
struct NormLayer {
  Tensor<T> gain;
  Tensor<T> bias;

  static NormLayer make(int64_t c) {
    NormLayer layer;
    layer.gain = Tensor<T>::full({c}, T(1));
    layer.bias = Tensor<T>({c});
    return layer;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
  }
};

}  // namespace cmt
