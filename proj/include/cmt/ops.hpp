#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "cmt/tape.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

namespace detail {

template <typename T>
void attach(Tensor<T>& out, Tape<T>* tape, std::vector<int> inputs,
            typename Tape<T>::BackFn back) {
  if (!tape) return;
  out.tape = tape;
  out.node = tape->record(std::move(inputs), std::move(back));
}

enum class Broadcast { same, a_scalar, b_scalar };

template <typename T>
Broadcast broadcast_kind(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.same_shape(b)) return Broadcast::same;
  // when both sides are single-element (e.g. a 1x1 map times a scalar gate)
  // the left operand keeps its shape
  if (b.size() == 1) return Broadcast::b_scalar;
  if (a.size() == 1) return Broadcast::a_scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()) + " (broadcast is scalar-only)");
}

template <typename T>
Tensor<T> reduce_to_scalar(const Tensor<T>& t) {
  T acc = 0;
  const T* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i) acc += p[i];
  return Tensor<T>::scalar(acc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind("add", a, b);
  const Tensor<T>& big = (kind == detail::Broadcast::a_scalar) ? b : a;
  Tensor<T> out(big.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  if (kind == detail::Broadcast::same)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  else if (kind == detail::Broadcast::a_scalar)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[0] + pb[i];
  else
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[0];
  check_finite("add", out);
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  int ia = detail::node_or_none(a), ib = detail::node_or_none(b);
  detail::attach(out, tape, {ia, ib}, [ia, ib, kind](const Tensor<T>& up, GradSink<T>& g) {
    if (ia >= 0)
      g.add(ia, kind == detail::Broadcast::a_scalar ? detail::reduce_to_scalar(up) : up);
    if (ib >= 0)
      g.add(ib, kind == detail::Broadcast::b_scalar ? detail::reduce_to_scalar(up) : up);
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind("sub", a, b);
  const Tensor<T>& big = (kind == detail::Broadcast::a_scalar) ? b : a;
  Tensor<T> out(big.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  if (kind == detail::Broadcast::same)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  else if (kind == detail::Broadcast::a_scalar)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[0] - pb[i];
  else
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[0];
  check_finite("sub", out);
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  int ia = detail::node_or_none(a), ib = detail::node_or_none(b);
  detail::attach(out, tape, {ia, ib}, [ia, ib, kind](const Tensor<T>& up, GradSink<T>& g) {
    if (ia >= 0)
      g.add(ia, kind == detail::Broadcast::a_scalar ? detail::reduce_to_scalar(up) : up);
    if (ib >= 0) {
      Tensor<T> neg(up.shape());
      for (int64_t i = 0; i < up.size(); ++i) neg[i] = -up[i];
      g.add(ib, kind == detail::Broadcast::b_scalar ? detail::reduce_to_scalar(neg) : neg);
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind("mul", a, b);
  const Tensor<T>& big = (kind == detail::Broadcast::a_scalar) ? b : a;
  Tensor<T> out(big.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  if (kind == detail::Broadcast::same)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  else if (kind == detail::Broadcast::a_scalar)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[0] * pb[i];
  else
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[0];
  check_finite("mul", out);
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  int ia = detail::node_or_none(a), ib = detail::node_or_none(b);
  detail::attach(out, tape, {ia, ib},
                 [ia, ib, kind, a, b](const Tensor<T>& up, GradSink<T>& g) {
                   const int64_t n = up.size();
                   if (ia >= 0) {
                     Tensor<T> da(up.shape());
                     if (kind == detail::Broadcast::a_scalar || kind == detail::Broadcast::same)
                       for (int64_t i = 0; i < n; ++i)
                         da[i] = up[i] * (kind == detail::Broadcast::same ? b[i] : b[i]);
                     else
                       for (int64_t i = 0; i < n; ++i) da[i] = up[i] * b[0];
                     g.add(ia, kind == detail::Broadcast::a_scalar ? detail::reduce_to_scalar(da)
                                                                   : da);
                   }
                   if (ib >= 0) {
                     Tensor<T> db(up.shape());
                     if (kind == detail::Broadcast::b_scalar || kind == detail::Broadcast::same)
                       for (int64_t i = 0; i < n; ++i) db[i] = up[i] * a[i];
                     else
                       for (int64_t i = 0; i < n; ++i) db[i] = up[i] * a[0];
                     g.add(ib, kind == detail::Broadcast::b_scalar ? detail::reduce_to_scalar(db)
                                                                   : db);
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind("div", a, b);
  const Tensor<T>& big = (kind == detail::Broadcast::a_scalar) ? b : a;
  Tensor<T> out(big.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  if (kind == detail::Broadcast::same)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  else if (kind == detail::Broadcast::a_scalar)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[0] / pb[i];
  else
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[0];
  check_finite("div", out);
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  int ia = detail::node_or_none(a), ib = detail::node_or_none(b);
  detail::attach(out, tape, {ia, ib},
                 [ia, ib, kind, a, b](const Tensor<T>& up, GradSink<T>& g) {
                   const int64_t n = up.size();
                   auto bv = [&](int64_t i) {
                     return kind == detail::Broadcast::b_scalar ? b[0] : b[i];
                   };
                   auto av = [&](int64_t i) {
                     return kind == detail::Broadcast::a_scalar ? a[0] : a[i];
                   };
                   if (ia >= 0) {
                     Tensor<T> da(up.shape());
                     for (int64_t i = 0; i < n; ++i) da[i] = up[i] / bv(i);
                     g.add(ia, kind == detail::Broadcast::a_scalar ? detail::reduce_to_scalar(da)
                                                                   : da);
                   }
                   if (ib >= 0) {
                     Tensor<T> db(up.shape());
                     for (int64_t i = 0; i < n; ++i) {
                       T bb = bv(i);
                       db[i] = -up[i] * av(i) / (bb * bb);
                     }
                     g.add(ib, kind == detail::Broadcast::b_scalar ? detail::reduce_to_scalar(db)
                                                                   : db);
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  check_finite("scale", out);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia}, [ia, s](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> da(up.shape());
    for (int64_t i = 0; i < up.size(); ++i) da[i] = up[i] * s;
    g.add(ia, std::move(da));
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + s;
  check_finite("add_scalar", out);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia},
                 [ia](const Tensor<T>& up, GradSink<T>& g) { g.add(ia, up); });
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  Tensor<T> out = a.viewed(shape);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia},
                 [ia, old_shape = a.shape()](const Tensor<T>& up, GradSink<T>& g) {
                   g.add(ia, up.viewed(old_shape));
                 });
  return out;
}

namespace detail {

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

template <typename T>
Tensor<T> permute_data(const Tensor<T>& a, const std::vector<int>& perm) {
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = a.shape()[static_cast<size_t>(perm[i])];
  Tensor<T> out(out_shape);
  auto in_strides = strides_of(a.shape());
  auto out_strides = strides_of(out_shape);
  const int rank = a.rank();
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  const T* src = a.data();
  T* dst = out.data();
  const int64_t n = a.size();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t dst_flat = 0;
    for (int d = 0; d < rank; ++d)
      dst_flat += idx[static_cast<size_t>(perm[static_cast<size_t>(d)])] *
                  out_strides[static_cast<size_t>(d)];
    dst[dst_flat] = src[flat];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < a.shape()[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::vector<int> perm = {}) {
  if (perm.empty()) {
    if (a.rank() != 2) throw ShapeError("transpose: default permutation requires rank 2");
    perm = {1, 0};
  }
  if (static_cast<int>(perm.size()) != a.rank())
    throw ShapeError("transpose: permutation rank mismatch");
  Tensor<T> out = detail::permute_data(a, perm);
  int ia = detail::node_or_none(a);
  std::vector<int> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
  detail::attach(out, a.tape, {ia}, [ia, inv](const Tensor<T>& up, GradSink<T>& g) {
    g.add(ia, detail::permute_data(up, inv));
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw ShapeError("concat: shape mismatch at non-concat axis " + std::to_string(d));
    out_shape[static_cast<size_t>(axis)] += p.dim(axis);
  }
  Tensor<T> out(out_shape);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];
  const int64_t out_row = out_shape[static_cast<size_t>(axis)] * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t part_row = p.dim(axis) * inner;
    const T* src = p.data();
    T* dst = out.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(dst + o * out_row + offset, src + o * part_row,
                  static_cast<size_t>(part_row) * sizeof(T));
    offset += part_row;
  }
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (p.tape && tape && p.tape != tape) throw ShapeError("concat inputs on different tapes");
    if (p.tape) tape = p.tape;
  }
  std::vector<int> ids;
  std::vector<Shape> shapes;
  for (const auto& p : parts) {
    ids.push_back(detail::node_or_none(p));
    shapes.push_back(p.shape());
  }
  detail::attach(out, tape, ids,
                 [ids, shapes, axis, outer, inner, out_row](const Tensor<T>& up, GradSink<T>& g) {
                   int64_t offset = 0;
                   for (size_t pi = 0; pi < ids.size(); ++pi) {
                     const int64_t part_row = shapes[pi][static_cast<size_t>(axis)] * inner;
                     if (ids[pi] >= 0) {
                       Tensor<T> dp(shapes[pi]);
                       const T* src = up.data();
                       T* dst = dp.data();
                       for (int64_t o = 0; o < outer; ++o)
                         std::memcpy(dst + o * part_row, src + o * out_row + offset,
                                     static_cast<size_t>(part_row) * sizeof(T));
                       g.add(ids[pi], std::move(dp));
                     }
                     offset += part_row;
                   }
                 });
  return out;
}

// Splits along `axis` into chunks of the given sizes (they must sum to the dim).
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, int axis, const std::vector<int64_t>& sizes) {
  const int rank = a.rank();
  if (axis < 0 || axis >= rank) throw ShapeError("split: axis out of range");
  int64_t total = 0;
  for (int64_t s : sizes) total += s;
  if (total != a.dim(axis))
    throw ShapeError("split: sizes sum to " + std::to_string(total) + ", axis dim is " +
                     std::to_string(a.dim(axis)));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);
  const int64_t in_row = a.dim(axis) * inner;
  std::vector<Tensor<T>> outs;
  int64_t offset = 0;
  for (int64_t s : sizes) {
    Shape shape = a.shape();
    shape[static_cast<size_t>(axis)] = s;
    Tensor<T> part(shape);
    const int64_t part_row = s * inner;
    const T* src = a.data();
    T* dst = part.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(dst + o * part_row, src + o * in_row + offset,
                  static_cast<size_t>(part_row) * sizeof(T));
    int ia = detail::node_or_none(a);
    detail::attach(part, a.tape, {ia},
                   [ia, in_shape = a.shape(), offset, part_row, in_row, outer](
                       const Tensor<T>& up, GradSink<T>& g) {
                     Tensor<T> da(in_shape);  // zeros
                     const T* src = up.data();
                     T* dst = da.data();
                     for (int64_t o = 0; o < outer; ++o)
                       std::memcpy(dst + o * in_row + offset, src + o * part_row,
                                   static_cast<size_t>(part_row) * sizeof(T));
                     g.add(ia, std::move(da));
                   });
    outs.push_back(std::move(part));
    offset += part_row;
  }
  return outs;
}

template <typename T>
std::vector<Tensor<T>> split_equal(const Tensor<T>& a, int axis, int parts) {
  if (a.dim(axis) % parts != 0)
    throw ShapeError("split_equal: axis dim " + std::to_string(a.dim(axis)) +
                     " not divisible by " + std::to_string(parts));
  return split(a, axis, std::vector<int64_t>(static_cast<size_t>(parts), a.dim(axis) / parts));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = detail::reduce_to_scalar(a);
  check_finite("sum", out);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia},
                 [ia, shape = a.shape()](const Tensor<T>& up, GradSink<T>& g) {
                   g.add(ia, Tensor<T>::full(shape, up[0]));
                 });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv_n = T(1) / static_cast<T>(a.size());
  T acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += a[i];
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  check_finite("mean", out);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia},
                 [ia, shape = a.shape(), inv_n](const Tensor<T>& up, GradSink<T>& g) {
                   g.add(ia, Tensor<T>::full(shape, up[0] * inv_n));
                 });
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int rank = a.rank();
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range");
  int64_t outer = 1, inner = 1;
  const int64_t mid = a.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * mid * inner + in;
      T mx = src[base];
      for (int64_t m = 1; m < mid; ++m) mx = std::max(mx, src[base + m * inner]);
      T denom = 0;
      for (int64_t m = 0; m < mid; ++m) {
        T e = std::exp(src[base + m * inner] - mx);
        dst[base + m * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int64_t m = 0; m < mid; ++m) dst[base + m * inner] *= inv;
    }
  }
  check_finite("softmax", out);
  int ia = detail::node_or_none(a);
  detail::attach(out, a.tape, {ia},
                 [ia, out, outer, mid, inner](const Tensor<T>& up, GradSink<T>& g) {
                   Tensor<T> da(up.shape());
                   const T* s = out.data();
                   const T* u = up.data();
                   T* d = da.data();
                   for (int64_t o = 0; o < outer; ++o) {
                     for (int64_t in = 0; in < inner; ++in) {
                       const int64_t base = o * mid * inner + in;
                       T dot = 0;
                       for (int64_t m = 0; m < mid; ++m)
                         dot += u[base + m * inner] * s[base + m * inner];
                       for (int64_t m = 0; m < mid; ++m) {
                         const int64_t k = base + m * inner;
                         d[k] = s[k] * (u[k] - dot);
                       }
                     }
                   }
                   g.add(ia, std::move(da));
                 });
  return out;
}

// Normalizes over the trailing (channel) axis per spatial token.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const int64_t c = x.dim(x.rank() - 1);
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) + "/" +
                     std::to_string(bias.size()) + " does not match channel count " +
                     std::to_string(c));
  const int64_t tokens = x.size() / c;
  Tensor<T> out(x.shape());
  Tensor<T> norm(x.shape());        // pre-affine normalized values, saved for backward
  Tensor<T> inv_sigma({tokens});
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  T* pn = norm.data();
  for (int64_t t = 0; t < tokens; ++t) {
    const T* row = px + t * c;
    T mu = 0;
    for (int64_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<T>(c);
    T var = 0;
    for (int64_t i = 0; i < c; ++i) {
      T d = row[i] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_sigma[t] = inv;
    T* orow = po + t * c;
    T* nrow = pn + t * c;
    for (int64_t i = 0; i < c; ++i) {
      nrow[i] = (row[i] - mu) * inv;
      orow[i] = nrow[i] * pg[i] + pb[i];
    }
  }
  check_finite("layer_norm", out);
  Tape<T>* tape = detail::common_tape<T>({&x, &gain, &bias});
  int ix = detail::node_or_none(x);
  int ig = detail::node_or_none(gain);
  int ib = detail::node_or_none(bias);
  detail::attach(out, tape, {ix, ig, ib},
                 [ix, ig, ib, norm, inv_sigma, gain, tokens, c](const Tensor<T>& up,
                                                                GradSink<T>& g) {
                   const T* u = up.data();
                   const T* nv = norm.data();
                   const T* pg = gain.data();
                   if (ig >= 0) {
                     Tensor<T> dg({c});
                     for (int64_t t = 0; t < tokens; ++t)
                       for (int64_t i = 0; i < c; ++i) dg[i] += u[t * c + i] * nv[t * c + i];
                     g.add(ig, std::move(dg));
                   }
                   if (ib >= 0) {
                     Tensor<T> db({c});
                     for (int64_t t = 0; t < tokens; ++t)
                       for (int64_t i = 0; i < c; ++i) db[i] += u[t * c + i];
                     g.add(ib, std::move(db));
                   }
                   if (ix >= 0) {
                     Tensor<T> dx(up.shape());
                     T* d = dx.data();
                     for (int64_t t = 0; t < tokens; ++t) {
                       const T* urow = u + t * c;
                       const T* nrow = nv + t * c;
                       T* drow = d + t * c;
                       T mean_dy = 0, mean_dyn = 0;
                       for (int64_t i = 0; i < c; ++i) {
                         const T dy = urow[i] * pg[i];
                         mean_dy += dy;
                         mean_dyn += dy * nrow[i];
                       }
                       mean_dy /= static_cast<T>(c);
                       mean_dyn /= static_cast<T>(c);
                       const T inv = inv_sigma[t];
                       for (int64_t i = 0; i < c; ++i) {
                         const T dy = urow[i] * pg[i];
                         drow[i] = inv * (dy - mean_dy - nrow[i] * mean_dyn);
                       }
                     }
                     g.add(ix, std::move(dx));
                   }
                 });
  return out;
}

// Exact-erf GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  Tensor<T> cdf(x.shape());
  const T* px = x.data();
  T* po = out.data();
  T* pc = cdf.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double c = 0.5 * (1.0 + std::erf(static_cast<double>(px[i]) * inv_sqrt2));
    pc[i] = static_cast<T>(c);
    po[i] = static_cast<T>(static_cast<double>(px[i]) * c);
  }
  check_finite("gelu", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia}, [ia, x, cdf](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> dx(up.shape());
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (int64_t i = 0; i < up.size(); ++i) {
      const double xv = static_cast<double>(x[i]);
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      dx[i] = up[i] * static_cast<T>(static_cast<double>(cdf[i]) + xv * pdf);
    }
    g.add(ia, std::move(dx));
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  check_finite("sigmoid", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia}, [ia, out](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> dx(up.shape());
    for (int64_t i = 0; i < up.size(); ++i) dx[i] = up[i] * out[i] * (T(1) - out[i]);
    g.add(ia, std::move(dx));
  });
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::fabs(x[i]);
  check_finite("abs", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia}, [ia, x](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> dx(up.shape());
    for (int64_t i = 0; i < up.size(); ++i)
      dx[i] = x[i] > 0 ? up[i] : (x[i] < 0 ? -up[i] : T(0));
    g.add(ia, std::move(dx));
  });
  return out;
}

// x^p for strictly positive x (callers clamp first when p is fractional).
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::pow(x[i], p);
  check_finite("pow_scalar", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia}, [ia, x, p](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> dx(up.shape());
    for (int64_t i = 0; i < up.size(); ++i) dx[i] = up[i] * p * std::pow(x[i], p - T(1));
    g.add(ia, std::move(dx));
  });
  return out;
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], lo);
  check_finite("clamp_min", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia}, [ia, x, lo](const Tensor<T>& up, GradSink<T>& g) {
    Tensor<T> dx(up.shape());
    for (int64_t i = 0; i < up.size(); ++i) dx[i] = x[i] > lo ? up[i] : T(0);
    g.add(ia, std::move(dx));
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void matmul_kernel(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ out,
                   int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T av = a[i * k + kk];
      const T* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::matmul_kernel(a.data(), b.data(), out.data(), m, k, n);
  check_finite("matmul", out);
  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  int ia = detail::node_or_none(a), ib = detail::node_or_none(b);
  detail::attach(out, tape, {ia, ib},
                 [ia, ib, a, b, m, k, n](const Tensor<T>& up, GradSink<T>& g) {
                   const T* u = up.data();
                   if (ia >= 0) {
                     // da = up . b^T, with b transposed first so the inner
                     // loop is lane-parallel
                     Tensor<T> da({m, k});
                     T* __restrict__ d = da.data();
                     const T* pb = b.data();
                     std::vector<T> bt(static_cast<size_t>(n * k));
                     for (int64_t kk = 0; kk < k; ++kk)
                       for (int64_t j = 0; j < n; ++j)
                         bt[static_cast<size_t>(j * k + kk)] = pb[kk * n + j];
                     for (int64_t i = 0; i < m; ++i) {
                       T* drow = d + i * k;
                       const T* urow = u + i * n;
                       for (int64_t j = 0; j < n; ++j) {
                         const T uv = urow[j];
                         const T* btrow = bt.data() + j * k;
                         for (int64_t kk = 0; kk < k; ++kk) drow[kk] += uv * btrow[kk];
                       }
                     }
                     g.add(ia, std::move(da));
                   }
                   if (ib >= 0) {
                     // db = a^T . up
                     Tensor<T> db({k, n});
                     T* d = db.data();
                     const T* pa = a.data();
                     for (int64_t i = 0; i < m; ++i) {
                       const T* urow = u + i * n;
                       for (int64_t kk = 0; kk < k; ++kk) {
                         const T av = pa[i * k + kk];
                         T* drow = d + kk * n;
                         for (int64_t j = 0; j < n; ++j) drow[j] += av * urow[j];
                       }
                     }
                     g.add(ib, std::move(db));
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// convolution (channels-last, cross-correlation, zero padding)
// ---------------------------------------------------------------------------

enum class Pad { same, valid };

namespace detail {

struct ConvGeom {
  int64_t h, w, cin, cout, kh, kw, stride, hout, wout, pad_top, pad_left;
};

inline ConvGeom conv_geom(int64_t h, int64_t w, int64_t cin, int64_t cout, int64_t kh, int64_t kw,
                          int64_t stride, Pad pad) {
  ConvGeom g{h, w, cin, cout, kh, kw, stride, 0, 0, 0, 0};
  if (pad == Pad::same) {
    g.hout = (h + stride - 1) / stride;
    g.wout = (w + stride - 1) / stride;
    const int64_t pad_h = std::max<int64_t>((g.hout - 1) * stride + kh - h, 0);
    const int64_t pad_w = std::max<int64_t>((g.wout - 1) * stride + kw - w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    g.hout = (h - kh) / stride + 1;
    g.wout = (w - kw) / stride + 1;
    if (g.hout <= 0 || g.wout <= 0)
      throw ShapeError("conv2d: non-positive output dims for input " + std::to_string(h) + "x" +
                       std::to_string(w) + " with valid " + std::to_string(kh) + "x" +
                       std::to_string(kw) + " kernel");
  }
  return g;
}

// y[hout,wout,cout] (pre-zeroed or bias-filled) += cross-correlation(x, w)
template <typename T>
void conv_apply(const ConvGeom& g, const T* __restrict__ x, const T* __restrict__ w,
                T* __restrict__ y) {
  for (int64_t oy = 0; oy < g.hout; ++oy) {
    for (int64_t ox = 0; ox < g.wout; ++ox) {
      T* out_px = y + (oy * g.wout + ox) * g.cout;
      for (int64_t ky = 0; ky < g.kh; ++ky) {
        const int64_t iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.h) continue;
        for (int64_t kx = 0; kx < g.kw; ++kx) {
          const int64_t ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.w) continue;
          const T* x_px = x + (iy * g.w + ix) * g.cin;
          const T* w_k = w + (ky * g.kw + kx) * g.cin * g.cout;
          for (int64_t ci = 0; ci < g.cin; ++ci) {
            const T xv = x_px[ci];
            const T* w_row = w_k + ci * g.cout;
            for (int64_t co = 0; co < g.cout; ++co) out_px[co] += xv * w_row[co];
          }
        }
      }
    }
  }
}

// dx[h,w,cin] += adjoint of conv_apply w.r.t. x. The kernel is transposed
// up front so the inner loop runs over independent cin lanes (a co-indexed
// reduction would block vectorization).
template <typename T>
void conv_adjoint_input(const ConvGeom& g, const T* __restrict__ up, const T* w,
                        T* __restrict__ dx) {
  std::vector<T> w_t(static_cast<size_t>(g.kh * g.kw * g.cout * g.cin));
  for (int64_t k = 0; k < g.kh * g.kw; ++k)
    for (int64_t ci = 0; ci < g.cin; ++ci)
      for (int64_t co = 0; co < g.cout; ++co)
        w_t[static_cast<size_t>((k * g.cout + co) * g.cin + ci)] =
            w[(k * g.cin + ci) * g.cout + co];
  const T* __restrict__ wt = w_t.data();
  for (int64_t oy = 0; oy < g.hout; ++oy) {
    for (int64_t ox = 0; ox < g.wout; ++ox) {
      const T* up_px = up + (oy * g.wout + ox) * g.cout;
      for (int64_t ky = 0; ky < g.kh; ++ky) {
        const int64_t iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.h) continue;
        for (int64_t kx = 0; kx < g.kw; ++kx) {
          const int64_t ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.w) continue;
          T* dx_px = dx + (iy * g.w + ix) * g.cin;
          const T* wt_k = wt + (ky * g.kw + kx) * g.cin * g.cout;
          for (int64_t co = 0; co < g.cout; ++co) {
            const T uv = up_px[co];
            const T* wt_row = wt_k + co * g.cin;
            for (int64_t ci = 0; ci < g.cin; ++ci) dx_px[ci] += uv * wt_row[ci];
          }
        }
      }
    }
  }
}

// dw[kh,kw,cin,cout] += correlation of x with upstream
template <typename T>
void conv_grad_weights(const ConvGeom& g, const T* __restrict__ x, const T* __restrict__ up,
                       T* __restrict__ dw) {
  for (int64_t oy = 0; oy < g.hout; ++oy) {
    for (int64_t ox = 0; ox < g.wout; ++ox) {
      const T* up_px = up + (oy * g.wout + ox) * g.cout;
      for (int64_t ky = 0; ky < g.kh; ++ky) {
        const int64_t iy = oy * g.stride + ky - g.pad_top;
        if (iy < 0 || iy >= g.h) continue;
        for (int64_t kx = 0; kx < g.kw; ++kx) {
          const int64_t ix = ox * g.stride + kx - g.pad_left;
          if (ix < 0 || ix >= g.w) continue;
          const T* x_px = x + (iy * g.w + ix) * g.cin;
          T* dw_k = dw + (ky * g.kw + kx) * g.cin * g.cout;
          for (int64_t ci = 0; ci < g.cin; ++ci) {
            const T xv = x_px[ci];
            T* dw_row = dw_k + ci * g.cout;
            for (int64_t co = 0; co < g.cout; ++co) dw_row[co] += xv * up_px[co];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [H,W,Cin], w: [kh,kw,Cin,Cout], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 Pad pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d: expected x rank 3 and w rank 4, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  if (w.dim(0) % 2 == 0 || w.dim(1) % 2 == 0)
    throw ShapeError("conv2d: kernel dims must be odd, got " + shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (x.dim(2) != w.dim(2))
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(x.dim(2)) +
                     ", kernel expects " + std::to_string(w.dim(2)));
  if (bias.defined() && bias.size() != w.dim(3))
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) +
                     " != output channels " + std::to_string(w.dim(3)));
  const auto g = detail::conv_geom(x.dim(0), x.dim(1), x.dim(2), w.dim(3), w.dim(0), w.dim(1),
                                   stride, pad);
  Tensor<T> out({g.hout, g.wout, g.cout});
  if (bias.defined()) {
    T* po = out.data();
    for (int64_t p = 0; p < g.hout * g.wout; ++p)
      for (int64_t co = 0; co < g.cout; ++co) po[p * g.cout + co] = bias[co];
  }
  detail::conv_apply(g, x.data(), w.data(), out.data());
  check_finite("conv2d", out);
  Tape<T>* tape = bias.defined() ? detail::common_tape<T>({&x, &w, &bias})
                                 : detail::common_tape<T>({&x, &w});
  int ix = detail::node_or_none(x);
  int iw = detail::node_or_none(w);
  int ib = bias.defined() ? detail::node_or_none(bias) : -1;
  detail::attach(out, tape, {ix, iw, ib},
                 [ix, iw, ib, x, w, g](const Tensor<T>& up, GradSink<T>& sink) {
                   if (ix >= 0) {
                     Tensor<T> dx(x.shape());
                     detail::conv_adjoint_input(g, up.data(), w.data(), dx.data());
                     sink.add(ix, std::move(dx));
                   }
                   if (iw >= 0) {
                     Tensor<T> dw(w.shape());
                     detail::conv_grad_weights(g, x.data(), up.data(), dw.data());
                     sink.add(iw, std::move(dw));
                   }
                   if (ib >= 0) {
                     Tensor<T> db({g.cout});
                     const T* u = up.data();
                     for (int64_t p = 0; p < g.hout * g.wout; ++p)
                       for (int64_t co = 0; co < g.cout; ++co) db[co] += u[p * g.cout + co];
                     sink.add(ib, std::move(db));
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, Pad pad) {
  return conv2d(x, w, Tensor<T>{}, stride, pad);
}

// Stride-2 upsampling conv, the exact adjoint of the matching stride-2
// same-pad conv2d. x: [H,W,Cin], w: [kh,kw,Cout,Cin], output [2H,2W,Cout].
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("transposed_conv2d: expected x rank 3 and w rank 4");
  if (x.dim(2) != w.dim(3))
    throw ShapeError("transposed_conv2d: channel mismatch, input has " +
                     std::to_string(x.dim(2)) + ", kernel expects " + std::to_string(w.dim(3)));
  if (bias.defined() && bias.size() != w.dim(2))
    throw ShapeError("transposed_conv2d: bias length mismatch");
  const int64_t hout = 2 * x.dim(0), wout = 2 * x.dim(1), cout = w.dim(2);
  // geometry of the underlying conv [2H,2W,Cout] -> [H,W,Cin]
  const auto g =
      detail::conv_geom(hout, wout, cout, x.dim(2), w.dim(0), w.dim(1), 2, Pad::same);
  Tensor<T> out({hout, wout, cout});
  detail::conv_adjoint_input(g, x.data(), w.data(), out.data());
  if (bias.defined()) {
    T* po = out.data();
    for (int64_t p = 0; p < hout * wout; ++p)
      for (int64_t co = 0; co < cout; ++co) po[p * cout + co] += bias[co];
  }
  check_finite("transposed_conv2d", out);
  Tape<T>* tape = bias.defined() ? detail::common_tape<T>({&x, &w, &bias})
                                 : detail::common_tape<T>({&x, &w});
  int ix = detail::node_or_none(x);
  int iw = detail::node_or_none(w);
  int ib = bias.defined() ? detail::node_or_none(bias) : -1;
  detail::attach(out, tape, {ix, iw, ib},
                 [ix, iw, ib, x, w, g, hout, wout, cout](const Tensor<T>& up, GradSink<T>& sink) {
                   if (ix >= 0) {
                     Tensor<T> dx(x.shape());
                     detail::conv_apply(g, up.data(), w.data(), dx.data());
                     sink.add(ix, std::move(dx));
                   }
                   if (iw >= 0) {
                     Tensor<T> dw(w.shape());
                     detail::conv_grad_weights(g, up.data(), x.data(), dw.data());
                     sink.add(iw, std::move(dw));
                   }
                   if (ib >= 0) {
                     Tensor<T> db({cout});
                     const T* u = up.data();
                     for (int64_t p = 0; p < hout * wout; ++p)
                       for (int64_t co = 0; co < cout; ++co) db[co] += u[p * cout + co];
                     sink.add(ib, std::move(db));
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  return transposed_conv2d(x, w, Tensor<T>{});
}

// 2x2 stride-2 mean pooling on [H,W,C]; odd trailing row/col dropped.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("avg_pool2: expected rank-3 input");
  const int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int64_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw ShapeError("avg_pool2: input too small");
  Tensor<T> out({ho, wo, c});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t y = 0; y < ho; ++y)
    for (int64_t xx = 0; xx < wo; ++xx)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t r0 = (2 * y * w + 2 * xx) * c + ch;
        po[(y * wo + xx) * c + ch] =
            (px[r0] + px[r0 + c] + px[r0 + w * c] + px[r0 + w * c + c]) * T(0.25);
      }
  check_finite("avg_pool2", out);
  int ia = detail::node_or_none(x);
  detail::attach(out, x.tape, {ia},
                 [ia, h, w, c, ho, wo](const Tensor<T>& up, GradSink<T>& g) {
                   Tensor<T> dx({h, w, c});
                   const T* u = up.data();
                   T* d = dx.data();
                   for (int64_t y = 0; y < ho; ++y)
                     for (int64_t xx = 0; xx < wo; ++xx)
                       for (int64_t ch = 0; ch < c; ++ch) {
                         const T v = u[(y * wo + xx) * c + ch] * T(0.25);
                         const int64_t r0 = (2 * y * w + 2 * xx) * c + ch;
                         d[r0] += v;
                         d[r0 + c] += v;
                         d[r0 + w * c] += v;
                         d[r0 + w * c + c] += v;
                       }
                   g.add(ia, std::move(dx));
                 });
  return out;
}

}  // namespace cmt
