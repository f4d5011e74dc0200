#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include "cmt/common.hpp"
#include "cmt/ops.hpp"

namespace cmt {

// Attention scaling benchmark: wall time and counted multiply-accumulates for
// attention-map construction + application, for the channel-wise (transposed)
// scheme and the vanilla spatial scheme. Kernels are plain f32 loops; the MAC
// counters tally the loop trip counts of the matmuls actually executed.

struct AttnBenchPoint {
  int64_t hw = 0;
  int64_t channels = 0;
  int heads = 1;
  double seconds = 0;  // per forward, median of repetition batches
  double macs = 0;     // counted multiply-accumulates per forward
};

namespace detail {

// scores[i,j] = sum_t k[t,i]*q[t,j], then column softmax; returns MACs
inline double channel_attention_pass(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, std::vector<float>& out,
                                     int64_t hw, int64_t c, int heads) {
  const int64_t d = c / heads;
  std::vector<float> scores(static_cast<size_t>(d * d));
  double macs = 0;
  for (int h = 0; h < heads; ++h) {
    const int64_t off = h * d;
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j) {
        float acc = 0;
        for (int64_t t = 0; t < hw; ++t)
          acc += k[static_cast<size_t>(t * c + off + i)] * q[static_cast<size_t>(t * c + off + j)];
        scores[static_cast<size_t>(i * d + j)] = acc;
      }
    macs += static_cast<double>(d) * d * hw;
    for (int64_t j = 0; j < d; ++j) {  // column softmax
      float mx = scores[static_cast<size_t>(j)];
      for (int64_t i = 1; i < d; ++i)
        mx = std::max(mx, scores[static_cast<size_t>(i * d + j)]);
      float total = 0;
      for (int64_t i = 0; i < d; ++i) {
        float& s = scores[static_cast<size_t>(i * d + j)];
        s = std::exp(s - mx);
        total += s;
      }
      const float inv = 1.0f / total;
      for (int64_t i = 0; i < d; ++i) scores[static_cast<size_t>(i * d + j)] *= inv;
    }
    for (int64_t t = 0; t < hw; ++t)
      for (int64_t j = 0; j < d; ++j) {
        float acc = 0;
        for (int64_t i = 0; i < d; ++i)
          acc += v[static_cast<size_t>(t * c + off + i)] * scores[static_cast<size_t>(i * d + j)];
        out[static_cast<size_t>(t * c + off + j)] = acc;
      }
    macs += static_cast<double>(hw) * d * d;
  }
  return macs;
}

// vanilla spatial attention: scores are HW x HW per head
inline double spatial_attention_pass(const std::vector<float>& q, const std::vector<float>& k,
                                     const std::vector<float>& v, std::vector<float>& out,
                                     int64_t hw, int64_t c, int heads) {
  const int64_t d = c / heads;
  std::vector<float> scores(static_cast<size_t>(hw) * static_cast<size_t>(hw));
  double macs = 0;
  for (int h = 0; h < heads; ++h) {
    const int64_t off = h * d;
    for (int64_t a = 0; a < hw; ++a)
      for (int64_t b = 0; b < hw; ++b) {
        float acc = 0;
        for (int64_t i = 0; i < d; ++i)
          acc += q[static_cast<size_t>(a * c + off + i)] * k[static_cast<size_t>(b * c + off + i)];
        scores[static_cast<size_t>(a * hw + b)] = acc;
      }
    macs += static_cast<double>(hw) * hw * d;
    for (int64_t a = 0; a < hw; ++a) {  // row softmax over keys
      float mx = scores[static_cast<size_t>(a * hw)];
      for (int64_t b = 1; b < hw; ++b)
        mx = std::max(mx, scores[static_cast<size_t>(a * hw + b)]);
      float total = 0;
      for (int64_t b = 0; b < hw; ++b) {
        float& s = scores[static_cast<size_t>(a * hw + b)];
        s = std::exp(s - mx);
        total += s;
      }
      const float inv = 1.0f / total;
      for (int64_t b = 0; b < hw; ++b) scores[static_cast<size_t>(a * hw + b)] *= inv;
    }
    for (int64_t a = 0; a < hw; ++a)
      for (int64_t i = 0; i < d; ++i) {
        float acc = 0;
        for (int64_t b = 0; b < hw; ++b)
          acc += scores[static_cast<size_t>(a * hw + b)] * v[static_cast<size_t>(b * c + off + i)];
        out[static_cast<size_t>(a * c + off + i)] = acc;
      }
    macs += static_cast<double>(hw) * hw * d;
  }
  return macs;
}

}  // namespace detail

// Closed-form MAC counts for the two schemes (scores + application).
inline double cm_attention_macs(int64_t hw, int64_t c, int heads) {
  const double d = static_cast<double>(c) / heads;
  return 2.0 * heads * d * d * static_cast<double>(hw);
}
inline double vanilla_attention_macs(int64_t hw, int64_t c, int heads) {
  const double d = static_cast<double>(c) / heads;
  return 2.0 * heads * static_cast<double>(hw) * static_cast<double>(hw) * d;
}

inline AttnBenchPoint bench_attention(int64_t hw, int64_t c, int heads, bool vanilla,
                                      uint64_t seed, double min_batch_seconds = 0.02) {
  if (c % heads != 0) throw UsageError("bench: channels not divisible by heads");
  Rng rng(seed);
  std::vector<float> q(static_cast<size_t>(hw * c)), k(q.size()), v(q.size()), out(q.size());
  for (auto& x : q) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : k) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));

  auto run_once = [&] {
    return vanilla ? detail::spatial_attention_pass(q, k, v, out, hw, c, heads)
                   : detail::channel_attention_pass(q, k, v, out, hw, c, heads);
  };
  AttnBenchPoint point;
  point.hw = hw;
  point.channels = c;
  point.heads = heads;
  point.macs = run_once();  // warm-up + counted MACs

  // calibrate repetitions so one batch is long enough to time reliably
  int reps = 1;
  for (;;) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) run_once();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= min_batch_seconds || reps >= 1 << 16) break;
    reps *= 2;
  }
  // median of three timed batches
  double samples[3];
  for (double& s : samples) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) run_once();
    s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
        static_cast<double>(reps);
  }
  std::sort(samples, samples + 3);
  point.seconds = samples[1];
  return point;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("loglog_slope: need >= 2 points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace cmt
