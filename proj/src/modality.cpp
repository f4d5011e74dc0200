#include "cmt/modality.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "cmt/mft.hpp"

namespace fs = std::filesystem;

namespace cmt {

const std::array<const char*, ModalityBundle::kCount> ModalityBundle::kNames = {
    "clip_embed",      "imagebind_embed", "dinov2_embed", "sam_instances", "sam_edges",
    "surface_normals", "depth_map",       "color_palette", "luminance"};

int ModalityBundle::index_of(const std::string& name) {
  for (int j = 0; j < kCount; ++j)
    if (name == kNames[static_cast<size_t>(j)]) return j;
  return -1;
}

void ModalityBundle::validate() const {
  const int64_t h = maps[0].dim(0), w = maps[0].dim(1);
  for (int j = 0; j < kCount; ++j) {
    const TensorF& m = maps[static_cast<size_t>(j)];
    if (!m.defined() || m.rank() != 3)
      throw ShapeError(std::string("modality '") + kNames[static_cast<size_t>(j)] +
                       "' missing or not rank 3");
    if (m.dim(0) != h || m.dim(1) != w)
      throw ShapeError(std::string("modality '") + kNames[static_cast<size_t>(j)] +
                       "' spatial dims " + shape_str(m.shape()) + " do not match " +
                       std::to_string(h) + "x" + std::to_string(w));
    if (m.dim(2) != channels(j))
      throw ShapeError(std::string("modality '") + kNames[static_cast<size_t>(j)] + "' has " +
                       std::to_string(m.dim(2)) + " channels, expected " +
                       std::to_string(channels(j)));
    for (int64_t i = 0; i < m.size(); ++i)
      if (m[i] < -1e-6f || m[i] > 1.0f + 1e-6f)
        throw NumericError(std::string("modality '") + kNames[static_cast<size_t>(j)] +
                           "' value outside [0,1]");
  }
}

TensorF ntsc_luminance(const TensorF& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3)
    throw ShapeError("ntsc_luminance: expected [H,W,3], got " + shape_str(rgb.shape()));
  const int64_t n = rgb.dim(0) * rgb.dim(1);
  TensorF lum({rgb.dim(0), rgb.dim(1), 1});
  const float* p = rgb.data();
  for (int64_t i = 0; i < n; ++i)
    lum[i] = 0.299f * p[3 * i] + 0.587f * p[3 * i + 1] + 0.114f * p[3 * i + 2];
  return lum;
}

namespace {

// Seeded k-means with k-means++ init and a fixed iteration count; empty
// clusters keep their previous centroid, assignment ties go to the lowest
// index. Returns per-point labels; centroids written in place.
std::vector<int> kmeans(const std::vector<float>& points, int64_t n, int64_t d, int k, int iters,
                        Rng& rng, std::vector<float>& centroids) {
  centroids.assign(static_cast<size_t>(k) * static_cast<size_t>(d), 0.0f);
  auto dist2 = [&](int64_t p, int c) {
    float acc = 0;
    for (int64_t i = 0; i < d; ++i) {
      const float diff = points[static_cast<size_t>(p * d + i)] -
                         centroids[static_cast<size_t>(c * d + i)];
      acc += diff * diff;
    }
    return acc;
  };
  // k-means++ seeding
  const int64_t first = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
  std::copy_n(points.begin() + first * d, d, centroids.begin());
  std::vector<float> best(static_cast<size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (int64_t p = 0; p < n; ++p) {
      float m = dist2(p, 0);
      for (int cc = 1; cc < c; ++cc) m = std::min(m, dist2(p, cc));
      best[static_cast<size_t>(p)] = m;
      total += m;
    }
    int64_t chosen = 0;
    if (total > 0) {
      double r = rng.uniform() * total;
      double acc = 0;
      for (int64_t p = 0; p < n; ++p) {
        acc += best[static_cast<size_t>(p)];
        if (acc >= r) {
          chosen = p;
          break;
        }
      }
    } else {
      chosen = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n)));
    }
    std::copy_n(points.begin() + chosen * d, d, centroids.begin() + c * d);
  }

  std::vector<int> labels(static_cast<size_t>(n), 0);
  std::vector<double> sums;
  std::vector<int64_t> counts;
  for (int it = 0; it < iters; ++it) {
    for (int64_t p = 0; p < n; ++p) {
      int arg = 0;
      float m = dist2(p, 0);
      for (int c = 1; c < k; ++c) {
        const float dd = dist2(p, c);
        if (dd < m) {
          m = dd;
          arg = c;
        }
      }
      labels[static_cast<size_t>(p)] = arg;
    }
    sums.assign(static_cast<size_t>(k) * static_cast<size_t>(d), 0.0);
    counts.assign(static_cast<size_t>(k), 0);
    for (int64_t p = 0; p < n; ++p) {
      const int c = labels[static_cast<size_t>(p)];
      ++counts[static_cast<size_t>(c)];
      for (int64_t i = 0; i < d; ++i)
        sums[static_cast<size_t>(c * d + i)] += points[static_cast<size_t>(p * d + i)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // keep previous centroid
      for (int64_t i = 0; i < d; ++i)
        centroids[static_cast<size_t>(c * d + i)] = static_cast<float>(
            sums[static_cast<size_t>(c * d + i)] / static_cast<double>(counts[static_cast<size_t>(c)]));
    }
  }
  // final assignment against the updated centroids
  for (int64_t p = 0; p < n; ++p) {
    int arg = 0;
    float m = dist2(p, 0);
    for (int c = 1; c < k; ++c) {
      const float dd = dist2(p, c);
      if (dd < m) {
        m = dd;
        arg = c;
      }
    }
    labels[static_cast<size_t>(p)] = arg;
  }
  return labels;
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// separable gaussian blur with replicated borders
TensorF gaussian_blur(const TensorF& x, float sigma) {
  const int64_t h = x.dim(0), w = x.dim(1);
  const int radius = static_cast<int>(std::ceil(3.0f * sigma));
  std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
  float total = 0;
  for (int i = -radius; i <= radius; ++i) {
    const float v = std::exp(-0.5f * (static_cast<float>(i) * i) / (sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : kernel) v /= total;
  TensorF tmp({h, w, 1}), out({h, w, 1});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx < w; ++xx) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int64_t sx = std::clamp<int64_t>(xx + i, 0, w - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * x[y * w + sx];
      }
      tmp[y * w + xx] = acc;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx < w; ++xx) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int64_t sy = std::clamp<int64_t>(y + i, 0, h - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[sy * w + xx];
      }
      out[y * w + xx] = acc;
    }
  return out;
}

}  // namespace

TensorF palette_modality(const TensorF& rgb, int k, uint64_t seed) {
  const int64_t h = rgb.dim(0), w = rgb.dim(1), n = h * w;
  Rng rng(seed);
  std::vector<float> points(rgb.vec());
  std::vector<float> centroids;
  std::vector<int> labels = kmeans(points, n, 3, k, 20, rng, centroids);

  TensorF out({h, w, 22});
  for (int64_t p = 0; p < n; ++p) {
    float* px = out.data() + p * 22;
    const int c = labels[static_cast<size_t>(p)];
    for (int i = 0; i < 3; ++i) px[i] = clamp01(centroids[static_cast<size_t>(c * 3 + i)]);
    px[3 + c] = 1.0f;
    for (int i = 0; i < 14; ++i)  // 5 palette colors flattened, truncated to fit
      px[8 + i] = clamp01(centroids[static_cast<size_t>(i)]);
  }
  return out;
}

TensorF segments_modality(const TensorF& rgb, int k, uint64_t seed) {
  const int64_t h = rgb.dim(0), w = rgb.dim(1), n = h * w;
  Rng rng(seed);
  // Spatial coordinates are scaled by the color spread so a color-degenerate
  // image stays a degenerate clustering problem (single segment), while on
  // normal images position keeps segments spatially coherent without
  // overpowering color.
  float lo[3] = {1.0f, 1.0f, 1.0f}, hi[3] = {0.0f, 0.0f, 0.0f};
  for (int64_t p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], rgb[p * 3 + c]);
      hi[c] = std::max(hi[c], rgb[p * 3 + c]);
    }
  const float spread = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2], 0.0f});
  const float spatial = 0.5f * spread;
  std::vector<float> points(static_cast<size_t>(n) * 5);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int64_t p = y * w + x;
      points[static_cast<size_t>(p * 5 + 0)] = rgb[p * 3 + 0];
      points[static_cast<size_t>(p * 5 + 1)] = rgb[p * 3 + 1];
      points[static_cast<size_t>(p * 5 + 2)] = rgb[p * 3 + 2];
      points[static_cast<size_t>(p * 5 + 3)] =
          spatial * static_cast<float>(x) / static_cast<float>(w);
      points[static_cast<size_t>(p * 5 + 4)] =
          spatial * static_cast<float>(y) / static_cast<float>(h);
    }
  std::vector<float> centroids;
  std::vector<int> labels = kmeans(points, n, 5, k, 20, rng, centroids);

  // mean color per label
  std::vector<double> color_sum(static_cast<size_t>(k) * 3, 0.0);
  std::vector<int64_t> counts(static_cast<size_t>(k), 0);
  for (int64_t p = 0; p < n; ++p) {
    const int c = labels[static_cast<size_t>(p)];
    ++counts[static_cast<size_t>(c)];
    for (int i = 0; i < 3; ++i) color_sum[static_cast<size_t>(c * 3 + i)] += rgb[p * 3 + i];
  }
  TensorF out({h, w, 22});
  for (int64_t p = 0; p < n; ++p) {
    float* px = out.data() + p * 22;
    const int c = labels[static_cast<size_t>(p)];
    px[c] = 1.0f;
    for (int i = 0; i < 3; ++i)
      px[8 + i] = clamp01(static_cast<float>(color_sum[static_cast<size_t>(c * 3 + i)] /
                                             static_cast<double>(counts[static_cast<size_t>(c)])));
  }
  return out;
}

TensorF edges_modality(const TensorF& luminance) {
  const int64_t h = luminance.dim(0), w = luminance.dim(1);
  TensorF out({h, w, 22});
  const float norm = 1.0f / (4.0f * std::sqrt(2.0f));
  auto at = [&](int64_t y, int64_t x) {
    return luminance[std::clamp<int64_t>(y, 0, h - 1) * w + std::clamp<int64_t>(x, 0, w - 1)];
  };
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const float gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const float gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                       (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const float mag = std::sqrt(gx * gx + gy * gy) * norm;
      float* px = out.data() + (y * w + x) * 22;
      px[0] = mag;
      for (int t = 1; t <= 9; ++t) px[t] = mag > 0.1f * static_cast<float>(t) ? 1.0f : 0.0f;
    }
  return out;
}

DepthNormals depth_normals_modalities(const TensorF& luminance) {
  const int64_t h = luminance.dim(0), w = luminance.dim(1);
  TensorF inverted({h, w, 1});
  for (int64_t i = 0; i < h * w; ++i) inverted[i] = 1.0f - luminance[i];
  TensorF d = gaussian_blur(inverted, 2.0f);

  TensorF depth({h, w, 22});
  for (int64_t p = 0; p < h * w; ++p) {
    float* px = depth.data() + p * 22;
    for (int i = 0; i < 11; ++i) {
      const float phase = static_cast<float>(i + 1) * static_cast<float>(M_PI) * d[p];
      px[2 * i] = 0.5f * (1.0f + std::sin(phase));
      px[2 * i + 1] = 0.5f * (1.0f + std::cos(phase));
    }
  }

  TensorF normals({h, w, 22});
  auto at = [&](int64_t y, int64_t x) {
    return d[std::clamp<int64_t>(y, 0, h - 1) * w + std::clamp<int64_t>(x, 0, w - 1)];
  };
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const float dx = 0.5f * (at(y, x + 1) - at(y, x - 1));
      const float dy = 0.5f * (at(y + 1, x) - at(y - 1, x));
      const float inv = 1.0f / std::sqrt(dx * dx + dy * dy + 1.0f);
      float* px = normals.data() + (y * w + x) * 22;
      px[0] = 0.5f * (1.0f - dx * inv);
      px[1] = 0.5f * (1.0f - dy * inv);
      px[2] = 0.5f * (1.0f + inv);
    }
  return DepthNormals{std::move(depth), std::move(normals)};
}

TensorF embedding_modality(const TensorF& rgb, uint64_t seed) {
  const int64_t h = rgb.dim(0), w = rgb.dim(1);
  constexpr int kPatch = 7, kDims = kPatch * kPatch * 3, kOut = 22;
  Rng rng(seed);
  std::vector<float> proj(static_cast<size_t>(kOut) * kDims);
  const float scl = 1.0f / std::sqrt(static_cast<float>(kDims));
  for (auto& v : proj) v = static_cast<float>(rng.normal()) * scl;

  TensorF out({h, w, kOut});
  std::vector<float> patch(static_cast<size_t>(kDims));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      int idx = 0;
      for (int py = -3; py <= 3; ++py)
        for (int px = -3; px <= 3; ++px) {
          const int64_t sy = std::clamp<int64_t>(y + py, 0, h - 1);
          const int64_t sx = std::clamp<int64_t>(x + px, 0, w - 1);
          for (int c = 0; c < 3; ++c)
            patch[static_cast<size_t>(idx++)] = rgb[(sy * w + sx) * 3 + c];
        }
      float* opx = out.data() + (y * w + x) * kOut;
      for (int o = 0; o < kOut; ++o) {
        float acc = 0;
        const float* row = proj.data() + static_cast<size_t>(o) * kDims;
        for (int i = 0; i < kDims; ++i) acc += row[i] * patch[static_cast<size_t>(i)];
        opx[o] = 0.5f * (1.0f + std::tanh(acc));
      }
    }
  return out;
}

ModalityBundle extract_bundle(const TensorF& rgb, uint64_t seed) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3)
    throw ShapeError("extract_bundle: expected [H,W,3], got " + shape_str(rgb.shape()));
  Rng base(seed);
  ModalityBundle bundle;
  bundle.source = ModalityBundle::Source::synthetic;
  const TensorF lum = ntsc_luminance(rgb);
  bundle.maps[0] = embedding_modality(rgb, base.fork(1).next_u64());
  bundle.maps[1] = embedding_modality(rgb, base.fork(2).next_u64());
  bundle.maps[2] = embedding_modality(rgb, base.fork(3).next_u64());
  bundle.maps[3] = segments_modality(rgb, 8, base.fork(4).next_u64());
  bundle.maps[4] = edges_modality(lum);
  DepthNormals dn = depth_normals_modalities(lum);
  bundle.maps[5] = std::move(dn.normals);
  bundle.maps[6] = std::move(dn.depth);
  bundle.maps[7] = palette_modality(rgb, 5, base.fork(5).next_u64());
  bundle.maps[8] = lum;
  bundle.validate();
  return bundle;
}

TensorF degrade(const TensorF& gt, const DegradeParams& params, uint64_t seed) {
  if (gt.rank() != 3 || gt.dim(2) != 3)
    throw ShapeError("degrade: expected [H,W,3], got " + shape_str(gt.shape()));
  Rng rng(seed);
  float shift[3];
  for (float& s : shift)
    s = 1.0f + static_cast<float>(rng.uniform(-params.color_shift, params.color_shift));
  TensorF low(gt.shape());
  const int64_t n = gt.dim(0) * gt.dim(1);
  for (int64_t p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) {
      const float v = params.gain * std::pow(gt[p * 3 + c], params.gamma) * shift[c];
      const float noise =
          params.noise_sigma > 0 ? params.noise_sigma * static_cast<float>(rng.normal()) : 0.0f;
      low[p * 3 + c] = clamp01(v + noise);
    }
  return low;
}

void save_bundle(const ModalityBundle& bundle, const std::string& dir) {
  bundle.validate();
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw DataError("cannot write bundle manifest in " + dir);
  for (int j = 0; j < ModalityBundle::kCount; ++j) {
    const std::string name = ModalityBundle::kNames[static_cast<size_t>(j)];
    const std::string file = name + ".mft";
    manifest << name << " " << ModalityBundle::channels(j) << " " << file << "\n";
    save_mft_f32((fs::path(dir) / file).string(), bundle.maps[static_cast<size_t>(j)]);
  }
}

ModalityBundle load_bundle(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw DataError("cannot open bundle manifest in " + dir);
  std::map<std::string, std::pair<int64_t, std::string>> entries;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name, file;
    int64_t channels = 0;
    if (!(ss >> name >> channels >> file))
      throw DataError("malformed bundle manifest line: '" + line + "'");
    entries[name] = {channels, file};
  }
  ModalityBundle bundle;
  bundle.source = ModalityBundle::Source::file;
  for (int j = 0; j < ModalityBundle::kCount; ++j) {
    const std::string name = ModalityBundle::kNames[static_cast<size_t>(j)];
    auto it = entries.find(name);
    if (it == entries.end())
      throw DataError("bundle manifest is missing modality '" + name + "'");
    const auto& [channels, file] = it->second;
    TensorF t = load_mft_f32((fs::path(dir) / file).string());
    if (t.rank() != 3 || t.dim(2) != channels)
      throw ShapeError("modality '" + name + "' file has shape " + shape_str(t.shape()) +
                       " but manifest declares " + std::to_string(channels) + " channels");
    if (channels != ModalityBundle::channels(j))
      throw ShapeError("modality '" + name + "' declares " + std::to_string(channels) +
                       " channels, expected " + std::to_string(ModalityBundle::channels(j)));
    bundle.maps[static_cast<size_t>(j)] = std::move(t);
  }
  bundle.validate();
  return bundle;
}

}  // namespace cmt
