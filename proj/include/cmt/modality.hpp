#pragma once

#include <array>
#include <string>

#include "cmt/common.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

// The nine auxiliary maps accompanying an RGB image. Stand-ins for the
// pretrained extractor stack: deterministic functions of (image, seed) that
// preserve the documented shapes (eight H x W x 22 maps plus H x W x 1
// luminance) and the information character of each group.
struct ModalityBundle {
  enum class Source { synthetic, file };

  static constexpr int kCount = 9;
  static constexpr int kLuminanceIndex = 8;
  static const std::array<const char*, kCount> kNames;

  static int64_t channels(int j) { return j == kLuminanceIndex ? 1 : 22; }
  static int index_of(const std::string& name);

  std::array<TensorF, kCount> maps;
  Source source = Source::synthetic;

  int64_t height() const { return maps[0].dim(0); }
  int64_t width() const { return maps[0].dim(1); }
  void validate() const;  // shape contract + [0,1] range
};

// --- individual extractors -------------------------------------------------

// 0.299 R + 0.587 G + 0.114 B per pixel (Rec.601 / NTSC luma coefficients).
TensorF ntsc_luminance(const TensorF& rgb);

// Dominant-hue palette: seeded k-means (k=5, k-means++ init, 20 iterations)
// over pixel colors. Channels: nearest palette color RGB (3), one-hot palette
// index (5), then the five palette colors flattened and truncated to the
// remaining 14 channels, broadcast to every pixel.
TensorF palette_modality(const TensorF& rgb, int k, uint64_t seed);

// Instance-segmentation stand-in: k-means (k=8) over (R,G,B,x/W,y/H).
// Channels: one-hot label (8), label-mean color (3), zero padding to 22.
TensorF segments_modality(const TensorF& rgb, int k, uint64_t seed);

// Edge stand-in from luminance: Sobel magnitude normalized by its 4*sqrt(2)
// bound. Channels: raw magnitude (1), binary maps at thresholds 0.1..0.9 (9),
// zero padding to 22.
TensorF edges_modality(const TensorF& luminance);

struct DepthNormals {
  TensorF depth;    // sinusoidal channel encoding of blurred inverse luminance
  TensorF normals;  // (-dd/dx, -dd/dy, 1) unit-normalized, remapped to [0,1]^3
};
DepthNormals depth_normals_modalities(const TensorF& luminance);

// Deep-embedding stand-in: seeded random projection of 7x7 RGB patches
// (147 dims) to 22 channels, tanh-squashed then mapped to [0,1].
TensorF embedding_modality(const TensorF& rgb, uint64_t seed);

// Runs all nine extractors. Deterministic per (rgb, seed).
ModalityBundle extract_bundle(const TensorF& rgb, uint64_t seed);

// --- synthetic degradation -------------------------------------------------

struct DegradeParams {
  float gamma = 3.0f;        // in [2,5]
  float gain = 0.3f;         // in [0.1,0.5]
  float noise_sigma = 0.02f; // in [0,0.05]
  float color_shift = 0.05f; // max per-channel relative gain deviation
};

// low = clip(gain * gt^gamma * channel_shift + gaussian noise), seeded.
TensorF degrade(const TensorF& gt, const DegradeParams& params, uint64_t seed);

// --- bundle persistence ----------------------------------------------------

// Directory layout: manifest.txt with lines `name channels file`, plus one
// MFT1 tensor per modality. Round trips are bit-exact.
void save_bundle(const ModalityBundle& bundle, const std::string& dir);
ModalityBundle load_bundle(const std::string& dir);

}  // namespace cmt
