#pragma once

#include <array>
#include <string>
#include <vector>

#include "cmt/attention.hpp"
#include "cmt/layers.hpp"
#include "cmt/modality.hpp"
#include "cmt/ops.hpp"

namespace cmt {

// Feed-forward network: 1x1 expand (GELU), 3x3 depth conv (GELU), 1x1
// compress back to C. Expansion factor fixed at 4.
template <typename T>
struct FfnParams {
  static constexpr int64_t kExpansion = 4;
  ConvLayer<T> expand;
  ConvLayer<T> depth;
  ConvLayer<T> compress;

  static FfnParams make(int64_t c, Rng& rng) {
    FfnParams p;
    p.expand = ConvLayer<T>::make(1, 1, c, kExpansion * c, rng);
    p.depth = ConvLayer<T>::make(3, 3, kExpansion * c, kExpansion * c, rng);
    p.compress = ConvLayer<T>::make(1, 1, kExpansion * c, c, rng);
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    expand.visit(prefix + ".expand", fn);
    depth.visit(prefix + ".depth", fn);
    compress.visit(prefix + ".compress", fn);
  }
};

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& f, const FfnParams<T>& p) {
  return p.compress(gelu(p.depth(gelu(p.expand(f)))));
}

// Transformer block: attention and FFN branches, each layer-normed on the
// branch output (post-norm) and added residually.
template <typename T>
struct MmtbParams {
  CmMsaParams<T> attn;
  NormLayer<T> ln1;
  NormLayer<T> ln2;
  FfnParams<T> ffn;

  static MmtbParams make(int64_t c, int heads, InjectionMode mode, std::vector<int> active,
                         Rng& rng) {
    MmtbParams p;
    p.attn = CmMsaParams<T>::make(c, heads, mode, std::move(active), rng);
    p.ln1 = NormLayer<T>::make(c);
    p.ln2 = NormLayer<T>::make(c);
    p.ffn = FfnParams<T>::make(c, rng);
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    attn.visit(prefix + ".attn", fn);
    ln1.visit(prefix + ".ln1", fn);
    ln2.visit(prefix + ".ln2", fn);
    ffn.visit(prefix + ".ffn", fn);
  }
};

template <typename T>
Tensor<T> mmtb_forward(const Tensor<T>& f_in, const std::vector<Tensor<T>>& f_mods,
                       const MmtbParams<T>& p) {
  Tensor<T> attended = add(f_in, p.ln1(attention_forward(f_in, f_mods, p.attn)));
  return add(attended, p.ln2(ffn_forward(attended, p.ffn)));
}

// One auxiliary reconstruction subnet: a four-level conv U-Net with additive
// same-level skips. Taps expose features at the three shallower resolutions
// on both paths for injection into the transformer.
template <typename T>
struct AuxUnetParams {
  int64_t raw_channels = 22;
  int64_t base = 16;
  ConvLayer<T> lift;    // 1x1 raw -> C
  ConvLayer<T> enc0;    // 3x3 C -> C
  ConvLayer<T> down1;   // 3x3 s2 C -> 2C
  ConvLayer<T> down2;   // 3x3 s2 2C -> 4C
  ConvLayer<T> down3;   // 3x3 s2 4C -> 8C
  DeconvLayer<T> up3;   // 8C -> 4C
  DeconvLayer<T> up2;   // 4C -> 2C
  DeconvLayer<T> up1;   // 2C -> C
  ConvLayer<T> head;    // 1x1 C -> raw

  static AuxUnetParams make(int64_t raw_channels, int64_t c, Rng& rng) {
    AuxUnetParams p;
    p.raw_channels = raw_channels;
    p.base = c;
    p.lift = ConvLayer<T>::make(1, 1, raw_channels, c, rng);
    p.enc0 = ConvLayer<T>::make(3, 3, c, c, rng);
    p.down1 = ConvLayer<T>::make(3, 3, c, 2 * c, rng);
    p.down2 = ConvLayer<T>::make(3, 3, 2 * c, 4 * c, rng);
    p.down3 = ConvLayer<T>::make(3, 3, 4 * c, 8 * c, rng);
    p.up3 = DeconvLayer<T>::make(3, 3, 8 * c, 4 * c, rng);
    p.up2 = DeconvLayer<T>::make(3, 3, 4 * c, 2 * c, rng);
    p.up1 = DeconvLayer<T>::make(3, 3, 2 * c, c, rng);
    p.head = ConvLayer<T>::make(1, 1, c, raw_channels, rng);
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    lift.visit(prefix + ".lift", fn);
    enc0.visit(prefix + ".enc0", fn);
    down1.visit(prefix + ".down1", fn);
    down2.visit(prefix + ".down2", fn);
    down3.visit(prefix + ".down3", fn);
    up3.visit(prefix + ".up3", fn);
    up2.visit(prefix + ".up2", fn);
    up1.visit(prefix + ".up1", fn);
    head.visit(prefix + ".head", fn);
  }
};

template <typename T>
struct AuxTaps {
  Tensor<T> enc0, enc1, enc2;  // H x C, H/2 x 2C, H/4 x 4C on the down path
  Tensor<T> dec2, dec1, dec0;  // same resolutions on the up path
  Tensor<T> recon;             // H x raw_channels
};

template <typename T>
AuxTaps<T> aux_unet_forward(const Tensor<T>& m, const AuxUnetParams<T>& p) {
  if (m.rank() != 3 || m.dim(2) != p.raw_channels)
    throw ShapeError("aux_unet: expected [H,W," + std::to_string(p.raw_channels) + "], got " +
                     shape_str(m.shape()));
  if (m.dim(0) % 8 != 0 || m.dim(1) % 8 != 0)
    throw ShapeError("aux_unet: spatial dims " + std::to_string(m.dim(0)) + "x" +
                     std::to_string(m.dim(1)) + " must be divisible by 8");
  AuxTaps<T> taps;
  taps.enc0 = gelu(p.enc0(p.lift(m)));
  taps.enc1 = gelu(p.down1(taps.enc0, 2));
  taps.enc2 = gelu(p.down2(taps.enc1, 2));
  Tensor<T> bottom = gelu(p.down3(taps.enc2, 2));
  taps.dec2 = gelu(add(p.up3(bottom), taps.enc2));
  taps.dec1 = gelu(add(p.up2(taps.dec2), taps.enc1));
  taps.dec0 = gelu(add(p.up1(taps.dec1), taps.enc0));
  taps.recon = p.head(taps.dec0);
  return taps;
}

// The three-stage U-shaped transformer: one block at full resolution, two at
// half, two in the bottleneck, mirrored on the way up, with concat skips
// reduced by 1x1 convs and a linear head back to RGB.
template <typename T>
struct CmtParams {
  int64_t base = 16;
  std::array<int, 3> heads = {1, 2, 4};

  ConvLayer<T> lift;  // 1x1 3 -> C
  MmtbParams<T> enc0;
  ConvLayer<T> down1;  // 3x3 s2 C -> 2C
  MmtbParams<T> enc1a, enc1b;
  ConvLayer<T> down2;  // 3x3 s2 2C -> 4C
  MmtbParams<T> mid_a, mid_b;
  DeconvLayer<T> up2;   // 4C -> 2C
  ConvLayer<T> skip2;   // 1x1 4C -> 2C
  MmtbParams<T> dec1a, dec1b;
  DeconvLayer<T> up1;   // 2C -> C
  ConvLayer<T> skip1;   // 1x1 2C -> C
  MmtbParams<T> dec0;
  ConvLayer<T> head;  // 1x1 C -> 3

  static CmtParams make(int64_t c, std::array<int, 3> heads, InjectionMode mode,
                        const std::vector<int>& active, Rng& rng) {
    CmtParams p;
    p.base = c;
    p.heads = heads;
    p.lift = ConvLayer<T>::make(1, 1, 3, c, rng);
    p.enc0 = MmtbParams<T>::make(c, heads[0], mode, active, rng);
    p.down1 = ConvLayer<T>::make(3, 3, c, 2 * c, rng);
    p.enc1a = MmtbParams<T>::make(2 * c, heads[1], mode, active, rng);
    p.enc1b = MmtbParams<T>::make(2 * c, heads[1], mode, active, rng);
    p.down2 = ConvLayer<T>::make(3, 3, 2 * c, 4 * c, rng);
    p.mid_a = MmtbParams<T>::make(4 * c, heads[2], mode, active, rng);
    p.mid_b = MmtbParams<T>::make(4 * c, heads[2], mode, active, rng);
    p.up2 = DeconvLayer<T>::make(3, 3, 4 * c, 2 * c, rng);
    p.skip2 = ConvLayer<T>::make(1, 1, 4 * c, 2 * c, rng);
    p.dec1a = MmtbParams<T>::make(2 * c, heads[1], mode, active, rng);
    p.dec1b = MmtbParams<T>::make(2 * c, heads[1], mode, active, rng);
    p.up1 = DeconvLayer<T>::make(3, 3, 2 * c, c, rng);
    p.skip1 = ConvLayer<T>::make(1, 1, 2 * c, c, rng);
    p.dec0 = MmtbParams<T>::make(c, heads[0], mode, active, rng);
    p.head = ConvLayer<T>::make(1, 1, c, 3, rng);
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    lift.visit(prefix + ".lift", fn);
    enc0.visit(prefix + ".enc0", fn);
    down1.visit(prefix + ".down1", fn);
    enc1a.visit(prefix + ".enc1a", fn);
    enc1b.visit(prefix + ".enc1b", fn);
    down2.visit(prefix + ".down2", fn);
    mid_a.visit(prefix + ".mid_a", fn);
    mid_b.visit(prefix + ".mid_b", fn);
    up2.visit(prefix + ".up2", fn);
    skip2.visit(prefix + ".skip2", fn);
    dec1a.visit(prefix + ".dec1a", fn);
    dec1b.visit(prefix + ".dec1b", fn);
    up1.visit(prefix + ".up1", fn);
    skip1.visit(prefix + ".skip1", fn);
    dec0.visit(prefix + ".dec0", fn);
    head.visit(prefix + ".head", fn);
  }
};

struct ModelConfig {
  int64_t base_channels = 16;
  std::array<int, 3> heads = {1, 2, 4};
  InjectionMode mode = InjectionMode::cm_msa;
  std::array<bool, ModalityBundle::kCount> active_modalities = {true, true, true, true, true,
                                                                true, true, true, true};
  uint64_t init_seed = 1;

  std::vector<int> active_list() const {
    std::vector<int> out;
    for (int j = 0; j < ModalityBundle::kCount; ++j)
      if (active_modalities[static_cast<size_t>(j)]) out.push_back(j);
    return out;
  }

  bool uses_subnets() const { return mode != InjectionMode::msa; }
};

// Full model: the transformer restorer plus one reconstruction subnet per
// active modality (none in the plain-MSA baseline).
template <typename T>
struct ModelParams {
  ModelConfig config;
  CmtParams<T> cmt;
  std::vector<AuxUnetParams<T>> subnets;  // parallel to config.active_list()

  static ModelParams make(const ModelConfig& config) {
    Rng rng(config.init_seed);
    ModelParams p;
    p.config = config;
    const auto active = config.active_list();
    p.cmt = CmtParams<T>::make(config.base_channels, config.heads, config.mode, active, rng);
    if (config.uses_subnets())
      for (int j : active)
        p.subnets.push_back(
            AuxUnetParams<T>::make(ModalityBundle::channels(j), config.base_channels, rng));
    return p;
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    cmt.visit(prefix + ".cmt", fn);
    const auto active = config.active_list();
    for (size_t i = 0; i < subnets.size(); ++i)
      subnets[i].visit(prefix + ".subnet" + std::to_string(active[i]), fn);
  }
};

template <typename T>
struct ModelOutput {
  Tensor<T> enhanced;            // [H,W,3]; clipped to [0,1] only when !training
  std::vector<Tensor<T>> recon;  // reconstructed modalities, per active modality
};

// cmt-level forward given per-modality taps (empty for the msa baseline).
template <typename T>
Tensor<T> cmt_forward(const Tensor<T>& image, const std::vector<AuxTaps<T>>& taps,
                      const CmtParams<T>& p) {
  auto level_feats = [&taps](Tensor<T> AuxTaps<T>::*member) {
    std::vector<Tensor<T>> feats;
    for (const auto& t : taps) feats.push_back(t.*member);
    return feats;
  };
  const std::vector<Tensor<T>> enc0_feats = level_feats(&AuxTaps<T>::enc0);
  const std::vector<Tensor<T>> enc1_feats = level_feats(&AuxTaps<T>::enc1);
  const std::vector<Tensor<T>> dec1_feats = level_feats(&AuxTaps<T>::dec1);
  const std::vector<Tensor<T>> dec0_feats = level_feats(&AuxTaps<T>::dec0);
  // bottleneck injection combines the down- and up-path taps
  std::vector<Tensor<T>> mid_feats;
  for (const auto& t : taps) mid_feats.push_back(add(t.enc2, t.dec2));

  Tensor<T> x = p.lift(image);
  Tensor<T> e0 = mmtb_forward(x, enc0_feats, p.enc0);
  Tensor<T> x1 = p.down1(e0, 2);
  Tensor<T> e1 = mmtb_forward(x1, enc1_feats, p.enc1a);
  e1 = mmtb_forward(e1, enc1_feats, p.enc1b);
  Tensor<T> x2 = p.down2(e1, 2);
  Tensor<T> m = mmtb_forward(x2, mid_feats, p.mid_a);
  m = mmtb_forward(m, mid_feats, p.mid_b);
  Tensor<T> u2 = p.skip2(concat<T>({p.up2(m), e1}, 2));
  Tensor<T> d1 = mmtb_forward(u2, dec1_feats, p.dec1a);
  d1 = mmtb_forward(d1, dec1_feats, p.dec1b);
  Tensor<T> u1 = p.skip1(concat<T>({p.up1(d1), e0}, 2));
  Tensor<T> d0 = mmtb_forward(u1, dec0_feats, p.dec0);
  // global residual: the network predicts a correction to its input
  return add(p.head(d0), image);
}

template <typename T>
ModelOutput<T> model_forward(const Tensor<T>& image, const std::vector<Tensor<T>>& modalities,
                             const ModelParams<T>& model, bool training) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw ShapeError("model_forward: expected [H,W,3] image, got " + shape_str(image.shape()));
  if (image.dim(0) % 8 != 0 || image.dim(1) % 8 != 0)
    throw ShapeError("model_forward: spatial dims " + std::to_string(image.dim(0)) + "x" +
                     std::to_string(image.dim(1)) + " must be divisible by 8");
  const auto active = model.config.active_list();
  std::vector<AuxTaps<T>> taps;
  if (model.config.uses_subnets()) {
    if (modalities.size() != active.size())
      throw ShapeError("model_forward: got " + std::to_string(modalities.size()) +
                       " modalities, model expects " + std::to_string(active.size()));
    for (size_t i = 0; i < active.size(); ++i) {
      const Tensor<T>& m = modalities[i];
      if (m.dim(0) != image.dim(0) || m.dim(1) != image.dim(1))
        throw ShapeError("model_forward: modality '" +
                         std::string(ModalityBundle::kNames[static_cast<size_t>(active[i])]) +
                         "' spatial dims " + shape_str(m.shape()) + " do not match image " +
                         shape_str(image.shape()));
      taps.push_back(aux_unet_forward(m, model.subnets[i]));
    }
  }
  ModelOutput<T> out;
  out.enhanced = cmt_forward(image, taps, model.cmt);
  if (!training) {
    Tensor<T> clipped = out.enhanced.clone();
    for (int64_t i = 0; i < clipped.size(); ++i)
      clipped[i] = std::min(T(1), std::max(T(0), clipped[i]));
    out.enhanced = clipped;
  }
  for (auto& t : taps) out.recon.push_back(t.recon);
  return out;
}

// Selects the active raw modality maps from a bundle, in active order, cast
// to the model scalar type.
template <typename T>
std::vector<Tensor<T>> active_maps(const ModalityBundle& bundle, const ModelConfig& config) {
  std::vector<Tensor<T>> out;
  for (int j : config.active_list())
    out.push_back(bundle.maps[static_cast<size_t>(j)].template cast<T>());
  return out;
}

}  // namespace cmt
