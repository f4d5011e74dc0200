#pragma once

#include <string>
#include <vector>

#include "cmt/modality.hpp"
#include "cmt/tensor.hpp"

namespace cmt {

// One paired sample: the degraded input, its ground truth, the bundle
// extracted from the degraded input (what the model sees) and the bundle of
// the ground truth (the multimodal reconstruction targets).
struct ImagePair {
  std::string name;
  TensorF low;
  TensorF gt;
  ModalityBundle bundle_low;
  ModalityBundle bundle_gt;

  void validate() const;
};

struct Dataset {
  std::vector<ImagePair> train;
  std::vector<ImagePair> val;
};

// --- dihedral-4 augmentation group ------------------------------------------

// Elements 0..3 rotate by 90 degrees k times; 4..7 mirror horizontally first.
TensorF dihedral_apply(const TensorF& t, int element);
int dihedral_inverse(int element);

// --- procedural corpus -------------------------------------------------------

struct GenDataConfig {
  int count = 4;
  int64_t height = 32;
  int64_t width = 32;
  uint64_t seed = 1;
  std::string severity = "med";  // low | med | high
};

// Synthesizes a bright procedural image (gradients, shapes, texture).
TensorF procedural_image(int64_t h, int64_t w, Rng& rng);

DegradeParams severity_params(const std::string& severity, Rng& rng);

// Writes `count` gt/low PNG pairs, the bundles of both, and dataset.txt with
// the train/val split. Deterministic per seed.
void generate_corpus(const GenDataConfig& config, const std::string& out_dir);

Dataset load_corpus(const std::string& dir);

// --- patch sampling ----------------------------------------------------------

struct PatchSample {
  TensorF low;
  TensorF gt;
  std::vector<TensorF> mods_low;  // active modality crops from bundle_low
  std::vector<TensorF> mods_gt;   // matching crops from bundle_gt
};

// One random crop plus one dihedral element, applied identically to every
// tensor of the pair. `active` lists the modality indices to carry.
PatchSample sample_patch(const ImagePair& pair, int64_t patch, bool augment,
                         const std::vector<int>& active, Rng& rng);

}  // namespace cmt
