#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmt/network.hpp"
#include "cmt/optimizer.hpp"

namespace cmt {

// Optimizer state and training progress carried alongside the parameters so
// interrupted runs resume bit-exactly.
struct TrainerState {
  bool present = false;
  AdamState<float> adam;
  int64_t iter = 0;
  double best_psnr = -1.0;
  std::string sampler_rng;
};

// Checkpoint directory layout:
//   model.json    - architecture config
//   manifest.txt  - one line per parameter: name rank dims... offset
//   params.bin    - concatenated MFT1 payloads at the manifest offsets
//   state.json, adam_m.bin, adam_v.bin - trainer state (optional)
// Writes go to <dir>.tmp first and are renamed into place.
void save_checkpoint(ModelParams<float>& model, const std::string& dir,
                     const TrainerState* state = nullptr);
ModelParams<float> load_checkpoint(const std::string& dir, TrainerState* state = nullptr);

// Config (de)serialization shared with the trainer CLI.
std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace cmt
