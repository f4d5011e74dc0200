#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cmt/checkpoint.hpp"
#include "cmt/dataset.hpp"
#include "cmt/losses.hpp"
#include "cmt/network.hpp"

namespace cmt {

struct TrainConfig {
  double lr_init = 3e-4;
  double lr_final = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t total_iters = 2000;
  int64_t batch = 2;
  int64_t patch = 32;
  uint64_t seed = 1;
  bool augment = true;
  double grad_clip = 1.0;  // global-norm cap; 0 disables

  // architecture / ablation axes
  int64_t base_channels = 16;
  std::array<int, 3> heads = {1, 2, 4};
  std::string injection_mode = "cm_msa";
  std::array<bool, ModalityBundle::kCount> active_modalities = {true, true, true, true, true,
                                                                true, true, true, true};
  bool loss_mse = true;
  bool loss_ms_ssim = true;
  bool loss_perc = true;
  bool loss_mm = true;
  int ms_ssim_scales = 0;  // 0 = auto (largest feasible for the patch, capped at 3)

  int64_t log_every = 25;
  int64_t val_every = 250;

  void validate() const;
  ModelConfig model_config() const;
  LossWeights loss_weights() const;  // resolves auto scale count against patch
};

TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);

struct TrainResult {
  std::string last_checkpoint;
  std::string best_checkpoint;
  double final_loss = 0;
  double best_val_psnr = -1;
  int64_t iters_run = 0;
};

// Joint optimization of the transformer and the subnets: Adam with cosine
// annealing, random crop + dihedral augmentation, JSON-lines metric log at
// <out_dir>/train_log.jsonl, checkpoints "last" and "best" under out_dir.
// `stop_after_iter` > 0 interrupts the run at that absolute iteration while
// keeping the full-length schedule (resume continues it).
TrainResult train(const TrainConfig& config, const Dataset& dataset, const std::string& out_dir,
                  const std::string& resume_dir = "", int64_t stop_after_iter = 0);

struct EvalRow {
  std::string name;
  double psnr = 0;
  double ssim = 0;
  double ms_ssim = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  double mean_psnr = 0;
  double mean_ssim = 0;
  double mean_ms_ssim = 0;
};

// Deterministic full-image evaluation (no crops). Images whose dims are not
// divisible by 8 are reflect-padded to the next multiple and cropped back.
EvalResult evaluate(ModelParams<float>& model, const std::vector<ImagePair>& pairs);

// Single-image inference with the same padding policy.
ModelOutput<float> infer_image(ModelParams<float>& model, const TensorF& low,
                               const ModalityBundle& bundle);

// Metric helpers shared by eval paths (computed on [0,1]-clipped outputs).
EvalRow image_metrics(const std::string& name, const TensorF& out, const TensorF& gt);

// The row sets of the three ablation axes, derived from a base config: the
// five injection mechanisms, the four leave-one-group-out rows plus all
// groups, and the loss-term combinations.
struct AblationRow {
  std::string name;
  TrainConfig config;
};
std::vector<AblationRow> ablation_rows(const std::string& axis, const TrainConfig& base);

}  // namespace cmt
