#include "cmt/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cmt/optimizer.hpp"
#include "cmt/param_visit.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cmt {

void TrainConfig::validate() const {
  if (patch % 8 != 0)
    throw UsageError("config: patch " + std::to_string(patch) + " must be divisible by 8");
  if (!(lr_final < lr_init)) throw UsageError("config: lr_final must be below lr_init");
  if (total_iters < 1 || batch < 1) throw UsageError("config: iters and batch must be positive");
  if (base_channels < 4 || base_channels % 4 != 0)
    throw UsageError("config: base_channels must be a positive multiple of 4");
  injection_mode_from_string(injection_mode);  // throws on unknown mode
  if (ms_ssim_scales < 0 || ms_ssim_scales > 5)
    throw UsageError("config: ms_ssim_scales must be 0 (auto) or 1..5");
  if (loss_ms_ssim && ms_ssim_scales > 0 && patch < ms_ssim_min_side(ms_ssim_scales))
    throw UsageError("config: patch " + std::to_string(patch) + " is too small for " +
                     std::to_string(ms_ssim_scales) +
                     " MS-SSIM scales; use fewer scales or a larger patch");
  bool any = false;
  for (bool b : active_modalities) any |= b;
  if (!any && injection_mode != "msa")
    throw UsageError("config: at least one modality must stay active outside msa mode");
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.base_channels = base_channels;
  mc.heads = heads;
  mc.mode = injection_mode_from_string(injection_mode);
  mc.active_modalities = active_modalities;
  mc.init_seed = seed;
  return mc;
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  w.use_mse = loss_mse;
  w.use_ms_ssim = loss_ms_ssim;
  w.use_perceptual = loss_perc;
  w.use_mm = loss_mm && injection_mode != "msa";
  w.ms_ssim_scales =
      ms_ssim_scales > 0 ? ms_ssim_scales : feasible_ms_ssim_scales(patch, patch, 3);
  return w;
}

TrainConfig train_config_from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  std::set<std::string> known = {
      "lr_init",     "lr_final",   "beta1",          "beta2",
      "adam_eps",    "total_iters", "batch",          "patch",
      "seed",        "augment",    "grad_clip",      "base_channels",
      "heads",       "injection_mode", "active_modalities", "loss_mse",
      "loss_ms_ssim", "loss_perc", "loss_mm",        "ms_ssim_scales",
      "log_every",   "val_every"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw UsageError("config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
  };
  get("lr_init", c.lr_init);
  get("lr_final", c.lr_final);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("total_iters", c.total_iters);
  get("batch", c.batch);
  get("patch", c.patch);
  get("seed", c.seed);
  get("augment", c.augment);
  get("grad_clip", c.grad_clip);
  get("base_channels", c.base_channels);
  if (j.contains("heads")) {
    auto heads = j.at("heads").get<std::vector<int>>();
    if (heads.size() != 3) throw UsageError("config: heads must have 3 entries");
    c.heads = {heads[0], heads[1], heads[2]};
  }
  get("injection_mode", c.injection_mode);
  if (j.contains("active_modalities")) {
    auto active = j.at("active_modalities").get<std::vector<bool>>();
    if (active.size() != ModalityBundle::kCount)
      throw UsageError("config: active_modalities must have 9 entries");
    for (size_t i = 0; i < active.size(); ++i) c.active_modalities[i] = active[i];
  }
  get("loss_mse", c.loss_mse);
  get("loss_ms_ssim", c.loss_ms_ssim);
  get("loss_perc", c.loss_perc);
  get("loss_mm", c.loss_mm);
  get("ms_ssim_scales", c.ms_ssim_scales);
  get("log_every", c.log_every);
  get("val_every", c.val_every);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return train_config_from_json(buf.str());
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
}

namespace {

constexpr uint64_t kPsiSeed = 0x9e11;

TensorF pad_reflect_to_multiple(const TensorF& t, int64_t multiple) {
  const int64_t h = t.dim(0), w = t.dim(1), c = t.dim(2);
  const int64_t ph = (multiple - h % multiple) % multiple;
  const int64_t pw = (multiple - w % multiple) % multiple;
  if (ph == 0 && pw == 0) return t;
  const int64_t nh = h + ph, nw = w + pw;
  TensorF out({nh, nw, c});
  auto reflect = [](int64_t i, int64_t n) {
    return i < n ? i : 2 * n - 2 - i;  // mirror over the last row/col
  };
  for (int64_t y = 0; y < nh; ++y)
    for (int64_t x = 0; x < nw; ++x) {
      const int64_t sy = reflect(y, h), sx = reflect(x, w);
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * nw + x) * c + ch] = t[(sy * w + sx) * c + ch];
    }
  return out;
}

TensorF crop_to(const TensorF& t, int64_t h, int64_t w) {
  if (t.dim(0) == h && t.dim(1) == w) return t;
  const int64_t c = t.dim(2);
  TensorF out({h, w, c});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * w + x) * c + ch] = t[(y * t.dim(1) + x) * c + ch];
  return out;
}

double mean_psnr_on(ModelParams<float>& model, const std::vector<ImagePair>& pairs) {
  double total = 0;
  for (const auto& pair : pairs) {
    auto out = infer_image(model, pair.low, pair.bundle_low);
    total += psnr(out.enhanced, pair.gt);
  }
  return pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
}

}  // namespace

EvalRow image_metrics(const std::string& name, const TensorF& out, const TensorF& gt) {
  EvalRow row;
  row.name = name;
  row.psnr = psnr(out, gt);
  row.ssim = static_cast<double>(ssim(out, gt)[0]);
  const int scales = feasible_ms_ssim_scales(out.dim(0), out.dim(1), 3);
  row.ms_ssim = static_cast<double>(ms_ssim(out, gt, scales)[0]);
  return row;
}

ModelOutput<float> infer_image(ModelParams<float>& model, const TensorF& low,
                               const ModalityBundle& bundle) {
  const int64_t h = low.dim(0), w = low.dim(1);
  if (bundle.height() != h || bundle.width() != w)
    throw ShapeError("infer: bundle dims do not match the image");
  TensorF padded = pad_reflect_to_multiple(low, 8);
  std::vector<TensorF> mods;
  for (int j : model.config.active_list())
    mods.push_back(pad_reflect_to_multiple(bundle.maps[static_cast<size_t>(j)], 8));
  ModelOutput<float> out = model_forward(padded, mods, model, false);
  out.enhanced = crop_to(out.enhanced, h, w);
  for (auto& r : out.recon) r = crop_to(r, h, w);
  return out;
}

EvalResult evaluate(ModelParams<float>& model, const std::vector<ImagePair>& pairs) {
  EvalResult result;
  for (const auto& pair : pairs) {
    auto out = infer_image(model, pair.low, pair.bundle_low);
    result.rows.push_back(image_metrics(pair.name, out.enhanced, pair.gt));
    result.mean_psnr += result.rows.back().psnr;
    result.mean_ssim += result.rows.back().ssim;
    result.mean_ms_ssim += result.rows.back().ms_ssim;
  }
  if (!result.rows.empty()) {
    const double n = static_cast<double>(result.rows.size());
    result.mean_psnr /= n;
    result.mean_ssim /= n;
    result.mean_ms_ssim /= n;
  }
  return result;
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const std::string& out_dir,
                  const std::string& resume_dir, int64_t stop_after_iter) {
  config.validate();
  if (dataset.train.empty()) throw DataError("train: dataset is empty");
  for (const auto& pair : dataset.train)
    if (config.patch > pair.low.dim(0) || config.patch > pair.low.dim(1))
      throw DataError("train: image '" + pair.name + "' is smaller than the patch size");
  fs::create_directories(out_dir);

  const ModelConfig mc = config.model_config();
  const LossWeights weights = config.loss_weights();
  const std::vector<int> active = mc.active_list();
  const auto psi = FixedFeatureNet<float>::make(kPsiSeed);

  ModelParams<float> model = ModelParams<float>::make(mc);
  auto params = named_params<float>(model);
  AdamState<float> adam;
  adam.init(params);
  AdamConfig<float> adam_cfg{static_cast<float>(config.beta1), static_cast<float>(config.beta2),
                             static_cast<float>(config.adam_eps)};
  Rng sampler(config.seed ^ 0x5a17b1e5ULL);
  int64_t start_iter = 0;
  double best_psnr = -1.0;

  if (!resume_dir.empty()) {
    TrainerState st;
    model = load_checkpoint(resume_dir, &st);
    params = named_params<float>(model);
    if (!st.present) throw DataError("resume: checkpoint has no trainer state: " + resume_dir);
    adam = std::move(st.adam);
    start_iter = st.iter;
    best_psnr = st.best_psnr;
    sampler = Rng::deserialize(st.sampler_rng);
  }

  std::ofstream log(fs::path(out_dir) / "train_log.jsonl",
                    resume_dir.empty() ? std::ios::trunc : std::ios::app);
  const std::string last_dir = (fs::path(out_dir) / "last").string();
  const std::string best_dir = (fs::path(out_dir) / "best").string();
  const std::vector<ImagePair>& val_set = dataset.val.empty() ? dataset.train : dataset.val;

  auto save_state = [&](const std::string& dir, int64_t iter) {
    TrainerState st;
    st.present = true;
    st.adam = adam;
    st.iter = iter;
    st.best_psnr = best_psnr;
    st.sampler_rng = sampler.serialize();
    save_checkpoint(model, dir, &st);
  };

  const int64_t end_iter = stop_after_iter > 0 ? std::min(stop_after_iter, config.total_iters)
                                               : config.total_iters;
  TrainResult result;
  double last_loss = 0;
  for (int64_t iter = start_iter; iter < end_iter; ++iter) {
    const double lr = cosine_lr(iter, config.total_iters, config.lr_init, config.lr_final);

    Tape<float> tape;
    for (auto& [name, t] : params) tape.watch(*t);
    TensorF batch_total = TensorF::scalar(0.0f);
    double sum_mse = 0, sum_ms = 0, sum_perc = 0, sum_mm = 0;
    for (int64_t b = 0; b < config.batch; ++b) {
      PatchSample s = sample_patch(dataset.train[sampler.next_below(dataset.train.size())],
                                   config.patch, config.augment, active, sampler);
      std::vector<TensorF> mods_in;
      for (auto& m : s.mods_low) mods_in.push_back(m);
      ModelOutput<float> out = model_forward(s.low, mods_in, model, true);
      LossReport<float> report =
          hybrid_loss(out.enhanced, s.gt, out.recon, s.mods_gt, psi, weights);
      batch_total = add(batch_total, report.total);
      sum_mse += report.l_mse.value_or(0);
      sum_ms += report.l_ms_ssim.value_or(0);
      sum_perc += report.l_perc.value_or(0);
      sum_mm += report.l_mm.value_or(0);
    }
    TensorF loss = scale(batch_total, 1.0f / static_cast<float>(config.batch));
    last_loss = loss[0];
    if (!std::isfinite(last_loss))
      throw NumericError("loss became non-finite at iteration " + std::to_string(iter));

    Gradients<float> grads_by_node = tape.backward(loss);
    std::vector<TensorF> grads;
    grads.reserve(params.size());
    for (auto& [name, t] : params) grads.push_back(grads_by_node.of(*t));
    clip_global_norm(grads, static_cast<float>(config.grad_clip));
    adam_step(params, grads, adam, static_cast<float>(lr), adam_cfg);
    detach_params(params);

    if (iter % config.log_every == 0 || iter + 1 == config.total_iters) {
      const double bn = static_cast<double>(config.batch);
      json line;
      line["iter"] = iter;
      line["lr"] = lr;
      line["loss"] = last_loss;
      if (weights.use_mse) {
        line["l_mse"] = sum_mse / bn;
        line["psnr"] = psnr(sum_mse / bn);
      }
      if (weights.use_ms_ssim) line["l_ms_ssim"] = sum_ms / bn;
      if (weights.use_perceptual) line["l_perc"] = sum_perc / bn;
      if (weights.use_mm) line["l_mm"] = sum_mm / bn;
      log << line.dump() << "\n";
      log.flush();
    }

    const bool last_iter = iter + 1 == end_iter;
    if ((config.val_every > 0 && (iter + 1) % config.val_every == 0) || last_iter) {
      const double vp = mean_psnr_on(model, val_set);
      json line;
      line["iter"] = iter;
      line["val_psnr"] = vp;
      log << line.dump() << "\n";
      log.flush();
      if (vp > best_psnr) {
        best_psnr = vp;
        save_state(best_dir, iter + 1);
      }
    }
  }
  save_state(last_dir, end_iter);
  if (!fs::exists(best_dir)) save_state(best_dir, end_iter);

  result.last_checkpoint = last_dir;
  result.best_checkpoint = best_dir;
  result.final_loss = last_loss;
  result.best_val_psnr = best_psnr;
  result.iters_run = end_iter - start_iter;
  return result;
}

}  // namespace cmt

namespace cmt {

std::vector<AblationRow> ablation_rows(const std::string& axis, const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto with = [&](const std::string& name, auto&& edit) {
    TrainConfig c = base;
    edit(c);
    rows.push_back({name, c});
  };
  if (axis == "injection") {
    for (const char* mode : {"add", "concat", "q_replace", "v_pointwise_mul", "cm_msa"})
      with(mode, [mode](TrainConfig& c) { c.injection_mode = mode; });
  } else if (axis == "modality-groups") {
    auto drop = [](TrainConfig& c, std::initializer_list<int> off) {
      for (int j : off) c.active_modalities[static_cast<size_t>(j)] = false;
    };
    with("no_feat_embed", [&](TrainConfig& c) { drop(c, {0, 1, 2}); });
    with("no_segmentation", [&](TrainConfig& c) { drop(c, {3, 4}); });
    with("no_geometric", [&](TrainConfig& c) { drop(c, {5, 6}); });
    with("no_color", [&](TrainConfig& c) { drop(c, {7, 8}); });
    with("all_groups", [](TrainConfig&) {});
  } else if (axis == "loss") {
    with("mse+mm", [](TrainConfig& c) { c.loss_ms_ssim = c.loss_perc = false; });
    with("mse+msssim", [](TrainConfig& c) { c.loss_perc = c.loss_mm = false; });
    with("mse+perc", [](TrainConfig& c) { c.loss_ms_ssim = c.loss_mm = false; });
    with("mse+msssim+perc", [](TrainConfig& c) { c.loss_mm = false; });
    with("all_terms", [](TrainConfig&) {});
  } else {
    throw UsageError("--axis must be injection|modality-groups|loss");
  }
  return rows;
}

}  // namespace cmt
