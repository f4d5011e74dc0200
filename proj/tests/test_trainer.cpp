#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "cmt/dataset.hpp"
#include "cmt/optimizer.hpp"
#include "cmt/param_visit.hpp"
#include "cmt/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace cmt;
namespace fs = std::filesystem;

namespace {

struct ScopedDir {
  std::string path;
  explicit ScopedDir(std::string p) : path(std::move(p)) { fs::remove_all(path); }
  ~ScopedDir() { fs::remove_all(path); }
};

bool params_bit_identical(ModelParams<float>& a, ModelParams<float>& b) {
  auto pa = named_params<float>(a);
  auto pb = named_params<float>(b);
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].second->size() != pb[i].second->size()) return false;
    for (int64_t k = 0; k < pa[i].second->size(); ++k)
      if ((*pa[i].second)[k] != (*pb[i].second)[k]) return false;
  }
  return true;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.total_iters = 12;
  c.batch = 1;
  c.patch = 16;
  c.base_channels = 4;
  c.seed = 5;
  c.log_every = 1;
  c.val_every = 0;
  return c;
}

Dataset tiny_dataset(const std::string& dir, int count = 2, int64_t size = 16) {
  GenDataConfig gc;
  gc.count = count;
  gc.height = size;
  gc.width = size;
  gc.seed = 9;
  generate_corpus(gc, dir);
  return load_corpus(dir);
}

}  // namespace

TEST_CASE("cosine schedule endpoints, midpoint, monotonicity") {
  CHECK(cosine_lr(0, 1000, 3e-4, 1e-6) == 3e-4);
  CHECK(cosine_lr(1000, 1000, 3e-4, 1e-6) == doctest::Approx(1e-6).epsilon(1e-15));
  CHECK(cosine_lr(500, 1000, 3e-4, 1e-6) == doctest::Approx(1.505e-4).epsilon(1e-12));
  double prev = 1e9;
  for (int64_t t = 0; t <= 200; ++t) {
    const double lr = cosine_lr(t, 200, 3e-4, 1e-6);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(-1, 100, 3e-4, 1e-6), UsageError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 3e-4, 1e-6), UsageError);
}

TEST_CASE("adam: scalar reference step and zero-grad behavior") {
  // p=1, g=1, lr=0.1, t=1: mhat=1, vhat=1, step = lr/(1+eps) ~ 0.1
  TensorF p = TensorF::scalar(1.0f);
  std::vector<std::pair<std::string, TensorF*>> params = {{"p", &p}};
  AdamState<float> state;
  state.init(params);
  std::vector<TensorF> grads = {TensorF::scalar(1.0f)};
  adam_step(params, grads, state, 0.1f);
  CHECK(p[0] == doctest::Approx(0.9f).epsilon(1e-6));

  // zero grads against a fresh state leave the parameter untouched
  TensorF q = TensorF::scalar(2.0f);
  std::vector<std::pair<std::string, TensorF*>> qparams = {{"q", &q}};
  AdamState<float> fresh;
  fresh.init(qparams);
  std::vector<TensorF> zero = {TensorF::scalar(0.0f)};
  adam_step(qparams, zero, fresh, 0.1f);
  CHECK(q[0] == 2.0f);

  // with history, zero grads decay the moments (standard Adam still coasts
  // on the remaining momentum)
  const float m_before = state.m[0][0];
  adam_step(params, zero, state, 0.1f);
  CHECK(std::fabs(state.m[0][0]) == doctest::Approx(0.9f * std::fabs(m_before)));
}

TEST_CASE("adam matches a brute-force elementwise reference") {
  Rng rng(7);
  auto p = random_tensor<float>({3, 4}, rng);
  TensorF p_ref = p.clone();
  std::vector<std::pair<std::string, TensorF*>> params = {{"p", &p}};
  AdamState<float> state;
  state.init(params);
  // plain-loop reference state
  std::vector<double> m(12, 0.0), v(12, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
  for (int t = 1; t <= 7; ++t) {
    auto g = random_tensor<float>({3, 4}, rng);
    std::vector<TensorF> grads = {g};
    adam_step(params, grads, state, static_cast<float>(lr));
    for (int64_t i = 0; i < 12; ++i) {
      const double gd = g[i];
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (1 - b1) * gd;
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] + (1 - b2) * gd * gd;
      const double mh = m[static_cast<size_t>(i)] / (1 - std::pow(b1, t));
      const double vh = v[static_cast<size_t>(i)] / (1 - std::pow(b2, t));
      p_ref[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
    }
  }
  for (int64_t i = 0; i < 12; ++i) CHECK(p[i] == doctest::Approx(p_ref[i]).epsilon(2e-5));
}

TEST_CASE("adam aborts on non-finite gradients with the parameter name") {
  TensorF p = TensorF::scalar(1.0f);
  std::vector<std::pair<std::string, TensorF*>> params = {{"layer.w", &p}};
  AdamState<float> state;
  state.init(params);
  std::vector<TensorF> grads = {TensorF::scalar(std::numeric_limits<float>::quiet_NaN())};
  CHECK_THROWS_WITH_AS(adam_step(params, grads, state, 0.1f), doctest::Contains("layer.w"),
                       NumericError);
}

TEST_CASE("gate pre-activations stay in (0,1) after 100 random optimizer steps") {
  Rng rng(11);
  auto attn = CmMsaParams<float>::make(8, 2, InjectionMode::cm_msa,
                                       {0, 1, 2, 3, 4, 5, 6, 7, 8}, rng);
  auto params = named_params<float>(attn);
  AdamState<float> state;
  state.init(params);
  for (int step = 0; step < 100; ++step) {
    std::vector<TensorF> grads;
    for (auto& [n, t] : params) grads.push_back(random_tensor<float>(t->shape(), rng, -2, 2));
    adam_step(params, grads, state, 0.05f);
  }
  auto in_unit = [](float raw) {
    const float v = 1.0f / (1.0f + std::exp(-raw));
    return v > 0.0f && v < 1.0f;
  };
  CHECK(in_unit(attn.tau_raw[0]));
  for (size_t j = 0; j < attn.mod_tau_raw.size(); ++j) {
    CHECK(in_unit(attn.mod_tau_raw[j][0]));
    CHECK(in_unit(attn.theta_raw[j][0]));
  }
}

TEST_CASE("train config json round trip and validation") {
  TrainConfig c = train_config_from_json(R"({
    "lr_init": 1e-3, "total_iters": 50, "batch": 2, "patch": 16,
    "seed": 3, "augment": false, "base_channels": 8,
    "injection_mode": "concat", "loss_perc": false, "ms_ssim_scales": 1
  })");
  CHECK(c.lr_init == 1e-3);
  CHECK(c.total_iters == 50);
  CHECK(c.patch == 16);
  CHECK_FALSE(c.augment);
  CHECK(c.injection_mode == "concat");
  CHECK_FALSE(c.loss_perc);

  CHECK_THROWS_AS(train_config_from_json(R"({"patch": 15})"), UsageError);
  CHECK_THROWS_AS(train_config_from_json(R"({"no_such_key": 1})"), UsageError);
  CHECK_THROWS_AS(train_config_from_json(R"({"patch": 16, "ms_ssim_scales": 3})"), UsageError);
  CHECK_THROWS_AS(train_config_from_json(R"({"injection_mode": "bogus"})"), UsageError);
}

TEST_CASE("training runs, logs, and reduces the smoothed loss") {
  ScopedDir data("test_train_data");
  ScopedDir out("test_train_out");
  Dataset ds = tiny_dataset(data.path, 4, 16);
  TrainConfig c = tiny_config();
  c.total_iters = 200;
  c.val_every = 100;
  TrainResult result = train(c, ds, out.path);
  CHECK(result.iters_run == 200);
  CHECK(fs::exists(result.last_checkpoint));
  CHECK(fs::exists(result.best_checkpoint));

  // parse the jsonl log and compare smoothed early/late losses
  std::ifstream log(fs::path(out.path) / "train_log.jsonl");
  REQUIRE(log.good());
  std::vector<double> losses;
  std::string line;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.contains("loss")) losses.push_back(j["loss"].get<double>());
  }
  REQUIRE(losses.size() >= 200);
  auto window_mean = [&](size_t end) {
    double acc = 0;
    for (size_t i = end - 20; i < end; ++i) acc += losses[i];
    return acc / 20.0;
  };
  CHECK(window_mean(200) < window_mean(20));
}

TEST_CASE("fixed-seed training is bit-identical across runs") {
  ScopedDir data("test_det_data");
  ScopedDir out_a("test_det_a");
  ScopedDir out_b("test_det_b");
  Dataset ds = tiny_dataset(data.path);
  TrainConfig c = tiny_config();
  train(c, ds, out_a.path);
  train(c, ds, out_b.path);
  auto ma = load_checkpoint((fs::path(out_a.path) / "last").string());
  auto mb = load_checkpoint((fs::path(out_b.path) / "last").string());
  CHECK(params_bit_identical(ma, mb));
}

TEST_CASE("resume reproduces the interrupted trajectory bitwise") {
  ScopedDir data("test_resume_data");
  ScopedDir out_full("test_resume_full");
  ScopedDir out_half("test_resume_half");
  Dataset ds = tiny_dataset(data.path);

  TrainConfig c = tiny_config();
  c.total_iters = 16;
  train(c, ds, out_full.path);

  // interrupt the same schedule after 8 iterations
  train(c, ds, out_half.path, "", 8);
  // the saved parameter state reloads bit-exactly
  auto before = load_checkpoint((fs::path(out_half.path) / "last").string());
  auto again = load_checkpoint((fs::path(out_half.path) / "last").string());
  CHECK(params_bit_identical(before, again));
  // continuing to 16 iters matches the uninterrupted run exactly
  train(c, ds, out_half.path, (fs::path(out_half.path) / "last").string());
  auto full = load_checkpoint((fs::path(out_full.path) / "last").string());
  auto resumed = load_checkpoint((fs::path(out_half.path) / "last").string());
  CHECK(params_bit_identical(full, resumed));
}

TEST_CASE("evaluation: deterministic, finite on a fresh model, handles padding") {
  ScopedDir data("test_eval_data");
  Dataset ds = tiny_dataset(data.path);
  TrainConfig c = tiny_config();
  auto model = ModelParams<float>::make(c.model_config());
  EvalResult a = evaluate(model, ds.train);
  EvalResult b = evaluate(model, ds.train);
  REQUIRE(a.rows.size() == ds.train.size());
  for (size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(std::isfinite(a.rows[i].psnr));
    CHECK(a.rows[i].psnr == b.rows[i].psnr);
    CHECK(a.rows[i].ssim == b.rows[i].ssim);
  }

  // non-multiple-of-8 image goes through reflect-pad and crops back
  Rng rng(3);
  ImagePair odd;
  odd.name = "odd";
  odd.gt = procedural_image(20, 28, rng);
  odd.low = degrade(odd.gt, DegradeParams{}, 5);
  odd.bundle_low = extract_bundle(odd.low, 1);
  odd.bundle_gt = extract_bundle(odd.gt, 1);
  auto out = infer_image(model, odd.low, odd.bundle_low);
  CHECK(out.enhanced.shape() == Shape{20, 28, 3});
  EvalResult odd_eval = evaluate(model, {odd});
  CHECK(std::isfinite(odd_eval.mean_psnr));
}

TEST_CASE("training aborts with the iteration number when the loss breaks") {
  ScopedDir data("test_nan_data");
  ScopedDir out("test_nan_out");
  Dataset ds = tiny_dataset(data.path);
  TrainConfig c = tiny_config();
  c.total_iters = 3;
  c.lr_init = 1e10;  // guaranteed blow-up
  c.lr_final = 1e9;
  c.grad_clip = 0;
  try {
    train(c, ds, out.path);
    // divergence may surface either as a non-finite loss or a non-finite
    // forward value; both are NumericErrors
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).size() > 0);
  }
}
