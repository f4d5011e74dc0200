#include <cmath>
#include <filesystem>
#include <vector>

#include "cmt/checkpoint.hpp"
#include "cmt/gradcheck.hpp"
#include "cmt/network.hpp"
#include "cmt/optimizer.hpp"
#include "cmt/param_visit.hpp"
#include "doctest.h"

using namespace cmt;
namespace fs = std::filesystem;

namespace {

std::vector<int> all_active() { return {0, 1, 2, 3, 4, 5, 6, 7, 8}; }

ModelConfig small_config(int64_t c = 4) {
  ModelConfig cfg;
  cfg.base_channels = c;
  cfg.heads = {1, 2, 4};
  cfg.mode = InjectionMode::cm_msa;
  cfg.init_seed = 7;
  return cfg;
}

std::vector<TensorD> random_mods(int64_t h, int64_t w, int64_t c, size_t count, Rng& rng) {
  std::vector<TensorD> out;
  for (size_t j = 0; j < count; ++j) out.push_back(random_tensor<double>({h, w, c}, rng));
  return out;
}

// closed-form parameter counts, derived from the architecture definition
int64_t conv_params(int64_t kh, int64_t kw, int64_t cin, int64_t cout) {
  return kh * kw * cin * cout + cout;
}
int64_t attn_params(int64_t c, int64_t n_mod) {
  return conv_params(1, 1, c, 3 * c) + conv_params(1, 1, c, c) + 1 +
         n_mod * (conv_params(1, 1, c, 2 * c) + 2);
}
int64_t ffn_params(int64_t c) {
  return conv_params(1, 1, c, 4 * c) + conv_params(3, 3, 4 * c, 4 * c) +
         conv_params(1, 1, 4 * c, c);
}
int64_t mmtb_params(int64_t c, int64_t n_mod) {
  return attn_params(c, n_mod) + 4 * c + ffn_params(c);
}
int64_t aux_params(int64_t raw, int64_t c) {
  return conv_params(1, 1, raw, c) + conv_params(3, 3, c, c) + conv_params(3, 3, c, 2 * c) +
         conv_params(3, 3, 2 * c, 4 * c) + conv_params(3, 3, 4 * c, 8 * c) +
         conv_params(3, 3, 8 * c, 4 * c) + conv_params(3, 3, 4 * c, 2 * c) +
         conv_params(3, 3, 2 * c, c) + conv_params(1, 1, c, raw);
}
int64_t cmt_params_count(int64_t c, int64_t n_mod) {
  return conv_params(1, 1, 3, c) + 2 * mmtb_params(c, n_mod) + conv_params(3, 3, c, 2 * c) +
         4 * mmtb_params(2 * c, n_mod) + conv_params(3, 3, 2 * c, 4 * c) +
         2 * mmtb_params(4 * c, n_mod) + conv_params(3, 3, 4 * c, 2 * c) +
         conv_params(1, 1, 4 * c, 2 * c) + conv_params(3, 3, 2 * c, c) +
         conv_params(1, 1, 2 * c, c) + conv_params(1, 1, c, 3);
}

}  // namespace

TEST_CASE("ffn preserves shape through the 4x expansion") {
  Rng rng(1);
  auto p = FfnParams<double>::make(8, rng);
  CHECK(p.expand.w.shape() == Shape{1, 1, 8, 32});
  CHECK(p.depth.w.shape() == Shape{3, 3, 32, 32});
  auto f = random_tensor<double>({4, 6, 8}, rng);
  CHECK(ffn_forward(f, p).shape() == f.shape());
}

TEST_CASE("ffn with zeroed weights emits the final bias") {
  Rng rng(2);
  auto p = FfnParams<double>::make(4, rng);
  for (auto& [name, t] : named_params<double>(p))
    for (int64_t i = 0; i < t->size(); ++i) (*t)[i] = 0.0;
  for (int64_t i = 0; i < 4; ++i) p.compress.b[i] = 0.5 + static_cast<double>(i);
  auto f = random_tensor<double>({3, 3, 4}, rng);
  TensorD out = ffn_forward(f, p);
  for (int64_t t = 0; t < 9; ++t)
    for (int64_t c = 0; c < 4; ++c)
      CHECK(out[t * 4 + c] == doctest::Approx(0.5 + static_cast<double>(c)));
}

TEST_CASE("ffn gradcheck") {
  Rng rng(3);
  auto p = FfnParams<double>::make(4, rng);
  auto f = random_tensor<double>({3, 3, 4}, rng);
  auto params = named_params<double>(p);
  std::vector<TensorD> inputs;
  for (auto& [n, t] : params) inputs.push_back(*t);
  inputs.push_back(f);
  auto probe = random_tensor<double>({3, 3, 4}, rng);
  auto res = grad_check<double>(
      [&](const std::vector<TensorD>& in) {
        FfnParams<double> q = p;
        auto slots = named_params<double>(q);
        for (size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i];
        return sum(mul(ffn_forward(in.back(), q), probe));
      },
      inputs);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("mmtb reduces to identity when both branches are zeroed") {
  Rng rng(5);
  auto p = MmtbParams<double>::make(8, 2, InjectionMode::cm_msa, all_active(), rng);
  for (int64_t i = 0; i < p.attn.out_proj.w.size(); ++i) p.attn.out_proj.w[i] = 0.0;
  for (int64_t i = 0; i < p.attn.out_proj.b.size(); ++i) p.attn.out_proj.b[i] = 0.0;
  for (int64_t i = 0; i < p.ffn.compress.w.size(); ++i) p.ffn.compress.w[i] = 0.0;
  for (int64_t i = 0; i < p.ffn.compress.b.size(); ++i) p.ffn.compress.b[i] = 0.0;
  auto f = random_tensor<double>({4, 4, 8}, rng);
  auto mods = random_mods(4, 4, 8, 9, rng);
  TensorD out = mmtb_forward(f, mods, p);
  for (int64_t i = 0; i < f.size(); ++i) CHECK(out[i] == doctest::Approx(f[i]).epsilon(1e-12));
}

TEST_CASE("mmtb shape preservation across a grid") {
  Rng rng(7);
  for (auto [h, w, c, k] :
       std::vector<std::array<int64_t, 4>>{{4, 4, 4, 1}, {2, 6, 8, 2}, {6, 4, 16, 4}}) {
    auto p = MmtbParams<double>::make(c, static_cast<int>(k), InjectionMode::cm_msa,
                                      all_active(), rng);
    auto f = random_tensor<double>({h, w, c}, rng);
    auto mods = random_mods(h, w, c, 9, rng);
    CHECK(mmtb_forward(f, mods, p).shape() == f.shape());
  }
}

TEST_CASE("mmtb full-block gradcheck") {
  Rng rng(9);
  auto p = MmtbParams<double>::make(4, 1, InjectionMode::cm_msa, all_active(), rng);
  auto f = random_tensor<double>({4, 4, 4}, rng);
  auto mods = random_mods(4, 4, 4, 9, rng);
  auto params = named_params<double>(p);
  std::vector<TensorD> inputs;
  for (auto& [n, t] : params) inputs.push_back(*t);
  inputs.push_back(f);
  for (auto& m : mods) inputs.push_back(m);
  auto target = random_tensor<double>({4, 4, 4}, rng);
  auto res = grad_check_block<double>(
      [&](const std::vector<TensorD>& in) {
        MmtbParams<double> q = p;
        auto slots = named_params<double>(q);
        for (size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i];
        TensorD fi = in[slots.size()];
        std::vector<TensorD> ms(in.begin() + static_cast<int64_t>(slots.size()) + 1, in.end());
        TensorD d = sub(mmtb_forward(fi, ms, q), target);
        return mean(mul(d, d));
      },
      inputs);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("aux unet shapes, taps and divisibility guard") {
  Rng rng(11);
  auto p = AuxUnetParams<double>::make(22, 4, rng);
  auto m = random_tensor<double>({32, 32, 22}, rng, 0.0, 1.0);
  auto taps = aux_unet_forward(m, p);
  CHECK(taps.recon.shape() == Shape{32, 32, 22});
  CHECK(taps.enc0.shape() == Shape{32, 32, 4});
  CHECK(taps.enc1.shape() == Shape{16, 16, 8});
  CHECK(taps.enc2.shape() == Shape{8, 8, 16});
  CHECK(taps.dec2.shape() == Shape{8, 8, 16});
  CHECK(taps.dec1.shape() == Shape{16, 16, 8});
  CHECK(taps.dec0.shape() == Shape{32, 32, 4});

  auto bad = random_tensor<double>({12, 12, 22}, rng);
  CHECK_THROWS_AS(aux_unet_forward(bad, p), ShapeError);
}

TEST_CASE("aux unet overfits a single fixed modality map") {
  Rng rng(13);
  auto p = AuxUnetParams<float>::make(22, 16, rng);
  // a structured target: smooth gradients plus a block, in [0,1]
  TensorF target({32, 32, 22});
  for (int64_t y = 0; y < 32; ++y)
    for (int64_t x = 0; x < 32; ++x)
      for (int64_t c = 0; c < 22; ++c)
        target.at({y, x, c}) =
            0.5f + 0.3f * std::sin(0.2f * static_cast<float>(x + 3 * c)) +
            (y > 16 && c % 3 == 0 ? 0.15f : -0.05f);
  for (int64_t i = 0; i < target.size(); ++i)
    target[i] = std::min(1.0f, std::max(0.0f, target[i]));

  auto params = named_params<float>(p);
  AdamState<float> state;
  state.init(params);
  double last_mse = 1e9;
  for (int step = 0; step < 500; ++step) {
    Tape<float> tape;
    for (auto& [n, t] : params) tape.watch(*t);
    auto taps = aux_unet_forward(target, p);
    TensorF diff = sub(taps.recon, target);
    TensorF loss = mean(mul(diff, diff));
    last_mse = loss[0];
    auto grads_by_node = tape.backward(loss);
    std::vector<TensorF> grads;
    for (auto& [n, t] : params) grads.push_back(grads_by_node.of(*t));
    adam_step(params, grads, state, 3e-3f);
    detach_params(params);
  }
  CHECK(last_mse < 1e-3);
}

TEST_CASE("model forward: output shapes and reconstruction channels") {
  ModelConfig cfg = small_config();
  auto model = ModelParams<double>::make(cfg);
  Rng rng(17);
  auto img = random_tensor<double>({16, 16, 3}, rng, 0.0, 1.0);
  std::vector<TensorD> mods;
  for (int j = 0; j < 9; ++j)
    mods.push_back(
        random_tensor<double>({16, 16, ModalityBundle::channels(j)}, rng, 0.0, 1.0));
  auto out = model_forward(img, mods, model, true);
  CHECK(out.enhanced.shape() == Shape{16, 16, 3});
  REQUIRE(out.recon.size() == 9);
  for (int j = 0; j < 9; ++j)
    CHECK(out.recon[static_cast<size_t>(j)].shape() ==
          Shape{16, 16, ModalityBundle::channels(j)});
}

TEST_CASE("model forward is deterministic and clips at inference") {
  ModelConfig cfg = small_config();
  auto model = ModelParams<float>::make(cfg);
  Rng rng(19);
  auto img = random_tensor<float>({16, 16, 3}, rng, 0.0f, 1.0f);
  std::vector<TensorF> mods;
  for (int j = 0; j < 9; ++j)
    mods.push_back(random_tensor<float>({16, 16, ModalityBundle::channels(j)}, rng, 0.0f, 1.0f));
  auto a = model_forward(img, mods, model, false);
  auto b = model_forward(img, mods, model, false);
  for (int64_t i = 0; i < a.enhanced.size(); ++i) {
    CHECK(a.enhanced[i] == b.enhanced[i]);
    CHECK(a.enhanced[i] >= 0.0f);
    CHECK(a.enhanced[i] <= 1.0f);
  }
}

TEST_CASE("model tolerates constant (uninformative) subnet features") {
  ModelConfig cfg = small_config();
  auto model = ModelParams<float>::make(cfg);
  // zero every subnet parameter: all taps and reconstructions collapse to
  // constants driven by biases
  for (auto& subnet : model.subnets)
    for (auto& [n, t] : named_params<float>(subnet))
      for (int64_t i = 0; i < t->size(); ++i) (*t)[i] = 0.0f;
  Rng rng(23);
  auto img = random_tensor<float>({16, 16, 3}, rng, 0.0f, 1.0f);
  std::vector<TensorF> mods;
  for (int j = 0; j < 9; ++j)
    mods.push_back(random_tensor<float>({16, 16, ModalityBundle::channels(j)}, rng, 0.0f, 1.0f));
  auto out = model_forward(img, mods, model, false);
  CHECK(out.enhanced.shape() == Shape{16, 16, 3});
  for (int64_t i = 0; i < out.enhanced.size(); ++i) CHECK(std::isfinite(out.enhanced[i]));
}

TEST_CASE("parameter count matches the hand-derived closed form") {
  for (int64_t c : {4, 8}) {
    ModelConfig cfg = small_config(c);
    auto model = ModelParams<double>::make(cfg);
    const int64_t expected =
        cmt_params_count(c, 9) + 8 * aux_params(22, c) + aux_params(1, c);
    CHECK(param_count<double>(model) == expected);
  }
  // leave-one-group-out drops that group's subnets and projections
  ModelConfig cfg = small_config(4);
  cfg.active_modalities = {false, false, false, true, true, true, true, true, true};
  auto model = ModelParams<double>::make(cfg);
  const int64_t expected = cmt_params_count(4, 6) + 5 * aux_params(22, 4) + aux_params(1, 4);
  CHECK(param_count<double>(model) == expected);
}

TEST_CASE("msa baseline has no subnets and runs without modalities") {
  ModelConfig cfg = small_config();
  cfg.mode = InjectionMode::msa;
  auto model = ModelParams<float>::make(cfg);
  CHECK(model.subnets.empty());
  Rng rng(29);
  auto img = random_tensor<float>({16, 16, 3}, rng, 0.0f, 1.0f);
  auto out = model_forward(img, {}, model, false);
  CHECK(out.enhanced.shape() == Shape{16, 16, 3});
  CHECK(out.recon.empty());
}

TEST_CASE("model end-to-end gradcheck on a sampled coordinate subset") {
  ModelConfig cfg = small_config(4);
  cfg.init_seed = 31;
  auto model = ModelParams<double>::make(cfg);
  Rng rng(37);
  auto img = random_tensor<double>({8, 8, 3}, rng, 0.0, 1.0);
  std::vector<TensorD> mods;
  for (int j = 0; j < 9; ++j)
    mods.push_back(random_tensor<double>({8, 8, ModalityBundle::channels(j)}, rng, 0.0, 1.0));

  auto params = named_params<double>(model);
  std::vector<TensorD> inputs;
  for (auto& [n, t] : params) inputs.push_back(*t);
  inputs.push_back(img);

  // a thin random sample of parameter coordinates plus a few image pixels
  std::vector<std::vector<int64_t>> coords(inputs.size());
  Rng pick(41);
  for (int draw = 0; draw < 40; ++draw) {
    const size_t which = static_cast<size_t>(pick.next_below(params.size()));
    coords[which].push_back(
        static_cast<int64_t>(pick.next_below(static_cast<uint64_t>(inputs[which].size()))));
  }
  for (int draw = 0; draw < 6; ++draw)
    coords.back().push_back(
        static_cast<int64_t>(pick.next_below(static_cast<uint64_t>(img.size()))));

  auto res = grad_check_block<double>(
      [&](const std::vector<TensorD>& in) {
        ModelParams<double> m2 = model;
        auto slots = named_params<double>(m2);
        for (size_t i = 0; i < slots.size(); ++i) *slots[i].second = in[i];
        auto out = model_forward(in.back(), mods, m2, true);
        TensorD acc = mean(mul(out.enhanced, out.enhanced));
        for (auto& r : out.recon) acc = add(acc, mean(mul(r, r)));
        return acc;
      },
      inputs, &coords);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("checkpoint save/load round trip is bit exact") {
  ModelConfig cfg = small_config();
  cfg.mode = InjectionMode::cm_msa;
  auto model = ModelParams<float>::make(cfg);
  // perturb params so we are not just reloading the init
  auto params = named_params<float>(model);
  Rng rng(43);
  for (auto& [n, t] : params)
    for (int64_t i = 0; i < t->size(); ++i) (*t)[i] += static_cast<float>(rng.uniform(-0.1, 0.1));

  TrainerState state;
  state.present = true;
  state.adam.init(params);
  state.adam.t = 17;
  for (auto& m : state.adam.m)
    for (int64_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(rng.uniform(-1, 1));
  state.iter = 123;
  state.best_psnr = 21.5;
  state.sampler_rng = Rng(9).serialize();

  const std::string dir = "test_ckpt";
  save_checkpoint(model, dir, &state);
  TrainerState loaded_state;
  auto loaded = load_checkpoint(dir, &loaded_state);
  auto lparams = named_params<float>(loaded);
  REQUIRE(lparams.size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(lparams[i].first == params[i].first);
    REQUIRE(lparams[i].second->size() == params[i].second->size());
    for (int64_t k = 0; k < params[i].second->size(); ++k)
      CHECK((*lparams[i].second)[k] == (*params[i].second)[k]);
  }
  REQUIRE(loaded_state.present);
  CHECK(loaded_state.adam.t == 17);
  CHECK(loaded_state.iter == 123);
  CHECK(loaded_state.best_psnr == 21.5);
  CHECK(loaded_state.sampler_rng == Rng(9).serialize());
  for (size_t i = 0; i < state.adam.m.size(); ++i)
    for (int64_t k = 0; k < state.adam.m[i].size(); ++k)
      CHECK(loaded_state.adam.m[i][k] == state.adam.m[i][k]);
  fs::remove_all(dir);
}
