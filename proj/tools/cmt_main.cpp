// cmt: cross-modal transformer for low-light image enhancement.
// Subcommands: gen-data, extract, train, infer, eval, gradcheck, bench-attn,
// ablate. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmt/bench.hpp"
#include "cmt/checkpoint.hpp"
#include "cmt/dataset.hpp"
#include "cmt/gradcheck_suites.hpp"
#include "cmt/mft.hpp"
#include "cmt/png_io.hpp"
#include "cmt/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmt;

namespace {

std::vector<int64_t> parse_int_list(const std::string& csv, const char* flag) {
  std::vector<int64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoll(item));
    } catch (...) {
      throw UsageError(std::string(flag) + ": cannot parse '" + item + "' as an integer");
    }
  }
  if (out.empty()) throw UsageError(std::string(flag) + ": empty list");
  return out;
}

int cmd_gen_data(const std::string& out, int count, std::vector<int64_t> size, uint64_t seed,
                 const std::string& severity) {
  GenDataConfig config;
  config.count = count;
  config.height = size[0];
  config.width = size[1];
  config.seed = seed;
  config.severity = severity;
  generate_corpus(config, out);
  std::printf("wrote %d pairs (%lldx%lld, severity %s) to %s\n", count,
              static_cast<long long>(size[0]), static_cast<long long>(size[1]), severity.c_str(),
              out.c_str());
  return 0;
}

int cmd_extract(const std::string& image, const std::string& out, uint64_t seed) {
  TensorF rgb = read_png(image);
  ModalityBundle bundle = extract_bundle(rgb, seed);
  save_bundle(bundle, out);
  std::printf("extracted 9 modalities (%lldx%lld) to %s\n",
              static_cast<long long>(bundle.height()), static_cast<long long>(bundle.width()),
              out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& resume) {
  TrainConfig config = load_train_config(config_path);
  Dataset dataset = load_corpus(data);
  TrainResult result = train(config, dataset, out, resume);
  std::printf("trained %lld iters; final loss %.6f; best val PSNR %.2f dB\n",
              static_cast<long long>(result.iters_run), result.final_loss,
              result.best_val_psnr);
  std::printf("checkpoints: %s (last), %s (best)\n", result.last_checkpoint.c_str(),
              result.best_checkpoint.c_str());
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& bundle_dir,
              const std::string& out, const std::string& dump_dir) {
  ModelParams<float> model = load_checkpoint(ckpt);
  TensorF low = read_png(image);
  ModalityBundle bundle = load_bundle(bundle_dir);
  ModelOutput<float> result = infer_image(model, low, bundle);
  write_png(out, result.enhanced);
  std::printf("wrote %s (%lldx%lld)\n", out.c_str(),
              static_cast<long long>(result.enhanced.dim(0)),
              static_cast<long long>(result.enhanced.dim(1)));
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    const auto active = model.config.active_list();
    for (size_t i = 0; i < result.recon.size(); ++i) {
      const std::string name = ModalityBundle::kNames[static_cast<size_t>(active[i])];
      save_mft_f32((fs::path(dump_dir) / ("recon_" + name + ".mft")).string(), result.recon[i]);
    }
    std::printf("dumped %zu modality reconstructions to %s\n", result.recon.size(),
                dump_dir.c_str());
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split,
             const std::string& json_path) {
  ModelParams<float> model = load_checkpoint(ckpt);
  Dataset dataset = load_corpus(data);
  std::vector<ImagePair> pairs;
  if (split == "train" || split == "all")
    pairs.insert(pairs.end(), dataset.train.begin(), dataset.train.end());
  if (split == "val" || split == "all")
    pairs.insert(pairs.end(), dataset.val.begin(), dataset.val.end());
  if (split != "train" && split != "val" && split != "all")
    throw UsageError("--split must be train|val|all");
  if (pairs.empty()) throw DataError("no images in the requested split");
  EvalResult result = evaluate(model, pairs);
  std::printf("%-12s %8s %8s %8s\n", "image", "psnr", "ssim", "ms-ssim");
  for (const auto& row : result.rows)
    std::printf("%-12s %8.2f %8.4f %8.4f\n", row.name.c_str(), row.psnr, row.ssim, row.ms_ssim);
  std::printf("%-12s %8.2f %8.4f %8.4f\n", "mean", result.mean_psnr, result.mean_ssim,
              result.mean_ms_ssim);
  if (!json_path.empty()) {
    json j;
    j["mean"] = {{"psnr", result.mean_psnr},
                 {"ssim", result.mean_ssim},
                 {"ms_ssim", result.mean_ms_ssim}};
    j["images"] = json::array();
    for (const auto& row : result.rows)
      j["images"].push_back({{"name", row.name},
                             {"psnr", row.psnr},
                             {"ssim", row.ssim},
                             {"ms_ssim", row.ms_ssim}});
    std::ofstream out(json_path);
    out << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& scope, uint64_t seed) {
  std::vector<GradCheckRow> rows;
  if (scope == "op") {
    rows = run_op_gradchecks(seed);
  } else if (scope == "block") {
    rows = run_block_gradchecks(seed);
  } else if (scope == "model") {
    for (uint64_t s = 0; s < 3; ++s) rows.push_back(run_model_gradcheck(seed + s, 0.01 / 3.0));
  } else {
    throw UsageError("--scope must be op|block|model");
  }
  bool all_ok = true;
  for (const auto& row : rows) {
    const bool ok = row.passed();
    all_ok &= ok;
    std::printf("%-28s max_rel_error=%.3e threshold=%.0e %s\n", row.target.c_str(),
                row.max_rel_error, row.threshold, ok ? "ok" : "FAIL");
  }
  if (!all_ok) throw NumericError("gradient check exceeded its threshold");
  return 0;
}

int cmd_bench(const std::string& hw_csv, const std::string& c_csv, int heads,
              const std::string& mode, int64_t max_hw) {
  const bool vanilla = mode == "vanilla";
  if (!vanilla && mode != "cm_msa") throw UsageError("--mode must be cm_msa|vanilla");
  auto hw_list = parse_int_list(hw_csv, "--hw");
  auto c_list = parse_int_list(c_csv, "--c");
  if (vanilla)
    for (int64_t hw : hw_list)
      if (hw > max_hw)
        throw UsageError("vanilla mode refuses hw " + std::to_string(hw) +
                         " above the --max-hw guard (" + std::to_string(max_hw) + ")");

  std::printf("%-8s %-6s %-6s %14s %12s\n", "hw", "c", "heads", "macs", "ms");
  std::vector<std::vector<AttnBenchPoint>> by_c;
  for (int64_t c : c_list) {
    std::vector<AttnBenchPoint> points;
    for (int64_t hw : hw_list) {
      AttnBenchPoint p = bench_attention(hw, c, heads, vanilla, 42);
      const double expected =
          vanilla ? vanilla_attention_macs(hw, c, heads) : cm_attention_macs(hw, c, heads);
      if (p.macs != expected)
        throw NumericError("counted MACs disagree with the closed form at hw=" +
                           std::to_string(hw));
      std::printf("%-8lld %-6lld %-6d %14.0f %12.4f\n", static_cast<long long>(hw),
                  static_cast<long long>(c), heads, p.macs, p.seconds * 1e3);
      points.push_back(p);
    }
    by_c.push_back(std::move(points));
  }
  for (size_t ci = 0; ci < c_list.size(); ++ci) {
    if (hw_list.size() < 2) continue;
    std::vector<double> xs, times, macs;
    for (const auto& p : by_c[ci]) {
      xs.push_back(static_cast<double>(p.hw));
      times.push_back(p.seconds);
      macs.push_back(p.macs);
    }
    std::printf("c=%-4lld exponent vs hw: macs %.4f, time %.3f\n",
                static_cast<long long>(c_list[ci]), loglog_slope(xs, macs),
                loglog_slope(xs, times));
  }
  if (c_list.size() >= 2) {
    for (size_t hi = 0; hi < hw_list.size(); ++hi) {
      std::vector<double> cs, macs;
      for (size_t ci = 0; ci < c_list.size(); ++ci) {
        cs.push_back(static_cast<double>(c_list[ci]));
        macs.push_back(by_c[ci][hi].macs);
      }
      std::printf("hw=%-6lld exponent vs c: macs %.4f\n",
                  static_cast<long long>(hw_list[hi]), loglog_slope(cs, macs));
    }
  }
  return 0;
}

int cmd_ablate(const std::string& axis, const std::string& config_path, const std::string& data,
               const std::string& out) {
  TrainConfig base = load_train_config(config_path);
  Dataset dataset = load_corpus(data);
  fs::create_directories(out);
  const std::vector<ImagePair>& eval_set = dataset.val.empty() ? dataset.train : dataset.val;

  double baseline_psnr = 0;
  for (const auto& pair : eval_set) baseline_psnr += psnr(pair.low, pair.gt);
  baseline_psnr /= static_cast<double>(eval_set.size());

  json results;
  results["axis"] = axis;
  results["raw_input_psnr"] = baseline_psnr;
  results["rows"] = json::array();
  std::printf("%-18s %10s %8s %8s\n", "row", "params", "psnr", "ssim");
  for (const AblationRow& row : ablation_rows(axis, base)) {
    const std::string row_out = (fs::path(out) / row.name).string();
    TrainResult tr = train(row.config, dataset, row_out);
    ModelParams<float> model = load_checkpoint(tr.best_checkpoint);
    EvalResult ev = evaluate(model, eval_set);
    const int64_t params = param_count<float>(model);
    std::printf("%-18s %10lld %8.2f %8.4f\n", row.name.c_str(),
                static_cast<long long>(params), ev.mean_psnr, ev.mean_ssim);
    results["rows"].push_back({{"name", row.name},
                               {"params", params},
                               {"psnr", ev.mean_psnr},
                               {"ssim", ev.mean_ssim},
                               {"ms_ssim", ev.mean_ms_ssim}});
  }
  std::ofstream json_out(fs::path(out) / "results.json");
  json_out << results.dump(2) << "\n";
  std::printf("raw-input baseline PSNR: %.2f dB; results in %s/results.json\n", baseline_psnr,
              out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal transformer for low-light image enhancement"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize a paired low/normal-light corpus");
  std::string gen_out, gen_severity = "med";
  int gen_count = 4;
  std::vector<int64_t> gen_size = {32, 32};
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--count", gen_count);
  gen->add_option("--size", gen_size)->expected(2);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--severity", gen_severity);

  // extract
  auto* ext = app.add_subcommand("extract", "extract the nine auxiliary modalities");
  std::string ext_image, ext_out;
  uint64_t ext_seed = 1;
  ext->add_option("--image", ext_image)->required();
  ext->add_option("--out", ext_out)->required();
  ext->add_option("--seed", ext_seed);

  // train
  auto* tr = app.add_subcommand("train", "train the model on a corpus");
  std::string tr_config, tr_data, tr_out, tr_resume;
  tr->add_option("--config", tr_config)->required();
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--resume", tr_resume);

  // infer
  auto* inf = app.add_subcommand("infer", "enhance one image with a checkpoint");
  std::string inf_ckpt, inf_image, inf_bundle, inf_out, inf_dump;
  inf->add_option("--ckpt", inf_ckpt)->required();
  inf->add_option("--image", inf_image)->required();
  inf->add_option("--bundle", inf_bundle)->required();
  inf->add_option("--out", inf_out)->required();
  inf->add_option("--dump-modalities", inf_dump);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  std::string ev_ckpt, ev_data, ev_split = "val", ev_json;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--json", ev_json);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "run finite-difference gradient suites");
  std::string gc_scope = "op";
  uint64_t gc_seed = 1;
  gc->add_option("--scope", gc_scope);
  gc->add_option("--seed", gc_seed);

  // bench-attn
  auto* be = app.add_subcommand("bench-attn", "attention scaling benchmark");
  std::string be_hw = "256,576,1024,2304,4096", be_c = "16,32,64", be_mode = "cm_msa";
  int be_heads = 2;
  int64_t be_max_hw = 4096;
  be->add_option("--hw", be_hw);
  be->add_option("--c", be_c);
  be->add_option("--heads", be_heads);
  be->add_option("--mode", be_mode);
  be->add_option("--max-hw", be_max_hw);

  // ablate
  auto* ab = app.add_subcommand("ablate", "run one ablation axis");
  std::string ab_axis, ab_config, ab_data, ab_out;
  ab->add_option("--axis", ab_axis)->required();
  ab->add_option("--config", ab_config)->required();
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--out", ab_out)->required();

  try {
    app.parse(argc, argv);
    if (*gen) return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed, gen_severity);
    if (*ext) return cmd_extract(ext_image, ext_out, ext_seed);
    if (*tr) return cmd_train(tr_config, tr_data, tr_out, tr_resume);
    if (*inf) return cmd_infer(inf_ckpt, inf_image, inf_bundle, inf_out, inf_dump);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_json);
    if (*gc) return cmd_gradcheck(gc_scope, gc_seed);
    if (*be) return cmd_bench(be_hw, be_c, be_heads, be_mode, be_max_hw);
    if (*ab) return cmd_ablate(ab_axis, ab_config, ab_data, ab_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
