#include "cmt/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cmt/mft.hpp"
#include "cmt/param_visit.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cmt {

namespace {

void write_tensor_blob(const std::string& path,
                       const std::vector<std::pair<std::string, TensorF*>>& params,
                       std::vector<int64_t>* offsets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  for (const auto& [name, tensor] : params) {
    if (offsets) offsets->push_back(static_cast<int64_t>(out.tellp()));
    write_mft_f32(out, *tensor);
  }
}

void read_tensor_blob(const std::string& path,
                      const std::vector<std::pair<std::string, TensorF*>>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  for (const auto& [name, tensor] : params) {
    TensorF loaded = read_mft_f32(in);
    if (!(loaded.shape() == tensor->shape()))
      throw ShapeError("checkpoint tensor '" + name + "' has shape " +
                       shape_str(loaded.shape()) + ", model expects " +
                       shape_str(tensor->shape()));
    *tensor = std::move(loaded);
  }
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) {
  json j;
  j["base_channels"] = config.base_channels;
  j["heads"] = config.heads;
  j["mode"] = to_string(config.mode);
  j["active_modalities"] = config.active_modalities;
  j["init_seed"] = config.init_seed;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig config;
  config.base_channels = j.at("base_channels").get<int64_t>();
  const auto heads = j.at("heads").get<std::vector<int>>();
  if (heads.size() != 3) throw DataError("model config: heads must have 3 entries");
  config.heads = {heads[0], heads[1], heads[2]};
  config.mode = injection_mode_from_string(j.at("mode").get<std::string>());
  const auto active = j.at("active_modalities").get<std::vector<bool>>();
  if (active.size() != ModalityBundle::kCount)
    throw DataError("model config: active_modalities must have 9 entries");
  for (size_t i = 0; i < active.size(); ++i) config.active_modalities[i] = active[i];
  config.init_seed = j.at("init_seed").get<uint64_t>();
  return config;
}

void save_checkpoint(ModelParams<float>& model, const std::string& dir,
                     const TrainerState* state) {
  const fs::path tmp = dir + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  {
    std::ofstream out(tmp / "model.json");
    out << model_config_to_json(model.config) << "\n";
  }
  auto params = named_params<float>(model);
  std::vector<int64_t> offsets;
  write_tensor_blob((tmp / "params.bin").string(), params, &offsets);
  {
    std::ofstream manifest(tmp / "manifest.txt");
    for (size_t i = 0; i < params.size(); ++i) {
      manifest << params[i].first << " " << params[i].second->rank();
      for (int d = 0; d < params[i].second->rank(); ++d)
        manifest << " " << params[i].second->dim(d);
      manifest << " " << offsets[i] << "\n";
    }
  }
  if (state && state->present) {
    std::vector<std::pair<std::string, TensorF*>> m_list, v_list;
    for (size_t i = 0; i < params.size(); ++i) {
      m_list.emplace_back(params[i].first,
                          const_cast<TensorF*>(&state->adam.m[i]));
      v_list.emplace_back(params[i].first,
                          const_cast<TensorF*>(&state->adam.v[i]));
    }
    write_tensor_blob((tmp / "adam_m.bin").string(), m_list, nullptr);
    write_tensor_blob((tmp / "adam_v.bin").string(), v_list, nullptr);
    json j;
    j["adam_t"] = state->adam.t;
    j["iter"] = state->iter;
    j["best_psnr"] = state->best_psnr;
    j["sampler_rng"] = state->sampler_rng;
    std::ofstream out(tmp / "state.json");
    out << j.dump(2) << "\n";
  }

  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

ModelParams<float> load_checkpoint(const std::string& dir, TrainerState* state) {
  std::ifstream cfg(fs::path(dir) / "model.json");
  if (!cfg) throw DataError("not a checkpoint directory (missing model.json): " + dir);
  std::stringstream buf;
  buf << cfg.rdbuf();
  ModelConfig config = model_config_from_json(buf.str());
  ModelParams<float> model = ModelParams<float>::make(config);
  auto params = named_params<float>(model);

  // validate the manifest against the freshly built parameter tree
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) throw DataError("checkpoint missing manifest.txt: " + dir);
  std::string line;
  size_t idx = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (idx >= params.size()) throw DataError("checkpoint manifest has extra entries");
    std::istringstream ss(line);
    std::string name;
    int rank = 0;
    ss >> name >> rank;
    if (name != params[idx].first)
      throw DataError("checkpoint manifest entry '" + name + "' does not match model parameter '" +
                      params[idx].first + "'");
    ++idx;
  }
  if (idx != params.size()) throw DataError("checkpoint manifest is missing entries");

  read_tensor_blob((fs::path(dir) / "params.bin").string(), params);

  if (state) {
    state->present = false;
    const fs::path state_path = fs::path(dir) / "state.json";
    if (fs::exists(state_path)) {
      std::ifstream in(state_path);
      json j = json::parse(in);
      state->present = true;
      state->adam.t = j.at("adam_t").get<int64_t>();
      state->iter = j.at("iter").get<int64_t>();
      state->best_psnr = j.at("best_psnr").get<double>();
      state->sampler_rng = j.at("sampler_rng").get<std::string>();
      state->adam.init(params);
      state->adam.t = j.at("adam_t").get<int64_t>();
      std::vector<std::pair<std::string, TensorF*>> m_list, v_list;
      for (size_t i = 0; i < params.size(); ++i) {
        m_list.emplace_back(params[i].first, &state->adam.m[i]);
        v_list.emplace_back(params[i].first, &state->adam.v[i]);
      }
      read_tensor_blob((fs::path(dir) / "adam_m.bin").string(), m_list);
      read_tensor_blob((fs::path(dir) / "adam_v.bin").string(), v_list);
    }
  }
  return model;
}

}  // namespace cmt
