#pragma once

#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "snr/model.hpp"
#include "snr/snrt.hpp"

namespace snr {

using Json = nlohmann::json;

inline Json to_json(const ModelConfig& cfg) {
  Json stages = Json::array();
  for (const StageSpec& s : cfg.stages)
    stages.push_back({{"in_channels", s.in_channels},
                      {"out_channels", s.out_channels},
                      {"stride", s.stride},
                      {"mode", stage_mode_name(s.mode)}});
  return Json{{"input_channels", cfg.input_channels},
              {"input_h", cfg.input_h},
              {"input_w", cfg.input_w},
              {"stages", stages},
              {"embedding_dim", cfg.embedding_dim},
              {"num_identities", cfg.num_identities},
              {"lambda", cfg.lambda},
              {"baseline_norm", cfg.baseline_norm == BaselineNorm::batch_norm ? "batch_norm" : "instance_norm"},
              {"reduction", cfg.reduction},
              {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig cfg;
  cfg.input_channels = j.value("input_channels", 3);
  cfg.input_h = j.value("input_h", 64);
  cfg.input_w = j.value("input_w", 32);
  cfg.stages.clear();
  for (const Json& s : j.at("stages")) {
    StageSpec spec;
    spec.in_channels = s.at("in_channels").get<int>();
    spec.out_channels = s.at("out_channels").get<int>();
    spec.stride = s.at("stride").get<int>();
    spec.mode = parse_stage_mode(s.at("mode").get<std::string>());
    cfg.stages.push_back(spec);
  }
  cfg.embedding_dim = j.at("embedding_dim").get<int>();
  cfg.num_identities = j.at("num_identities").get<int>();
  cfg.lambda = j.at("lambda").get<std::vector<double>>();
  cfg.baseline_norm = parse_baseline_norm(j.value("baseline_norm", "batch_norm"));
  cfg.reduction = j.value("reduction", 16);
  cfg.seed = j.value("seed", std::uint64_t{1});
  cfg.validate();
  return cfg;
}

// Checkpoint directory layout:
//   manifest.json            config, step/epoch, metrics
//   params/<name>.snrt       every model parameter and running statistic
inline void save_checkpoint(const std::filesystem::path& dir, Model<float>& model, const Json& extra) {
  std::filesystem::create_directories(dir / "params");
  Json manifest{{"format", "snr-checkpoint"}, {"version", 1}, {"model", to_json(model.config())}};
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  {
    std::ofstream f(dir / "manifest.json");
    if (!f) throw std::runtime_error("checkpoint: cannot write manifest in " + dir.string());
    f << manifest.dump(2) << "\n";
  }
  for (Parameter<float>* p : model.all_state())
    write_snrt(dir / "params" / (p->name + ".snrt"), p->shape, p->value);
}

struct Checkpoint {
  Json manifest;
  ModelConfig config;
  std::unique_ptr<Model<float>> model;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("checkpoint: cannot open " + (dir / "manifest.json").string());
  Checkpoint ck;
  f >> ck.manifest;
  if (ck.manifest.value("format", "") != "snr-checkpoint")
    throw std::runtime_error("checkpoint: unrecognized manifest format");
  ck.config = model_config_from_json(ck.manifest.at("model"));
  ck.model = std::make_unique<Model<float>>(ck.config);
  for (Parameter<float>* p : ck.model->all_state()) {
    SnrtTensor t = read_snrt(dir / "params" / (p->name + ".snrt"));
    if (t.count() != p->count())
      throw std::runtime_error("checkpoint: size mismatch for parameter " + p->name);
    for (Index i = 0; i < p->count(); ++i) p->value[i] = t.payload[static_cast<std::size_t>(i)];
  }
  return ck;
}

}  // namespace snr
