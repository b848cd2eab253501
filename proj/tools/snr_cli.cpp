#include <CLI11.hpp>

#include <iostream>

#include "snr/harness.hpp"

namespace {

using snr::Json;

snr::GenSpec gen_spec_from_json(const Json& j) {
  snr::GenSpec spec;
  spec.seed = j.value("seed", spec.seed);
  spec.num_identities = j.value("num_identities", spec.num_identities);
  spec.instances_per_domain = j.value("instances_per_domain", spec.instances_per_domain);
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  spec.jitter_translate = j.value("jitter_translate", spec.jitter_translate);
  spec.jitter_scale = j.value("jitter_scale", spec.jitter_scale);
  spec.png_preview = j.value("png_preview", spec.png_preview);
  auto range = [](const Json& r) {
    if (!r.is_array() || r.size() != 2) throw snr::ConfigError("style range must be [lo, hi]");
    return snr::StyleRange{r[0].get<double>(), r[1].get<double>()};
  };
  auto range3 = [&](const Json& r, std::array<snr::StyleRange, 3>& out) {
    if (r.is_array() && r.size() == 3 && r[0].is_array()) {
      for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(c)] = range(r[c]);
    } else {
      const snr::StyleRange shared = range(r);
      out = {shared, shared, shared};
    }
  };
  for (const Json& d : j.at("domains")) {
    snr::StyleDomainSpec dom;
    dom.domain_id = d.at("id").get<int>();
    dom.held_out = d.value("held_out", false);
    if (d.contains("gain")) range3(d.at("gain"), dom.gain);
    if (d.contains("bias")) range3(d.at("bias"), dom.bias);
    if (d.contains("gamma")) dom.gamma = range(d.at("gamma"));
    if (d.contains("contrast")) dom.contrast = range(d.at("contrast"));
    if (d.contains("saturation")) dom.saturation = range(d.at("saturation"));
    dom.noise_std = d.value("noise_std", 0.0);
    dom.seed = d.value("seed", snr::mix_seed(spec.seed, static_cast<std::uint64_t>(dom.domain_id)));
    spec.domains.push_back(dom);
  }
  return spec;
}

void write_eval_csv(const std::filesystem::path& path, const snr::EvalReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  f << "target_domain,mAP,cmc1,cmc5,cmc10,cmc20\n";
  f << rep.target_domain << "," << rep.map << "," << rep.cmc.at(1) << "," << rep.cmc.at(5) << "," << rep.cmc.at(10)
    << "," << rep.cmc.at(20) << "\n";
}

void write_divergence_csv(const std::filesystem::path& path, const snr::DivergenceReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  f << "stage,symmetric_kl\n";
  for (std::size_t s = 0; s < rep.stage_mean.size(); ++s) f << (s + 1) << "," << rep.stage_mean[s] << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style normalization and restitution toolkit"};
  app.require_subcommand(1);

  std::string spec_file, out_dir, config_file, checkpoint_dir, manifest_file, report_file, csv_file, matrix_file;
  std::string domains_arg, dump_traces_dir;
  int target_domain = -1;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a styled-identity corpus");
  gen->add_option("--spec", spec_file, "Generator spec JSON")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train one scheme");
  train->add_option("--config", config_file, "Train config JSON")->required();
  train->add_option("--out", out_dir, "Output directory (overrides config out_dir)");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a target domain");
  eval->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
  eval->add_option("--manifest", manifest_file, "Dataset manifest")->required();
  eval->add_option("--target-domain", target_domain, "Held-out domain id")->required();
  eval->add_option("--report", report_file, "Report JSON path")->required();
  eval->add_option("--csv", csv_file, "Optional CSV path");
  eval->add_option("--dump-traces", dump_traces_dir, "Dump SNR trace tensors to this directory");

  CLI::App* ablate = app.add_subcommand("ablate", "Run a scheme x seed ablation sweep");
  ablate->add_option("--matrix", matrix_file, "Ablation matrix JSON")->required();
  ablate->add_option("--out", out_dir, "Output directory")->required();

  CLI::App* diverg = app.add_subcommand("divergence", "Per-stage feature divergence between two domains");
  diverg->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
  diverg->add_option("--domains", domains_arg, "Comma-separated pair, e.g. 0,1")->required();
  diverg->add_option("--report", report_file, "Report JSON path")->required();
  diverg->add_option("--manifest", manifest_file, "Dataset manifest (defaults to the one used in training)");
  diverg->add_option("--csv", csv_file, "Optional CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      snr::GenSpec spec = gen_spec_from_json(snr::read_json(spec_file));
      snr::DatasetManifest m = snr::generate_synthetic_domains(spec, out_dir);
      std::cout << "wrote " << m.samples.size() << " samples to " << out_dir << "\n";
    } else if (train->parsed()) {
      snr::TrainConfig cfg = snr::train_config_from_json(snr::read_json(config_file));
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (cfg.out_dir.empty()) throw snr::ConfigError("train: no output directory (set out_dir or pass --out)");
      snr::TrainResult res = snr::train_run(cfg);
      std::cout << "checkpoint: " << res.checkpoint_dir.string() << "\n";
    } else if (eval->parsed()) {
      std::filesystem::path traces(dump_traces_dir);
      snr::EvalReport rep = snr::evaluate_checkpoint(checkpoint_dir, manifest_file, target_domain,
                                                     dump_traces_dir.empty() ? nullptr : &traces);
      snr::write_json(report_file, rep.to_json());
      if (!csv_file.empty()) write_eval_csv(csv_file, rep);
      std::cout << "mAP " << rep.map << "  rank-1 " << rep.cmc.at(1) << "\n";
    } else if (ablate->parsed()) {
      Json table = snr::run_ablation(snr::read_json(matrix_file), out_dir);
      std::cout << "wrote " << (std::filesystem::path(out_dir) / "table.json").string() << "\n";
    } else if (diverg->parsed()) {
      const auto comma = domains_arg.find(',');
      if (comma == std::string::npos) throw snr::ConfigError("divergence: --domains expects A,B");
      const int dom_a = std::stoi(domains_arg.substr(0, comma));
      const int dom_b = std::stoi(domains_arg.substr(comma + 1));
      std::filesystem::path mf(manifest_file);
      if (manifest_file.empty()) {
        const Json ck = snr::read_json(std::filesystem::path(checkpoint_dir) / "manifest.json");
        mf = ck.at("train").at("dataset_manifest").get<std::string>();
      }
      snr::DivergenceReport rep = snr::divergence_between_domains(checkpoint_dir, mf, dom_a, dom_b);
      const Json ck = snr::read_json(std::filesystem::path(checkpoint_dir) / "manifest.json");
      snr::write_json(report_file,
                      snr::divergence_to_json(rep, snr::config_hash_hex(Json{{"model", ck.at("model")},
                                                                             {"domains", {dom_a, dom_b}}})));
      if (!csv_file.empty()) write_divergence_csv(csv_file, rep);
      for (std::size_t s = 0; s < rep.stage_mean.size(); ++s)
        std::cout << "stage " << (s + 1) << " skl " << rep.stage_mean[s] << "\n";
    }
  } catch (const snr::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const snr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
