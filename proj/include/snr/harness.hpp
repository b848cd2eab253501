#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "snr/checkpoint.hpp"
#include "snr/data.hpp"
#include "snr/evalkit.hpp"

namespace snr {

// Configuration errors map to CLI exit code 2, numerical aborts to 3.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string scheme = "baseline-snr";

  double lr_base = 8e-4;
  double lr_warmup_start = 8e-6;
  int warmup_epochs = 20;
  double decay_factor = 0.5;
  int decay_every = 40;
  double weight_decay = 5e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  int epochs = 60;
  int batch_p = 4, batch_k = 4;
  std::uint64_t seed = 1;

  std::string dataset_manifest;
  std::string out_dir;
  int eval_every = 10;        // 0 disables periodic eval
  int checkpoint_every = 20;  // 0 keeps only the final checkpoint
  int eval_target_domain = -1;

  double label_smoothing = 0.1;
  std::string snr_triplet_policy = "random";  // random | batch_hard

  std::vector<int> stage_channels{16, 32, 64, 128};
  std::vector<int> stage_strides{2, 2, 2, 2};
  int embedding_dim = 128;
  int reduction = 16;
  std::vector<double> lambda{0.1, 0.1, 0.5, 0.5};

  void validate() const;
};

// Warmup: linear lr_warmup_start -> lr_base over warmup_epochs; afterwards
// lr_base * decay_factor^((epoch - warmup) / decay_every).
double lr_schedule(int epoch, const TrainConfig& cfg);

// How a named ablation scheme maps onto model modes and loss switches.
struct SchemeInfo {
  std::vector<StageMode> modes;  // per stage
  BaselineNorm baseline_norm = BaselineNorm::batch_norm;
  bool use_clarification = true;
  bool use_destruction = true;
};

SchemeInfo scheme_info(const std::string& name, std::size_t num_stages);
std::vector<std::string> known_schemes();

ModelConfig make_model_config(const TrainConfig& cfg, int num_identities, int input_c, int input_h, int input_w);

TrainConfig train_config_from_json(const Json& j);
Json to_json(const TrainConfig& cfg);

struct TrainResult {
  std::filesystem::path checkpoint_dir;
  Json run_record;
};

TrainResult train_run(const TrainConfig& cfg);

struct EvalReport {
  double map = 0;
  std::map<int, double> cmc;  // ranks 1, 5, 10, 20
  int target_domain = -1;
  Index num_queries = 0, num_gallery = 0;
  std::string config_hash;

  Json to_json() const;
};

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint_dir,
                               const std::filesystem::path& manifest_file, int target_domain,
                               const std::filesystem::path* dump_traces_dir = nullptr);

// Per-stage symmetric KL of pooled stage outputs between two domains, with
// at most max_samples seeded-subsampled images per domain.
DivergenceReport divergence_between_domains(const std::filesystem::path& checkpoint_dir,
                                            const std::filesystem::path& manifest_file, int domain_a, int domain_b,
                                            int max_samples = 500, std::uint64_t seed = 0);

Json divergence_to_json(const DivergenceReport& rep, const std::string& config_hash);

// Trains schemes x seeds, evaluates each cell on the target domain and
// aggregates mean/std. Cells run independently; failures are recorded per
// cell without aborting the sweep.
Json run_ablation(const Json& matrix, const std::filesystem::path& out_dir);

std::string config_hash_hex(const Json& j);
void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

}  // namespace snr
