#include "snr/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "snr/optim.hpp"

namespace snr {

void TrainConfig::validate() const {
  if (lr_base <= 0 || lr_warmup_start <= 0) throw ConfigError("TrainConfig: learning rates must be positive");
  if (warmup_epochs < 0 || decay_every < 1) throw ConfigError("TrainConfig: bad schedule");
  if (epochs < warmup_epochs && epochs < 1) throw ConfigError("TrainConfig: epochs must cover at least one epoch");
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be positive");
  if (batch_p < 1 || batch_k < 1) throw ConfigError("TrainConfig: P and K must be positive");
  if (stage_channels.empty() || stage_channels.size() != stage_strides.size())
    throw ConfigError("TrainConfig: stage channels/strides mismatch");
  if (lambda.size() != stage_channels.size()) throw ConfigError("TrainConfig: lambda count must match stage count");
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("TrainConfig: bad label smoothing");
  if (snr_triplet_policy != "random" && snr_triplet_policy != "batch_hard")
    throw ConfigError("TrainConfig: unknown snr_triplet_policy " + snr_triplet_policy);
  if (dataset_manifest.empty()) throw ConfigError("TrainConfig: dataset manifest not set");
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr_warmup_start +
           (cfg.lr_base - cfg.lr_warmup_start) * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs);
  const int periods = (epoch - cfg.warmup_epochs) / cfg.decay_every;
  return cfg.lr_base * std::pow(cfg.decay_factor, periods);
}

// ---------------------------------------------------------------------------
// Scheme registry

std::vector<std::string> known_schemes() {
  return {"baseline",     "baseline-a-in", "baseline-in",  "baseline-snr", "snr-wo-lsnr",
          "snr-wo-lplus", "snr-wo-lminus", "snr-conv",     "snr-g2",       "snr-stage1",
          "snr-stage2",   "snr-stage3",    "snr-stage4"};
}

SchemeInfo scheme_info(const std::string& name, std::size_t num_stages) {
  SchemeInfo info;
  info.modes.assign(num_stages, StageMode::none);
  auto all = [&](StageMode m) { info.modes.assign(num_stages, m); };
  if (name == "baseline") {
  } else if (name == "baseline-a-in") {
    info.baseline_norm = BaselineNorm::instance_norm;
  } else if (name == "baseline-in") {
    all(StageMode::in_only);
  } else if (name == "baseline-snr") {
    all(StageMode::snr);
  } else if (name == "snr-wo-lsnr") {
    all(StageMode::snr);
    info.use_clarification = false;
    info.use_destruction = false;
  } else if (name == "snr-wo-lplus") {
    all(StageMode::snr);
    info.use_clarification = false;
  } else if (name == "snr-wo-lminus") {
    all(StageMode::snr);
    info.use_destruction = false;
  } else if (name == "snr-conv") {
    all(StageMode::snr_conv);
  } else if (name == "snr-g2") {
    all(StageMode::snr_g2);
  } else if (name.rfind("snr-stage", 0) == 0) {
    const int b = std::stoi(name.substr(9));
    if (b < 1 || static_cast<std::size_t>(b) > num_stages)
      throw ConfigError("scheme " + name + ": stage out of range");
    info.modes[static_cast<std::size_t>(b - 1)] = StageMode::snr;
  } else {
    throw ConfigError("unknown scheme: " + name);
  }
  return info;
}

ModelConfig make_model_config(const TrainConfig& cfg, int num_identities, int input_c, int input_h, int input_w) {
  const SchemeInfo scheme = scheme_info(cfg.scheme, cfg.stage_channels.size());
  ModelConfig mc;
  mc.input_channels = input_c;
  mc.input_h = input_h;
  mc.input_w = input_w;
  int in_ch = input_c;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    mc.stages.push_back({in_ch, cfg.stage_channels[i], cfg.stage_strides[i], scheme.modes[i]});
    in_ch = cfg.stage_channels[i];
  }
  mc.embedding_dim = cfg.embedding_dim;
  mc.num_identities = num_identities;
  mc.lambda = cfg.lambda;
  mc.baseline_norm = scheme.baseline_norm;
  mc.reduction = cfg.reduction;
  mc.seed = cfg.seed;
  mc.validate();
  return mc;
}

// ---------------------------------------------------------------------------
// Config JSON

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.scheme = j.value("scheme", c.scheme);
  c.lr_base = j.value("lr_base", c.lr_base);
  c.lr_warmup_start = j.value("lr_warmup_start", c.lr_warmup_start);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.decay_every = j.value("decay_every", c.decay_every);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_p = j.value("batch_p", c.batch_p);
  c.batch_k = j.value("batch_k", c.batch_k);
  c.seed = j.value("seed", c.seed);
  c.dataset_manifest = j.value("dataset_manifest", c.dataset_manifest);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_target_domain = j.value("eval_target_domain", c.eval_target_domain);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.snr_triplet_policy = j.value("snr_triplet_policy", c.snr_triplet_policy);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.stage_strides = j.value("stage_strides", c.stage_strides);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.reduction = j.value("reduction", c.reduction);
  c.lambda = j.value("lambda", c.lambda);
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"scheme", c.scheme},
              {"lr_base", c.lr_base},
              {"lr_warmup_start", c.lr_warmup_start},
              {"warmup_epochs", c.warmup_epochs},
              {"decay_factor", c.decay_factor},
              {"decay_every", c.decay_every},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"epochs", c.epochs},
              {"batch_p", c.batch_p},
              {"batch_k", c.batch_k},
              {"seed", c.seed},
              {"dataset_manifest", c.dataset_manifest},
              {"out_dir", c.out_dir},
              {"eval_every", c.eval_every},
              {"checkpoint_every", c.checkpoint_every},
              {"eval_target_domain", c.eval_target_domain},
              {"label_smoothing", c.label_smoothing},
              {"snr_triplet_policy", c.snr_triplet_policy},
              {"stage_channels", c.stage_channels},
              {"stage_strides", c.stage_strides},
              {"embedding_dim", c.embedding_dim},
              {"reduction", c.reduction},
              {"lambda", c.lambda}};
}

std::string config_hash_hex(const Json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path.string());
  try {
    Json j;
    f >> j;
    return j;
  } catch (const Json::exception& e) {
    throw ConfigError("bad JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Shared forward helpers

namespace {

Tensor4<float> assemble_batch(const DatasetManifest& manifest, const std::vector<Index>& idx) {
  if (idx.empty()) throw std::invalid_argument("assemble_batch: empty index list");
  Tensor4<float> first = manifest.load_image(idx[0]);
  Tensor4<float> batch(static_cast<Index>(idx.size()), first.c, first.h, first.w);
  const Index per = first.count();
  batch.data.segment(0, per) = first.data;
  for (std::size_t i = 1; i < idx.size(); ++i) {
    Tensor4<float> img = manifest.load_image(idx[i]);
    if (img.c != first.c || img.h != first.h || img.w != first.w)
      throw std::runtime_error("assemble_batch: inconsistent image shapes in dataset");
    batch.data.segment(static_cast<Index>(i) * per, per) = img.data;
  }
  return batch;
}

// Eval-mode embeddings (and optionally per-stage pooled activations) for a
// list of samples, in fixed-size chunks.
MatrixXd embed_samples(Model<float>& model, const DatasetManifest& manifest, const std::vector<Index>& idx,
                       std::vector<MatrixXd>* stage_pools = nullptr) {
  const Index chunk = 32;
  MatrixXd out;
  for (Index start = 0; start < static_cast<Index>(idx.size()); start += chunk) {
    const Index stop = std::min<Index>(start + chunk, static_cast<Index>(idx.size()));
    std::vector<Index> part(idx.begin() + start, idx.begin() + stop);
    Tensor4<float> batch = assemble_batch(manifest, part);
    Graph<float> g;
    ForwardResult<float> fr = model.forward(g, batch, false);
    const Index d = fr.retrieval.shape().dims[1];
    if (out.size() == 0) out.resize(static_cast<Index>(idx.size()), d);
    for (Index r = 0; r < stop - start; ++r)
      for (Index c = 0; c < d; ++c) out(start + r, c) = static_cast<double>(fr.retrieval.value()[r * d + c]);
    if (stage_pools != nullptr) {
      if (stage_pools->empty()) {
        for (const Var<float>& s : fr.stage_outputs)
          stage_pools->emplace_back(static_cast<Index>(idx.size()), s.shape().dims[1]);
      }
      for (std::size_t si = 0; si < fr.stage_outputs.size(); ++si) {
        Var<float> pooled = global_avg_pool(fr.stage_outputs[si]);
        const Index c = pooled.shape().dims[1];
        for (Index r = 0; r < stop - start; ++r)
          for (Index k = 0; k < c; ++k)
            (*stage_pools)[si](start + r, k) = static_cast<double>(pooled.value()[r * c + k]);
      }
    }
  }
  return out;
}

struct RetrievalScores {
  double map = 0;
  std::map<int, double> cmc;
  Index num_queries = 0, num_gallery = 0;
};

RetrievalScores retrieval_scores(Model<float>& model, const DatasetManifest& manifest, int target_domain) {
  const std::vector<Index> q_idx = manifest.query_indices(target_domain);
  const std::vector<Index> g_idx = manifest.gallery_indices(target_domain);
  if (q_idx.empty() || g_idx.empty())
    throw ConfigError("evaluation: domain " + std::to_string(target_domain) + " has no query/gallery samples");
  MatrixXd q = embed_samples(model, manifest, q_idx);
  MatrixXd gal = embed_samples(model, manifest, g_idx);
  std::vector<int> q_ids, g_ids;
  for (Index i : q_idx) q_ids.push_back(manifest.samples[static_cast<std::size_t>(i)].identity);
  for (Index i : g_idx) g_ids.push_back(manifest.samples[static_cast<std::size_t>(i)].identity);
  MatrixXd dist = pairwise_distances(q, gal, &q_idx, &g_idx);
  std::vector<RankingResult> rankings = build_rankings(dist, q_ids, g_ids);
  RetrievalScores sc;
  sc.map = mean_average_precision(rankings);
  for (int k : {1, 5, 10, 20}) sc.cmc[k] = cmc_rank_k(rankings, k);
  sc.num_queries = static_cast<Index>(q_idx.size());
  sc.num_gallery = static_cast<Index>(g_idx.size());
  return sc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training

TrainResult train_run(const TrainConfig& cfg) {
  cfg.validate();
  const SchemeInfo scheme = scheme_info(cfg.scheme, cfg.stage_channels.size());
  DatasetManifest manifest = DatasetManifest::load(cfg.dataset_manifest);
  manifest.validate();
  const std::vector<Index> train_idx = manifest.split_indices("train");
  if (train_idx.empty()) throw ConfigError("train_run: dataset has no train split");
  const std::vector<int> identities = manifest.sorted_train_identities();
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < identities.size(); ++i) label_of[identities[i]] = static_cast<int>(i);

  const Tensor4<float> probe = manifest.load_image(train_idx[0]);
  const ModelConfig mc = make_model_config(cfg, static_cast<int>(identities.size()), static_cast<int>(probe.c),
                                           static_cast<int>(probe.h), static_cast<int>(probe.w));
  Model<float> model(mc);
  AdamW<float> opt(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  PkSampler sampler(manifest, cfg.batch_p, cfg.batch_k, mix_seed(cfg.seed, 0x5a3b17ull));
  std::mt19937_64 triplet_rng(mix_seed(cfg.seed, 0x7317c7ull));

  const std::filesystem::path out(cfg.out_dir);
  std::filesystem::create_directories(out);
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("train_run: cannot write log in " + out.string());

  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(train_idx.size()) / (cfg.batch_p * cfg.batch_k));
  const bool wants_causality = scheme.use_clarification || scheme.use_destruction;

  Json record;
  record["config"] = to_json(cfg);
  record["model"] = to_json(mc);
  record["steps_per_epoch"] = steps_per_epoch;
  Json epochs_log = Json::array();
  Json evals_log = Json::array();
  const auto t_run0 = std::chrono::steady_clock::now();

  long global_step = 0;
  double last_epoch_mean_total = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const auto t_ep0 = std::chrono::steady_clock::now();
    double sum_total = 0, sum_ce = 0, sum_trip = 0;
    std::vector<double> sum_plus(mc.stages.size(), 0.0), sum_minus(mc.stages.size(), 0.0);

    for (int step = 0; step < steps_per_epoch; ++step, ++global_step) {
      const std::vector<Index> batch_idx = sampler.next();
      std::vector<int> labels;
      labels.reserve(batch_idx.size());
      for (Index i : batch_idx) labels.push_back(label_of.at(manifest.samples[static_cast<std::size_t>(i)].identity));
      Tensor4<float> batch = assemble_batch(manifest, batch_idx);

      Graph<float> g;
      ForwardResult<float> fr = model.forward(g, batch, true);
      Var<float> ce = id_classification_loss(fr.logits, labels, static_cast<float>(cfg.label_smoothing));
      Var<float> trip = batch_hard_triplet_loss(fr.embedding, labels);

      std::vector<std::optional<StageCausalityLoss<float>>> stage_losses(mc.stages.size());
      if (wants_causality) {
        std::vector<TripletIndex> triplets =
            cfg.snr_triplet_policy == "batch_hard"
                ? make_batch_hard_triplets(labels, fr.embedding.value(), fr.embedding.shape().dims[1])
                : make_random_triplets(labels, triplet_rng);
        for (std::size_t b = 0; b < mc.stages.size(); ++b)
          if (fr.traces[b].has_value())
            stage_losses[b] =
                stage_dual_causality(*fr.traces[b], triplets, scheme.use_clarification, scheme.use_destruction);
      }
      TotalLoss<float> tot = total_loss(ce, trip, stage_losses, cfg.lambda);

      if (!std::isfinite(tot.breakdown.total)) {
        write_snrt(out / "diagnostic_batch.snrt", batch);
        Json diag{{"epoch", epoch}, {"step", step}, {"labels", labels}, {"total", tot.breakdown.total}};
        write_json(out / "diagnostic.json", diag);
        throw NumericalAbort("train_run: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step) + "; batch dumped to " + (out / "diagnostic_batch.snrt").string());
      }

      model.zero_grad();
      g.backward(tot.value);
      opt.step(lr);

      Json line{{"epoch", epoch},           {"step", step},
                {"lr", lr},                 {"reid_ce", tot.breakdown.reid_ce},
                {"reid_triplet", tot.breakdown.reid_triplet}, {"snr_plus", tot.breakdown.snr_plus},
                {"snr_minus", tot.breakdown.snr_minus},       {"total", tot.breakdown.total}};
      log << line.dump() << "\n";

      sum_total += tot.breakdown.total;
      sum_ce += tot.breakdown.reid_ce;
      sum_trip += tot.breakdown.reid_triplet;
      for (std::size_t b = 0; b < mc.stages.size(); ++b) {
        sum_plus[b] += tot.breakdown.snr_plus[b];
        sum_minus[b] += tot.breakdown.snr_minus[b];
      }
    }

    const double inv_steps = 1.0 / steps_per_epoch;
    last_epoch_mean_total = sum_total * inv_steps;
    Json ep{{"epoch", epoch},
            {"lr", lr},
            {"mean_total", sum_total * inv_steps},
            {"mean_reid_ce", sum_ce * inv_steps},
            {"mean_reid_triplet", sum_trip * inv_steps},
            {"wall_ms", std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t_ep0)
                            .count()}};
    Json mp = Json::array(), mm = Json::array();
    for (std::size_t b = 0; b < mc.stages.size(); ++b) {
      mp.push_back(sum_plus[b] * inv_steps);
      mm.push_back(sum_minus[b] * inv_steps);
    }
    ep["mean_snr_plus"] = mp;
    ep["mean_snr_minus"] = mm;
    epochs_log.push_back(ep);

    if (cfg.eval_every > 0 && cfg.eval_target_domain >= 0 && (epoch + 1) % cfg.eval_every == 0) {
      RetrievalScores sc = retrieval_scores(model, manifest, cfg.eval_target_domain);
      evals_log.push_back(Json{{"epoch", epoch}, {"map", sc.map}, {"rank1", sc.cmc.at(1)}});
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
      save_checkpoint(out / ("checkpoint_ep" + std::to_string(epoch + 1)), model,
                      Json{{"train", to_json(cfg)},
                           {"epoch", epoch + 1},
                           {"step", global_step},
                           {"metrics", Json{{"mean_total", last_epoch_mean_total}}}});
    }
  }

  Json metrics{{"mean_total", last_epoch_mean_total}};
  if (cfg.eval_target_domain >= 0) {
    RetrievalScores sc = retrieval_scores(model, manifest, cfg.eval_target_domain);
    metrics["map"] = sc.map;
    metrics["rank1"] = sc.cmc.at(1);
    evals_log.push_back(Json{{"epoch", cfg.epochs - 1}, {"map", sc.map}, {"rank1", sc.cmc.at(1)}});
  }
  const std::filesystem::path ckpt = out / "checkpoint";
  save_checkpoint(ckpt, model,
                  Json{{"train", to_json(cfg)}, {"epoch", cfg.epochs}, {"step", global_step}, {"metrics", metrics}});

  record["epochs"] = epochs_log;
  record["evals"] = evals_log;
  record["total_wall_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t_run0).count();
  write_json(out / "run_record.json", record);
  return TrainResult{ckpt, record};
}

// ---------------------------------------------------------------------------
// Evaluation entry points

Json EvalReport::to_json() const {
  Json cmc_json;
  for (const auto& [k, v] : cmc) cmc_json[std::to_string(k)] = v;
  return Json{{"mAP", map},
              {"cmc", cmc_json},
              {"target_domain", target_domain},
              {"num_queries", num_queries},
              {"num_gallery", num_gallery},
              {"config_hash", config_hash}};
}

EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint_dir,
                               const std::filesystem::path& manifest_file, int target_domain,
                               const std::filesystem::path* dump_traces_dir) {
  Checkpoint ck = load_checkpoint(checkpoint_dir);
  DatasetManifest manifest = DatasetManifest::load(manifest_file);
  RetrievalScores sc = retrieval_scores(*ck.model, manifest, target_domain);
  EvalReport rep;
  rep.map = sc.map;
  rep.cmc = sc.cmc;
  rep.target_domain = target_domain;
  rep.num_queries = sc.num_queries;
  rep.num_gallery = sc.num_gallery;
  rep.config_hash = config_hash_hex(Json{{"model", ck.manifest.at("model")}, {"target_domain", target_domain}});

  if (dump_traces_dir != nullptr) {
    std::filesystem::create_directories(*dump_traces_dir);
    std::vector<Index> q_idx = manifest.query_indices(target_domain);
    q_idx.resize(std::min<std::size_t>(q_idx.size(), 8));
    Tensor4<float> batch = assemble_batch(manifest, q_idx);
    Graph<float> g;
    ForwardResult<float> fr = ck.model->forward(g, batch, true);
    for (std::size_t si = 0; si < fr.traces.size(); ++si) {
      if (!fr.traces[si].has_value()) continue;
      const SnrTrace<float>& t = *fr.traces[si];
      auto dump = [&](const char* name, const Var<float>& v) {
        if (!v.valid()) return;
        write_snrt(*dump_traces_dir / ("stage" + std::to_string(si + 1) + "_" + name + ".snrt"), v.shape(), v.value());
      };
      dump("input", t.input);
      dump("normalized", t.normalized);
      dump("residual", t.residual);
      dump("gate", t.gate);
      dump("relevant_residual", t.relevant_residual);
      dump("irrelevant_residual", t.irrelevant_residual);
      dump("restituted", t.restituted);
      dump("contaminated", t.contaminated);
      dump("pooled_normalized", t.pooled_normalized);
      dump("pooled_restituted", t.pooled_restituted);
      dump("pooled_contaminated", t.pooled_contaminated);
    }
  }
  return rep;
}

DivergenceReport divergence_between_domains(const std::filesystem::path& checkpoint_dir,
                                            const std::filesystem::path& manifest_file, int domain_a, int domain_b,
                                            int max_samples, std::uint64_t seed) {
  Checkpoint ck = load_checkpoint(checkpoint_dir);
  DatasetManifest manifest = DatasetManifest::load(manifest_file);
  auto pick = [&](int domain) {
    std::vector<Index> idx = manifest.domain_indices(domain);
    if (static_cast<int>(idx.size()) < 2)
      throw ConfigError("divergence: domain " + std::to_string(domain) + " has fewer than 2 samples");
    if (static_cast<int>(idx.size()) > max_samples) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(domain) + 0xd1ull));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(max_samples));
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };
  std::vector<MatrixXd> stages_a, stages_b;
  embed_samples(*ck.model, manifest, pick(domain_a), &stages_a);
  embed_samples(*ck.model, manifest, pick(domain_b), &stages_b);
  return symmetric_feature_divergence(stages_a, stages_b, domain_a, domain_b);
}

Json divergence_to_json(const DivergenceReport& rep, const std::string& config_hash) {
  Json stages = Json::array();
  for (std::size_t s = 0; s < rep.stage_mean.size(); ++s)
    stages.push_back(Json{{"stage", s + 1}, {"mean", rep.stage_mean[s]}, {"per_channel", rep.stage_channels[s]}});
  return Json{{"domain_a", rep.domain_a},
              {"domain_b", rep.domain_b},
              {"divergence_per_stage", stages},
              {"config_hash", config_hash}};
}

// ---------------------------------------------------------------------------
// Ablation sweep

Json run_ablation(const Json& matrix, const std::filesystem::path& out_dir) {
  std::vector<std::string> schemes;
  for (const Json& s : matrix.at("schemes")) schemes.push_back(s.get<std::string>());
  std::vector<std::uint64_t> seeds;
  for (const Json& s : matrix.at("seeds")) seeds.push_back(s.get<std::uint64_t>());
  if (schemes.empty() || seeds.empty()) throw ConfigError("ablation: schemes and seeds must be non-empty");
  const std::string dataset = matrix.at("dataset").get<std::string>();
  const int target = matrix.at("target_domain").get<int>();
  const TrainConfig base = train_config_from_json(matrix.value("train", Json::object()));
  const int jobs = std::max(1, matrix.value("jobs", 1));

  struct Cell {
    std::string scheme;
    std::uint64_t seed = 0;
    std::filesystem::path dir;
    bool ok = false;
    double map = 0, rank1 = 0;
    std::string error;
  };
  std::vector<Cell> cells;
  for (const std::string& scheme : schemes) {
    scheme_info(scheme, base.stage_channels.size());  // validate early
    for (std::uint64_t seed : seeds)
      cells.push_back({scheme, seed, out_dir / "cells" / scheme / ("seed_" + std::to_string(seed))});
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      Cell& cell = cells[i];
      try {
        TrainConfig cfg = base;
        cfg.scheme = cell.scheme;
        cfg.seed = cell.seed;
        cfg.dataset_manifest = dataset;
        cfg.out_dir = cell.dir.string();
        cfg.eval_target_domain = target;
        TrainResult tr = train_run(cfg);
        EvalReport rep = evaluate_checkpoint(tr.checkpoint_dir, dataset, target);
        cell.map = rep.map;
        cell.rank1 = rep.cmc.at(1);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  Json rows = Json::array();
  std::string csv = "scheme,target_domain,seeds,map_mean,map_std,rank1_mean,rank1_std\n";
  for (const std::string& scheme : schemes) {
    std::vector<double> maps, rank1s;
    Json per_cell = Json::array();
    for (const Cell& c : cells) {
      if (c.scheme != scheme) continue;
      Json jc{{"seed", c.seed}, {"dir", c.dir.string()}, {"ok", c.ok}};
      if (c.ok) {
        jc["map"] = c.map;
        jc["rank1"] = c.rank1;
        maps.push_back(c.map);
        rank1s.push_back(c.rank1);
      } else {
        jc["error"] = c.error;
      }
      per_cell.push_back(jc);
    }
    auto mean_of = [](const std::vector<double>& v) {
      return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    auto std_of = [&](const std::vector<double>& v) {
      if (v.size() < 2) return 0.0;
      const double m = mean_of(v);
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size()));
    };
    Json row{{"scheme", scheme},          {"target_domain", target},     {"map_mean", mean_of(maps)},
             {"map_std", std_of(maps)},   {"rank1_mean", mean_of(rank1s)}, {"rank1_std", std_of(rank1s)},
             {"cells", per_cell}};
    rows.push_back(row);
    csv += scheme + "," + std::to_string(target) + "," + std::to_string(maps.size()) + "," +
           std::to_string(mean_of(maps)) + "," + std::to_string(std_of(maps)) + "," + std::to_string(mean_of(rank1s)) +
           "," + std::to_string(std_of(rank1s)) + "\n";
  }
  Json table{{"target_domain", target}, {"dataset", dataset}, {"rows", rows}};
  std::filesystem::create_directories(out_dir);
  write_json(out_dir / "table.json", table);
  {
    std::ofstream f(out_dir / "table.csv", std::ios::trunc);
    f << csv;
  }
  return table;
}

}  // namespace snr
