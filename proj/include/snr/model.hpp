#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "snr/losses.hpp"

namespace snr {

// Per-stage normalization mode appended after the stage's conv pair.
enum class StageMode { none, in_only, snr, snr_conv, snr_g2 };

inline StageMode parse_stage_mode(const std::string& s) {
  if (s == "none") return StageMode::none;
  if (s == "in_only") return StageMode::in_only;
  if (s == "snr") return StageMode::snr;
  if (s == "snr_conv") return StageMode::snr_conv;
  if (s == "snr_g2") return StageMode::snr_g2;
  throw std::invalid_argument("unknown stage mode: " + s);
}

inline const char* stage_mode_name(StageMode m) {
  switch (m) {
    case StageMode::none: return "none";
    case StageMode::in_only: return "in_only";
    case StageMode::snr: return "snr";
    case StageMode::snr_conv: return "snr_conv";
    case StageMode::snr_g2: return "snr_g2";
  }
  return "none";
}

enum class BaselineNorm { batch_norm, instance_norm };

inline BaselineNorm parse_baseline_norm(const std::string& s) {
  if (s == "batch_norm") return BaselineNorm::batch_norm;
  if (s == "instance_norm") return BaselineNorm::instance_norm;
  throw std::invalid_argument("unknown baseline norm: " + s);
}

struct StageSpec {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  StageMode mode = StageMode::none;
};

struct ModelConfig {
  int input_channels = 3;
  int input_h = 64;
  int input_w = 32;
  std::vector<StageSpec> stages;
  int embedding_dim = 128;
  int num_identities = 0;
  std::vector<double> lambda{0.1, 0.1, 0.5, 0.5};
  BaselineNorm baseline_norm = BaselineNorm::batch_norm;
  int reduction = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (stages.empty()) throw std::invalid_argument("ModelConfig: no stages");
    if (stages.front().in_channels != input_channels)
      throw std::invalid_argument("ModelConfig: first stage does not accept the input channels");
    for (std::size_t i = 0; i + 1 < stages.size(); ++i)
      if (stages[i].out_channels != stages[i + 1].in_channels)
        throw std::invalid_argument("ModelConfig: inconsistent channel chain at stage " + std::to_string(i + 1));
    for (const StageSpec& s : stages)
      if (s.in_channels < 1 || s.out_channels < 1 || s.stride < 1)
        throw std::invalid_argument("ModelConfig: stage extents must be positive");
    if (lambda.size() != stages.size())
      throw std::invalid_argument("ModelConfig: lambda count must equal stage count");
    if (embedding_dim < 1 || num_identities < 1)
      throw std::invalid_argument("ModelConfig: embedding_dim and num_identities must be positive");
    if (reduction < 1) throw std::invalid_argument("ModelConfig: reduction must be positive");
  }

  // The stock four-stage geometry: 3x64x32 input, channels 16/32/64/128,
  // stride 2 everywhere, 128-d embedding.
  static ModelConfig desk_default(int num_identities, std::uint64_t seed, StageMode mode = StageMode::none) {
    ModelConfig cfg;
    cfg.num_identities = num_identities;
    cfg.seed = seed;
    const int ch[5] = {3, 16, 32, 64, 128};
    for (int i = 0; i < 4; ++i) cfg.stages.push_back({ch[i], ch[i + 1], 2, mode});
    return cfg;
  }
};

template <typename S>
struct ForwardResult {
  Var<S> embedding;   // pre-neck embedding, used by the triplet loss
  Var<S> retrieval;   // post-neck embedding, used by classifier and retrieval
  Var<S> logits;
  std::vector<std::optional<SnrTrace<S>>> traces;  // per stage
  std::vector<Var<S>> stage_outputs;               // feature the next stage consumes
};

// Four-stage convolutional backbone with pluggable per-stage normalization,
// plus an embedding head: gap -> fc -> batch-norm neck -> classifier.
template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x6d6f64656cull));
    int stage_idx = 0;
    for (const StageSpec& spec : cfg.stages) {
      const std::string prefix = "stage" + std::to_string(stage_idx + 1);
      Stage st;
      st.spec = spec;
      st.conv1 = Parameter<S>(prefix + ".conv1", Shape::tensor4(spec.out_channels, spec.in_channels, 3, 3));
      fill_he_normal(st.conv1, rng, static_cast<Index>(spec.in_channels) * 9);
      st.norm1 = make_norm(prefix + ".norm1", spec.out_channels);
      st.conv2 = Parameter<S>(prefix + ".conv2", Shape::tensor4(spec.out_channels, spec.out_channels, 3, 3));
      fill_he_normal(st.conv2, rng, static_cast<Index>(spec.out_channels) * 9);
      st.norm2 = make_norm(prefix + ".norm2", spec.out_channels);
      switch (spec.mode) {
        case StageMode::none:
          break;
        case StageMode::in_only:
          st.in_gamma = Parameter<S>(prefix + ".in.gamma", Shape::vector(spec.out_channels));
          st.in_beta = Parameter<S>(prefix + ".in.beta", Shape::vector(spec.out_channels));
          fill_constant(st.in_gamma, S(1));
          break;
        case StageMode::snr:
          st.snr = SnrParams<S>::make(prefix + ".snr", spec.out_channels, cfg.reduction, SnrVariant::gated, rng);
          break;
        case StageMode::snr_conv:
          st.snr = SnrParams<S>::make(prefix + ".snr", spec.out_channels, cfg.reduction, SnrVariant::conv, rng);
          break;
        case StageMode::snr_g2:
          st.snr = SnrParams<S>::make(prefix + ".snr", spec.out_channels, cfg.reduction, SnrVariant::dual_gate, rng);
          break;
      }
      stages_.push_back(std::move(st));
      ++stage_idx;
    }
    const Index c_last = cfg.stages.back().out_channels;
    // Transition block between the last stage's module and the pooled head.
    // Pooling a normalized map directly would collapse to its affine offset;
    // a convolution in between keeps the pooled feature sample-dependent.
    head_conv_ = Parameter<S>("head.conv", Shape::tensor4(c_last, c_last, 3, 3));
    fill_he_normal(head_conv_, rng, c_last * 9);
    head_norm_ = make_norm("head.norm", static_cast<int>(c_last));
    fc_w_ = Parameter<S>("head.fc.weight", Shape::matrix(cfg.embedding_dim, c_last));
    fc_b_ = Parameter<S>("head.fc.bias", Shape::vector(cfg.embedding_dim));
    fill_xavier_normal(fc_w_, rng, c_last, cfg.embedding_dim);
    neck_gamma_ = Parameter<S>("head.neck.gamma", Shape::vector(cfg.embedding_dim));
    neck_beta_ = Parameter<S>("head.neck.beta", Shape::vector(cfg.embedding_dim));
    fill_constant(neck_gamma_, S(1));
    neck_mean_ = Parameter<S>("head.neck.running_mean", Shape::vector(cfg.embedding_dim), false);
    neck_var_ = Parameter<S>("head.neck.running_var", Shape::vector(cfg.embedding_dim), false);
    fill_constant(neck_var_, S(1));
    cls_w_ = Parameter<S>("head.classifier.weight", Shape::matrix(cfg.num_identities, cfg.embedding_dim));
    cls_b_ = Parameter<S>("head.classifier.bias", Shape::vector(cfg.num_identities));
    fill_normal(cls_w_, rng, 0.01);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  ForwardResult<S> forward(Graph<S>& g, const Tensor4<S>& batch, bool training) {
    if (batch.c != cfg_.input_channels || batch.h != cfg_.input_h || batch.w != cfg_.input_w)
      throw std::invalid_argument("Model::forward: batch shape " + batch.shape().str() +
                                  " does not match the configured input geometry");
    if (batch.n < 1) throw std::invalid_argument("Model::forward: empty batch");

    ForwardResult<S> out;
    Var<S> x = g.input(batch);
    for (Stage& st : stages_) {
      x = relu(apply_norm(g, st.norm1, conv2d(x, g.leaf(st.conv1), st.spec.stride, 1), training));
      x = relu(apply_norm(g, st.norm2, conv2d(x, g.leaf(st.conv2), 1, 1), training));
      switch (st.spec.mode) {
        case StageMode::none:
          out.traces.emplace_back(std::nullopt);
          break;
        case StageMode::in_only:
          x = instance_norm(x, g.leaf(st.in_gamma), g.leaf(st.in_beta), S(1e-5));
          out.traces.emplace_back(std::nullopt);
          break;
        default: {
          SnrTrace<S> tr = snr_forward(x, *st.snr, training);
          x = tr.restituted;
          out.traces.emplace_back(std::move(tr));
          break;
        }
      }
      out.stage_outputs.push_back(x);
    }
    x = relu(apply_norm(g, head_norm_, conv2d(x, g.leaf(head_conv_), 1, 1), training));
    Var<S> pooled = global_avg_pool(x);
    out.embedding = fully_connected(pooled, g.leaf(fc_w_), g.leaf(fc_b_));
    out.retrieval = batch_norm1d(out.embedding, g.leaf(neck_gamma_), g.leaf(neck_beta_),
                                 RunningStats<S>{&neck_mean_, &neck_var_}, training);
    out.logits = fully_connected(out.retrieval, g.leaf(cls_w_), g.leaf(cls_b_));
    return out;
  }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out;
    for (Parameter<S>* p : all_state())
      if (p->trainable) out.push_back(p);
    return out;
  }

  // Trainable parameters plus persistent running statistics, in a stable
  // order; this is the checkpoint content.
  std::vector<Parameter<S>*> all_state() {
    std::vector<Parameter<S>*> out;
    for (Stage& st : stages_) {
      out.push_back(&st.conv1);
      push_norm(out, st.norm1);
      out.push_back(&st.conv2);
      push_norm(out, st.norm2);
      if (st.spec.mode == StageMode::in_only) {
        out.push_back(&st.in_gamma);
        out.push_back(&st.in_beta);
      } else if (st.snr.has_value()) {
        for (Parameter<S>* p : st.snr->parameters()) out.push_back(p);
      }
    }
    out.push_back(&head_conv_);
    push_norm(out, head_norm_);
    out.push_back(&fc_w_);
    out.push_back(&fc_b_);
    out.push_back(&neck_gamma_);
    out.push_back(&neck_beta_);
    out.push_back(&neck_mean_);
    out.push_back(&neck_var_);
    out.push_back(&cls_w_);
    out.push_back(&cls_b_);
    return out;
  }

  Index parameter_count() {
    Index n = 0;
    for (Parameter<S>* p : parameters()) n += p->count();
    return n;
  }

  void zero_grad() {
    for (Parameter<S>* p : all_state()) p->zero_grad();
  }

  // Test-only hook: forces every gated SNR module to emit an exactly-zero
  // gate, reducing restitution to a no-op.
  void set_force_gate_zero(bool on) {
    for (Stage& st : stages_)
      if (st.snr.has_value()) st.snr->force_gate_zero = on;
  }

 private:
  struct NormLayer {
    bool is_batch = true;
    Parameter<S> gamma, beta;
    Parameter<S> run_mean, run_var;  // batch-norm only
  };

  struct Stage {
    StageSpec spec;
    Parameter<S> conv1, conv2;
    NormLayer norm1, norm2;
    Parameter<S> in_gamma, in_beta;  // in_only mode
    std::optional<SnrParams<S>> snr;
  };

  NormLayer make_norm(const std::string& prefix, int channels) {
    NormLayer n;
    n.is_batch = (cfg_.baseline_norm == BaselineNorm::batch_norm);
    n.gamma = Parameter<S>(prefix + ".gamma", Shape::vector(channels));
    n.beta = Parameter<S>(prefix + ".beta", Shape::vector(channels));
    fill_constant(n.gamma, S(1));
    if (n.is_batch) {
      n.run_mean = Parameter<S>(prefix + ".running_mean", Shape::vector(channels), false);
      n.run_var = Parameter<S>(prefix + ".running_var", Shape::vector(channels), false);
      fill_constant(n.run_var, S(1));
    }
    return n;
  }

  Var<S> apply_norm(Graph<S>& g, NormLayer& n, Var<S> x, bool training) {
    if (n.is_batch)
      return batch_norm(x, g.leaf(n.gamma), g.leaf(n.beta), RunningStats<S>{&n.run_mean, &n.run_var}, training);
    return instance_norm(x, g.leaf(n.gamma), g.leaf(n.beta), S(1e-5));
  }

  void push_norm(std::vector<Parameter<S>*>& out, NormLayer& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
    if (n.is_batch) {
      out.push_back(&n.run_mean);
      out.push_back(&n.run_var);
    }
  }

  ModelConfig cfg_;
  std::vector<Stage> stages_;
  Parameter<S> head_conv_;
  NormLayer head_norm_;
  Parameter<S> fc_w_, fc_b_;
  Parameter<S> neck_gamma_, neck_beta_, neck_mean_, neck_var_;
  Parameter<S> cls_w_, cls_b_;
};

// Copies values of parameters whose names match; returns how many were copied.
template <typename S>
std::size_t copy_matching_parameters(Model<S>& dst, Model<S>& src) {
  std::size_t copied = 0;
  auto dst_params = dst.all_state();
  for (Parameter<S>* sp : src.all_state()) {
    for (Parameter<S>* dp : dst_params) {
      if (dp->name == sp->name && dp->shape == sp->shape) {
        dp->value = sp->value;
        ++copied;
        break;
      }
    }
  }
  return copied;
}

}  // namespace snr
