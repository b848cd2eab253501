#pragma once

#include <optional>
#include <string>
#include <vector>

#include "snr/init.hpp"
#include "snr/ops.hpp"

namespace snr {

// Disentanglement design of one style-normalization-and-restitution module:
//   gated     — one channel gate a, complement 1-a (the main design)
//   conv      — two unshared 1x1 convolutions + ReLU on the residual
//   dual_gate — two unshared channel gates
enum class SnrVariant { gated, conv, dual_gate };

inline SnrVariant parse_snr_variant(const std::string& s) {
  if (s == "gated") return SnrVariant::gated;
  if (s == "conv") return SnrVariant::conv;
  if (s == "dual_gate") return SnrVariant::dual_gate;
  throw std::invalid_argument("unknown snr variant: " + s);
}

// Learnable state of one SNR module. The gate is a squeeze-excite stack
// without biases: sigmoid(expand * relu(reduce * pool(R))), hidden width
// max(1, c / reduction).
template <typename S>
struct SnrParams {
  int channels = 0;
  int reduction = 16;
  SnrVariant variant = SnrVariant::gated;

  Parameter<S> gamma, beta;                  // instance-norm affine
  Parameter<S> gate_reduce, gate_expand;     // main gate
  Parameter<S> gate_reduce_b, gate_expand_b; // second gate (dual_gate only)
  Parameter<S> conv_keep, conv_drop;         // 1x1 kernels (conv only)

  // Test-only override: forces the gate output to exactly 0 so the module
  // reduces to a bare instance-norm layer.
  bool force_gate_zero = false;

  S norm_eps = S(1e-5);

  int hidden_width() const { return std::max(1, channels / reduction); }

  static SnrParams make(const std::string& prefix, int channels, int reduction, SnrVariant variant,
                        std::mt19937_64& rng) {
    if (channels < 1) throw std::invalid_argument("SnrParams: channels must be positive");
    if (reduction < 1) throw std::invalid_argument("SnrParams: reduction must be positive");
    SnrParams p;
    p.channels = channels;
    p.reduction = reduction;
    p.variant = variant;
    p.gamma = Parameter<S>(prefix + ".gamma", Shape::vector(channels));
    p.beta = Parameter<S>(prefix + ".beta", Shape::vector(channels));
    fill_constant(p.gamma, S(1));
    // The spatial mean of the normalized map is exactly beta, so the pooled
    // features the dual causality loss compares have norm |beta|*sqrt(c).
    // Starting beta at zero would put the cosine distance at its singular
    // point; a small constant offset keeps it well conditioned.
    fill_constant(p.beta, S(0.1));
    const Index hidden = p.hidden_width();
    switch (variant) {
      case SnrVariant::gated:
        p.gate_reduce = Parameter<S>(prefix + ".gate_reduce", Shape::matrix(hidden, channels));
        p.gate_expand = Parameter<S>(prefix + ".gate_expand", Shape::matrix(channels, hidden));
        fill_xavier_normal(p.gate_reduce, rng, channels, hidden);
        fill_xavier_normal(p.gate_expand, rng, hidden, channels);
        break;
      case SnrVariant::dual_gate:
        p.gate_reduce = Parameter<S>(prefix + ".gate_reduce", Shape::matrix(hidden, channels));
        p.gate_expand = Parameter<S>(prefix + ".gate_expand", Shape::matrix(channels, hidden));
        p.gate_reduce_b = Parameter<S>(prefix + ".gate_reduce_b", Shape::matrix(hidden, channels));
        p.gate_expand_b = Parameter<S>(prefix + ".gate_expand_b", Shape::matrix(channels, hidden));
        fill_xavier_normal(p.gate_reduce, rng, channels, hidden);
        fill_xavier_normal(p.gate_expand, rng, hidden, channels);
        fill_xavier_normal(p.gate_reduce_b, rng, channels, hidden);
        fill_xavier_normal(p.gate_expand_b, rng, hidden, channels);
        break;
      case SnrVariant::conv:
        p.conv_keep = Parameter<S>(prefix + ".conv_keep", Shape::tensor4(channels, channels, 1, 1));
        p.conv_drop = Parameter<S>(prefix + ".conv_drop", Shape::tensor4(channels, channels, 1, 1));
        fill_he_normal(p.conv_keep, rng, channels);
        fill_he_normal(p.conv_drop, rng, channels);
        break;
    }
    return p;
  }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out = {&gamma, &beta};
    switch (variant) {
      case SnrVariant::gated:
        out.push_back(&gate_reduce);
        out.push_back(&gate_expand);
        break;
      case SnrVariant::dual_gate:
        out.push_back(&gate_reduce);
        out.push_back(&gate_expand);
        out.push_back(&gate_reduce_b);
        out.push_back(&gate_expand_b);
        break;
      case SnrVariant::conv:
        out.push_back(&conv_keep);
        out.push_back(&conv_drop);
        break;
    }
    return out;
  }
};

// Every intermediate of one SNR forward pass. The contaminated branch only
// feeds the loss and is skipped in inference mode.
template <typename S>
struct SnrTrace {
  Var<S> input;                // stage feature entering the module
  Var<S> normalized;           // instance-normalized feature
  Var<S> residual;             // input - normalized
  Var<S> gate;                 // (n x c) channel attention; invalid for conv variant
  Var<S> relevant_residual;    // residual portion restored to the output
  Var<S> irrelevant_residual;  // complementary portion (training only)
  Var<S> restituted;           // normalized + relevant_residual = module output
  Var<S> contaminated;         // normalized + irrelevant_residual (training only)
  Var<S> pooled_normalized;    // (n x c) spatial means, training only
  Var<S> pooled_restituted;
  Var<S> pooled_contaminated;
  bool has_contaminated = false;
};

// a = sigmoid(W2 relu(W1 pool(R))), per sample.
template <typename S>
Var<S> channel_gate(Var<S> residual, Parameter<S>& reduce_w, Parameter<S>& expand_w) {
  Graph<S>& g = *residual.graph();
  if (residual.shape().rank != 4) throw std::invalid_argument("channel_gate: expects a feature map");
  if (reduce_w.shape.dims[1] != residual.shape().dims[1])
    throw std::invalid_argument("channel_gate: weight/channel mismatch");
  Var<S> pooled = global_avg_pool(residual);
  Var<S> hidden = relu(fully_connected(pooled, g.leaf(reduce_w)));
  return sigmoid(fully_connected(hidden, g.leaf(expand_w)));
}

template <typename S>
Var<S> channel_gate(Var<S> residual, SnrParams<S>& params) {
  return channel_gate(residual, params.gate_reduce, params.gate_expand);
}

// Splits the residual by a per-sample channel gate; the two parts sum back
// to the residual exactly.
template <typename S>
std::pair<Var<S>, Var<S>> disentangle(Var<S> residual, Var<S> gate) {
  Var<S> kept = channel_scale(residual, gate);
  Var<S> dropped = channel_scale(residual, affine(gate, S(-1), S(1)));
  return {kept, dropped};
}

template <typename S>
SnrTrace<S> snr_forward(Var<S> input, SnrParams<S>& params, bool training) {
  Graph<S>& g = *input.graph();
  if (input.shape().rank != 4) throw std::invalid_argument("snr_forward: expects a feature map");
  if (input.shape().dims[1] != params.channels)
    throw std::invalid_argument("snr_forward: channel mismatch with module parameters");

  SnrTrace<S> t;
  t.input = input;
  t.normalized = instance_norm(input, g.leaf(params.gamma), g.leaf(params.beta), params.norm_eps);
  t.residual = sub(input, t.normalized);

  const Index n = input.shape().dims[0], c = input.shape().dims[1];
  switch (params.variant) {
    case SnrVariant::gated: {
      if (params.force_gate_zero) {
        t.gate = g.input(Shape::matrix(n, c), ArrayX<S>::Zero(n * c));
      } else {
        t.gate = channel_gate(t.residual, params);
      }
      auto [kept, dropped] = disentangle(t.residual, t.gate);
      t.relevant_residual = kept;
      if (training) t.irrelevant_residual = dropped;
      break;
    }
    case SnrVariant::dual_gate: {
      t.gate = channel_gate(t.residual, params.gate_reduce, params.gate_expand);
      t.relevant_residual = channel_scale(t.residual, t.gate);
      if (training) {
        Var<S> gate_b = channel_gate(t.residual, params.gate_reduce_b, params.gate_expand_b);
        t.irrelevant_residual = channel_scale(t.residual, gate_b);
      }
      break;
    }
    case SnrVariant::conv: {
      t.relevant_residual = relu(conv2d(t.residual, g.leaf(params.conv_keep), 1, 0));
      if (training) t.irrelevant_residual = relu(conv2d(t.residual, g.leaf(params.conv_drop), 1, 0));
      break;
    }
  }

  t.restituted = add(t.normalized, t.relevant_residual);
  if (training) {
    t.contaminated = add(t.normalized, t.irrelevant_residual);
    t.has_contaminated = true;
    t.pooled_normalized = global_avg_pool(t.normalized);
    t.pooled_restituted = global_avg_pool(t.restituted);
    t.pooled_contaminated = global_avg_pool(t.contaminated);
  }
  return t;
}

// Spec-facing dispatch by variant tag; params.variant must agree.
template <typename S>
SnrTrace<S> snr_variant_forward(Var<S> input, SnrVariant variant, SnrParams<S>& params, bool training) {
  if (variant != params.variant) throw std::invalid_argument("snr_variant_forward: variant/params mismatch");
  return snr_forward(input, params, training);
}

}  // namespace snr
