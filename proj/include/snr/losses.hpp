#pragma once

#include <optional>
#include <random>
#include <vector>

#include "snr/snr_block.hpp"

namespace snr {

// Norm guard used by every cosine distance inside a loss, so an unlucky
// zero-norm pooled feature at early training cannot abort a run.
template <typename S>
constexpr S kLossNormEps = S(1e-12);

struct TripletIndex {
  Index anchor = 0;
  Index positive = 0;
  Index negative = 0;
};

inline void validate_triplets(const std::vector<int>& labels, const std::vector<TripletIndex>& triplets) {
  const Index n = static_cast<Index>(labels.size());
  for (const TripletIndex& t : triplets) {
    if (t.anchor < 0 || t.anchor >= n || t.positive < 0 || t.positive >= n || t.negative < 0 || t.negative >= n)
      throw std::invalid_argument("triplet index out of range");
    if (t.anchor == t.positive) throw std::invalid_argument("triplet: anchor == positive");
    if (labels[static_cast<std::size_t>(t.anchor)] != labels[static_cast<std::size_t>(t.positive)])
      throw std::invalid_argument("triplet: positive has a different identity");
    if (labels[static_cast<std::size_t>(t.anchor)] == labels[static_cast<std::size_t>(t.negative)])
      throw std::invalid_argument("triplet: negative shares the anchor identity");
  }
}

// One uniform-random positive and negative per anchor; every batch element
// with at least one of each acts as an anchor.
inline std::vector<TripletIndex> make_random_triplets(const std::vector<int>& labels, std::mt19937_64& rng) {
  const Index n = static_cast<Index>(labels.size());
  std::vector<TripletIndex> out;
  for (Index a = 0; a < n; ++a) {
    std::vector<Index> pos, neg;
    for (Index j = 0; j < n; ++j) {
      if (j == a) continue;
      (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)] ? pos : neg).push_back(j);
    }
    if (pos.empty() || neg.empty()) continue;
    std::uniform_int_distribution<std::size_t> dp(0, pos.size() - 1), dn(0, neg.size() - 1);
    out.push_back({a, pos[dp(rng)], neg[dn(rng)]});
  }
  if (out.empty()) throw std::invalid_argument("make_random_triplets: no valid triplet in batch");
  return out;
}

// Hardest positive / hardest negative per anchor by Euclidean distance on
// the given embedding rows.
template <typename S>
std::vector<TripletIndex> make_batch_hard_triplets(const std::vector<int>& labels, const ArrayX<S>& embeddings,
                                                   Index dim) {
  const Index n = static_cast<Index>(labels.size());
  if (embeddings.size() != n * dim) throw std::invalid_argument("make_batch_hard_triplets: embedding size mismatch");
  auto dist = [&](Index i, Index j) {
    double s = 0;
    for (Index d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(embeddings[i * dim + d]) - static_cast<double>(embeddings[j * dim + d]);
      s += diff * diff;
    }
    return std::sqrt(s);
  };
  std::vector<TripletIndex> out;
  for (Index a = 0; a < n; ++a) {
    Index hp = -1, hn = -1;
    double dp = -1, dn = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = dist(a, j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (d > dp) dp = d, hp = j;
      } else if (d < dn) {
        dn = d, hn = j;
      }
    }
    if (hp >= 0 && hn >= 0) out.push_back({a, hp, hn});
  }
  if (out.empty()) throw std::invalid_argument("make_batch_hard_triplets: no valid triplet in batch");
  return out;
}

// ---------------------------------------------------------------------------
// Dual causality loss

// Restitution must tighten the positive pair and spread the negative pair:
//   softplus(d(r_a, r_p) - d(f_a, f_p)) + softplus(d(f_a, f_n) - d(r_a, r_n))
// where f are plain pooled features and r their restituted counterparts.
template <typename S>
Var<S> clarification_loss(Var<S> f_a, Var<S> f_p, Var<S> f_n, Var<S> r_a, Var<S> r_p, Var<S> r_n) {
  const S eps = kLossNormEps<S>;
  Var<S> tighten = softplus(sub(cosine_distance(r_a, r_p, eps), cosine_distance(f_a, f_p, eps)));
  Var<S> spread = softplus(sub(cosine_distance(f_a, f_n, eps), cosine_distance(r_a, r_n, eps)));
  return add(tighten, spread);
}

// Mirror image for the contaminated features: adding the irrelevant residual
// must loosen the positive pair and attract the negative pair.
template <typename S>
Var<S> destruction_loss(Var<S> f_a, Var<S> f_p, Var<S> f_n, Var<S> c_a, Var<S> c_p, Var<S> c_n) {
  const S eps = kLossNormEps<S>;
  Var<S> loosen = softplus(sub(cosine_distance(f_a, f_p, eps), cosine_distance(c_a, c_p, eps)));
  Var<S> attract = softplus(sub(cosine_distance(c_a, c_n, eps), cosine_distance(f_a, f_n, eps)));
  return add(loosen, attract);
}

template <typename S>
struct StageCausalityLoss {
  Var<S> clarification;  // invalid when disabled
  Var<S> destruction;
};

// Per-stage means over the triplet list. Either term can be disabled for the
// loss-ablation schemes.
template <typename S>
StageCausalityLoss<S> stage_dual_causality(const SnrTrace<S>& trace, const std::vector<TripletIndex>& triplets,
                                           bool use_clarification = true, bool use_destruction = true) {
  if (triplets.empty()) throw std::invalid_argument("dual causality loss: empty triplet list");
  if (!trace.has_contaminated) throw std::invalid_argument("dual causality loss: trace lacks the contaminated branch");
  Graph<S>& g = *trace.pooled_normalized.graph();
  StageCausalityLoss<S> out;
  const S inv = S(1) / static_cast<S>(triplets.size());
  for (const TripletIndex& t : triplets) {
    Var<S> f_a = row(trace.pooled_normalized, t.anchor);
    Var<S> f_p = row(trace.pooled_normalized, t.positive);
    Var<S> f_n = row(trace.pooled_normalized, t.negative);
    if (use_clarification) {
      Var<S> r_a = row(trace.pooled_restituted, t.anchor);
      Var<S> r_p = row(trace.pooled_restituted, t.positive);
      Var<S> r_n = row(trace.pooled_restituted, t.negative);
      Var<S> term = clarification_loss(f_a, f_p, f_n, r_a, r_p, r_n);
      out.clarification = out.clarification.valid() ? add(out.clarification, term) : term;
    }
    if (use_destruction) {
      Var<S> c_a = row(trace.pooled_contaminated, t.anchor);
      Var<S> c_p = row(trace.pooled_contaminated, t.positive);
      Var<S> c_n = row(trace.pooled_contaminated, t.negative);
      Var<S> term = destruction_loss(f_a, f_p, f_n, c_a, c_p, c_n);
      out.destruction = out.destruction.valid() ? add(out.destruction, term) : term;
    }
  }
  if (out.clarification.valid()) out.clarification = scale(out.clarification, inv);
  if (out.destruction.valid()) out.destruction = scale(out.destruction, inv);
  (void)g;
  return out;
}

// clarification + destruction, mean over triplets, for one SNR stage.
template <typename S>
Var<S> dual_causality_loss(const SnrTrace<S>& trace, const std::vector<TripletIndex>& triplets) {
  StageCausalityLoss<S> parts = stage_dual_causality(trace, triplets, true, true);
  return add(parts.clarification, parts.destruction);
}

// ---------------------------------------------------------------------------
// ReID losses

// Soft-margin batch-hard triplet loss: per anchor, the farthest same-identity
// and the nearest different-identity sample, mean softplus(d_pos - d_neg).
// Fused node; the hardest-pair selection is treated as constant in backward.
template <typename S>
Var<S> batch_hard_triplet_loss(Var<S> embeddings, const std::vector<int>& labels) {
  const Shape& es = embeddings.shape();
  if (es.rank != 2) throw std::invalid_argument("batch_hard_triplet_loss: expects (N x D) embeddings");
  const Index n = es.dims[0], dim = es.dims[1];
  if (static_cast<Index>(labels.size()) != n)
    throw std::invalid_argument("batch_hard_triplet_loss: label count mismatch");
  bool multi_identity = false;
  for (std::size_t i = 1; i < labels.size(); ++i) multi_identity |= (labels[i] != labels[0]);
  if (!multi_identity) throw std::invalid_argument("batch_hard_triplet_loss: batch has a single identity");

  Graph<S>& g = *embeddings.graph();
  const ArrayX<S>& e = embeddings.value();
  auto dist = [&](Index i, Index j) {
    double s = 0;
    for (Index d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(e[i * dim + d]) - static_cast<double>(e[j * dim + d]);
      s += diff * diff;
    }
    return std::sqrt(s);
  };

  struct AnchorPick {
    Index a, p, nidx;
    double dp, dn;
  };
  std::vector<AnchorPick> picks;
  for (Index a = 0; a < n; ++a) {
    Index hp = -1, hn = -1;
    double dp = -1, dn = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = dist(a, j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (d > dp) dp = d, hp = j;
      } else if (d < dn) {
        dn = d, hn = j;
      }
    }
    if (hp >= 0 && hn >= 0) picks.push_back({a, hp, hn, dp, dn});
  }
  if (picks.empty()) throw std::invalid_argument("batch_hard_triplet_loss: no anchor has a positive");

  double loss = 0;
  for (const AnchorPick& pk : picks) loss += softplus_stable(pk.dp - pk.dn);
  loss /= static_cast<double>(picks.size());

  ArrayX<S> v(1);
  v[0] = static_cast<S>(loss);
  Var<S> out = g.make(Shape::scalar(), std::move(v));
  g.set_backward(out, [ei = embeddings.id(), oi = out.id(), picks, dim](Graph<S>& g) {
    const double go = static_cast<double>(g.grad(oi)[0]) / static_cast<double>(picks.size());
    const ArrayX<S>& e = g.value(ei);
    ArrayX<S>& ge = g.grad(ei);
    for (const auto& pk : picks) {
      const double s = go * sigmoid_stable(pk.dp - pk.dn);
      const double idp = 1.0 / std::max(pk.dp, 1e-12);
      const double idn = 1.0 / std::max(pk.dn, 1e-12);
      for (Index d = 0; d < dim; ++d) {
        const double ap = static_cast<double>(e[pk.a * dim + d]) - static_cast<double>(e[pk.p * dim + d]);
        const double an = static_cast<double>(e[pk.a * dim + d]) - static_cast<double>(e[pk.nidx * dim + d]);
        ge[pk.a * dim + d] += static_cast<S>(s * (ap * idp - an * idn));
        ge[pk.p * dim + d] += static_cast<S>(-s * ap * idp);
        ge[pk.nidx * dim + d] += static_cast<S>(s * an * idn);
      }
    }
  });
  return out;
}

// Label-smoothed softmax cross-entropy on the classifier logits.
template <typename S>
Var<S> id_classification_loss(Var<S> logits, const std::vector<int>& labels, S smoothing) {
  return softmax_cross_entropy(logits, labels, smoothing);
}

// ---------------------------------------------------------------------------
// Joint objective

struct LossBreakdown {
  double reid_ce = 0;
  double reid_triplet = 0;
  std::vector<double> snr_plus;   // per stage; 0 where the stage has no module
  std::vector<double> snr_minus;
  double total = 0;
};

template <typename S>
struct TotalLoss {
  Var<S> value;
  LossBreakdown breakdown;
};

// total = ce + triplet + sum_b lambda_b * (clarification_b + destruction_b).
// `stages` is aligned with the backbone stages; nullopt marks stages without
// an SNR module.
template <typename S>
TotalLoss<S> total_loss(Var<S> ce, Var<S> triplet, const std::vector<std::optional<StageCausalityLoss<S>>>& stages,
                        const std::vector<double>& lambda) {
  if (lambda.size() != stages.size())
    throw std::invalid_argument("total_loss: lambda count does not match stage count");
  TotalLoss<S> out;
  out.breakdown.reid_ce = static_cast<double>(ce.scalar());
  out.breakdown.reid_triplet = static_cast<double>(triplet.scalar());
  out.breakdown.snr_plus.assign(stages.size(), 0.0);
  out.breakdown.snr_minus.assign(stages.size(), 0.0);
  out.value = add(ce, triplet);
  for (std::size_t b = 0; b < stages.size(); ++b) {
    if (!stages[b].has_value()) continue;
    const StageCausalityLoss<S>& s = *stages[b];
    Var<S> stage_sum;
    if (s.clarification.valid()) {
      out.breakdown.snr_plus[b] = static_cast<double>(s.clarification.scalar());
      stage_sum = s.clarification;
    }
    if (s.destruction.valid()) {
      out.breakdown.snr_minus[b] = static_cast<double>(s.destruction.scalar());
      stage_sum = stage_sum.valid() ? add(stage_sum, s.destruction) : s.destruction;
    }
    if (stage_sum.valid() && lambda[b] != 0.0)
      out.value = add(out.value, scale(stage_sum, static_cast<S>(lambda[b])));
  }
  out.breakdown.total = static_cast<double>(out.value.scalar());
  return out;
}

}  // namespace snr
