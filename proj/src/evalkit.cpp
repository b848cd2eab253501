#include "snr/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace snr {

double cosine_distance_value(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  if (x.size() != y.size()) throw std::invalid_argument("cosine_distance: dimension mismatch");
  const double nx = x.norm(), ny = y.norm();
  if (nx == 0.0 || ny == 0.0) throw std::invalid_argument("cosine_distance: zero-norm input");
  return 0.5 - x.dot(y) / (2.0 * nx * ny);
}

MatrixXd pairwise_distances(const MatrixXd& queries, const MatrixXd& gallery,
                            const std::vector<Index>* query_sample_ids,
                            const std::vector<Index>* gallery_sample_ids) {
  if (queries.cols() != gallery.cols()) throw std::invalid_argument("pairwise_distances: dimension mismatch");
  const Index nq = queries.rows(), ng = gallery.rows();
  if (query_sample_ids && static_cast<Index>(query_sample_ids->size()) != nq)
    throw std::invalid_argument("pairwise_distances: query id count mismatch");
  if (gallery_sample_ids && static_cast<Index>(gallery_sample_ids->size()) != ng)
    throw std::invalid_argument("pairwise_distances: gallery id count mismatch");
  MatrixXd d(nq, ng);
  for (Index i = 0; i < nq; ++i)
    for (Index j = 0; j < ng; ++j) {
      if (query_sample_ids && gallery_sample_ids &&
          (*query_sample_ids)[static_cast<std::size_t>(i)] == (*gallery_sample_ids)[static_cast<std::size_t>(j)]) {
        d(i, j) = std::numeric_limits<double>::infinity();
      } else {
        d(i, j) = cosine_distance_value(queries.row(i), gallery.row(j));
      }
    }
  return d;
}

std::vector<RankingResult> build_rankings(const MatrixXd& distances, const std::vector<int>& query_ids,
                                          const std::vector<int>& gallery_ids) {
  const Index nq = distances.rows(), ng = distances.cols();
  if (static_cast<Index>(query_ids.size()) != nq || static_cast<Index>(gallery_ids.size()) != ng)
    throw std::invalid_argument("build_rankings: label count mismatch");
  std::vector<RankingResult> out(static_cast<std::size_t>(nq));
  for (Index i = 0; i < nq; ++i) {
    std::vector<Index> order;
    order.reserve(static_cast<std::size_t>(ng));
    for (Index j = 0; j < ng; ++j)
      if (std::isfinite(distances(i, j))) order.push_back(j);
    // ties broken by gallery index: stable order on equal distances
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      if (distances(i, a) != distances(i, b)) return distances(i, a) < distances(i, b);
      return a < b;
    });
    RankingResult& r = out[static_cast<std::size_t>(i)];
    for (Index j : order) {
      r.order.push_back(j);
      r.distance.push_back(distances(i, j));
      r.relevant.push_back(gallery_ids[static_cast<std::size_t>(j)] == query_ids[static_cast<std::size_t>(i)] ? 1 : 0);
    }
  }
  return out;
}

double mean_average_precision(const std::vector<RankingResult>& rankings) {
  if (rankings.empty()) throw std::invalid_argument("mean_average_precision: empty query set");
  double total = 0;
  Index eligible = 0;
  for (const RankingResult& r : rankings) {
    Index rel = std::accumulate(r.relevant.begin(), r.relevant.end(), Index{0});
    if (rel == 0) continue;  // queries without any relevant item are excluded
    double ap = 0;
    Index hits = 0;
    for (std::size_t pos = 0; pos < r.order.size(); ++pos) {
      if (!r.relevant[pos]) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
    total += ap / static_cast<double>(rel);
    ++eligible;
  }
  if (eligible == 0) throw std::invalid_argument("mean_average_precision: no query has a relevant item");
  return total / static_cast<double>(eligible);
}

double cmc_rank_k(const std::vector<RankingResult>& rankings, int k) {
  if (k < 1) throw std::invalid_argument("cmc_rank_k: k must be >= 1");
  if (rankings.empty()) throw std::invalid_argument("cmc_rank_k: empty query set");
  Index hits = 0, eligible = 0;
  for (const RankingResult& r : rankings) {
    bool any = std::any_of(r.relevant.begin(), r.relevant.end(), [](std::uint8_t v) { return v != 0; });
    if (!any) continue;
    ++eligible;
    const std::size_t limit = std::min<std::size_t>(static_cast<std::size_t>(k), r.relevant.size());
    for (std::size_t pos = 0; pos < limit; ++pos)
      if (r.relevant[pos]) {
        ++hits;
        break;
      }
  }
  if (eligible == 0) throw std::invalid_argument("cmc_rank_k: no query has a relevant item");
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

double symmetric_kl_gaussian(double mean_a, double var_a, double mean_b, double var_b) {
  if (var_a <= 0 || var_b <= 0) throw std::invalid_argument("symmetric_kl_gaussian: variances must be positive");
  const double kl_ab = 0.5 * std::log(var_b / var_a) + (var_a + (mean_a - mean_b) * (mean_a - mean_b)) / (2.0 * var_b) - 0.5;
  const double kl_ba = 0.5 * std::log(var_a / var_b) + (var_b + (mean_b - mean_a) * (mean_b - mean_a)) / (2.0 * var_a) - 0.5;
  return 0.5 * (kl_ab + kl_ba);
}

std::vector<double> per_channel_divergence(const MatrixXd& a, const MatrixXd& b, double eps) {
  if (a.cols() != b.cols()) throw std::invalid_argument("per_channel_divergence: channel count mismatch");
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("per_channel_divergence: need >= 2 samples per side");
  std::vector<double> out(static_cast<std::size_t>(a.cols()));
  for (Index c = 0; c < a.cols(); ++c) {
    const double ma = a.col(c).mean();
    const double mb = b.col(c).mean();
    const double va = (a.col(c).array() - ma).square().mean() + eps;
    const double vb = (b.col(c).array() - mb).square().mean() + eps;
    out[static_cast<std::size_t>(c)] = symmetric_kl_gaussian(ma, va, mb, vb);
  }
  return out;
}

DivergenceReport symmetric_feature_divergence(const std::vector<MatrixXd>& stages_a,
                                              const std::vector<MatrixXd>& stages_b, int domain_a, int domain_b) {
  if (stages_a.size() != stages_b.size())
    throw std::invalid_argument("symmetric_feature_divergence: stage count mismatch");
  DivergenceReport rep;
  rep.domain_a = domain_a;
  rep.domain_b = domain_b;
  for (std::size_t s = 0; s < stages_a.size(); ++s) {
    std::vector<double> ch = per_channel_divergence(stages_a[s], stages_b[s]);
    const double m = std::accumulate(ch.begin(), ch.end(), 0.0) / static_cast<double>(ch.size());
    rep.stage_channels.push_back(std::move(ch));
    rep.stage_mean.push_back(m);
  }
  return rep;
}

}  // namespace snr
