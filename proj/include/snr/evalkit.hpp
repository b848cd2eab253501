#pragma once

#include <Eigen/Core>

#include <vector>

#include "snr/tensor.hpp"

namespace snr {

using MatrixXd = Eigen::MatrixXd;

// Plain (non-graph) cosine distance used for retrieval; errors on zero norm.
double cosine_distance_value(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// Full query-by-gallery cosine distance matrix. When sample ids are given,
// identical (query, gallery) samples are masked with +infinity and later
// dropped from the rankings.
MatrixXd pairwise_distances(const MatrixXd& queries, const MatrixXd& gallery,
                            const std::vector<Index>* query_sample_ids = nullptr,
                            const std::vector<Index>* gallery_sample_ids = nullptr);

struct RankingResult {
  std::vector<Index> order;       // gallery indices, nearest first
  std::vector<double> distance;   // non-decreasing
  std::vector<std::uint8_t> relevant;
};

// Sorts each query's gallery by (distance, gallery index); masked pairs are
// dropped. Relevance = identity match.
std::vector<RankingResult> build_rankings(const MatrixXd& distances, const std::vector<int>& query_ids,
                                          const std::vector<int>& gallery_ids);

// Mean over queries (with at least one relevant item) of average precision.
double mean_average_precision(const std::vector<RankingResult>& rankings);

// Fraction of eligible queries whose first relevant hit ranks <= k.
double cmc_rank_k(const std::vector<RankingResult>& rankings, int k);

double symmetric_kl_gaussian(double mean_a, double var_a, double mean_b, double var_b);

// Per-channel symmetric KL between Gaussian fits of two pooled-activation
// sets (rows = samples, cols = channels); population variance + eps.
std::vector<double> per_channel_divergence(const MatrixXd& a, const MatrixXd& b, double eps = 1e-8);

struct DivergenceReport {
  int domain_a = 0, domain_b = 0;
  std::vector<double> stage_mean;                 // mean over channels, per stage
  std::vector<std::vector<double>> stage_channels;
};

DivergenceReport symmetric_feature_divergence(const std::vector<MatrixXd>& stages_a,
                                              const std::vector<MatrixXd>& stages_b, int domain_a, int domain_b);

}  // namespace snr
