#ifndef CXRSEV_EMBED_HPP
#define CXRSEV_EMBED_HPP

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxrsev/core_data.hpp"
#include "cxrsev/regress.hpp"
#include "cxrsev/rng.hpp"

namespace cxrsev {

struct TsneParams {
  double perplexity = 30.0;
  std::size_t n_iter = 1000;
  double early_exaggeration = 4.0;
  std::size_t exaggeration_iters = 100;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch_iter = 250;
  std::uint64_t seed = kDefaultSeed;
  /// KL is recorded every `kl_every` iterations (and at the exaggeration
  /// boundary and the last iteration).
  std::size_t kl_every = 50;
};

/// Throws std::invalid_argument unless every parameter is positive and
/// perplexity < (n_points - 1) / 3.
void validate(const TsneParams& params, std::size_t n_points);

/// Symmetric joint affinities: per-point Gaussian conditionals whose
/// bandwidth is bisected (at most 64 steps) to hit `perplexity`, then
/// P = (P_j|i + P_i|j) / 2N. Zero diagonal, sums to 1.
Matrix pairwise_affinities(const Matrix& X, double perplexity);

/// Conditional distribution P_.|i for one row of squared distances, as
/// produced inside pairwise_affinities. Exposed for testing.
Vector conditional_row(const Matrix& sq_dist, Eigen::Index i, double perplexity);

struct KlSample {
  std::size_t iteration;  // 1-based count of completed updates
  double kl;
};

struct TsneResult {
  Matrix coords;  // N x 2
  std::vector<KlSample> kl_trace;
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
};

/// Exact t-SNE with Student-t output kernel and plain momentum descent.
/// Initial coordinates come from N(0, 1e-4^2) drawn with stream (seed, 0).
TsneResult tsne(const Matrix& X, const TsneParams& params = {});
/// Same, from caller-supplied initial coordinates (N x 2).
TsneResult tsne(const Matrix& X, const TsneParams& params, const Matrix& init);

/// KL(P || Q) for coordinates Y.
double kl_divergence(const Matrix& P, const Matrix& Y);

/// Seeded Gaussian initial layout.
Matrix initial_layout(std::size_t n, std::uint64_t seed);

struct EmbeddingRow {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;
  std::optional<double> predicted_extent;
  Survival survival = Survival::unknown;
};

/// Joins coordinates (row i belongs to records[i]) with optional predictions.
std::vector<EmbeddingRow> join_embedding(const Matrix& coords, std::span<const ImageRecord> records,
                                         const std::optional<Vector>& predictions);

/// image_id,x,y[,predicted_extent],survival. The prediction column is present
/// only when at least one row carries a prediction.
void export_embedding(std::span<const EmbeddingRow> rows, std::ostream& out);

}  // namespace cxrsev

#endif  // CXRSEV_EMBED_HPP
