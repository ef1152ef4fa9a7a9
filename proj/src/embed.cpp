#include "cxrsev/embed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

#include "text_util.hpp"

namespace cxrsev {

namespace {

constexpr double kQFloor = 1e-12;
constexpr int kMaxBisection = 64;
constexpr double kPerplexityTol = 1e-5;

Matrix squared_distances(const Matrix& X) {
  const auto n = X.rows();
  Matrix D(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) D(i, j) = D(j, i) = (X.row(i) - X.row(j)).squaredNorm();
  }
  return D;
}

// Fills row with exp(-beta * shifted) normalised; returns the perplexity.
double gaussian_row(const Matrix& sq_dist, Eigen::Index i, double d_min, double beta, Vector& row) {
  const auto n = sq_dist.rows();
  double z = 0.0;
  double weighted = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == i) {
      row(j) = 0.0;
      continue;
    }
    const double d = sq_dist(i, j) - d_min;
    const double e = std::exp(-beta * d);
    row(j) = e;
    z += e;
    weighted += e * d;
  }
  row /= z;
  const double entropy = std::log(z) + beta * weighted / z;
  return std::exp(entropy);
}

}  // namespace

void validate(const TsneParams& p, std::size_t n_points) {
  if (n_points < 4) throw std::invalid_argument("t-SNE needs at least 4 points");
  if (!(p.perplexity > 0.0)) throw std::invalid_argument("perplexity must be positive");
  const double limit = (static_cast<double>(n_points) - 1.0) / 3.0;
  if (!(p.perplexity < limit))
    throw std::invalid_argument("perplexity " + detail::format_fixed(p.perplexity, 3) +
                                " is infeasible for " + std::to_string(n_points) +
                                " points (must be < " + detail::format_fixed(limit, 3) + ")");
  if (p.n_iter == 0) throw std::invalid_argument("n_iter must be positive");
  if (!(p.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(p.early_exaggeration > 0.0)) throw std::invalid_argument("early_exaggeration must be positive");
  if (!(p.initial_momentum > 0.0) || !(p.final_momentum > 0.0))
    throw std::invalid_argument("momentum must be positive");
  if (p.kl_every == 0) throw std::invalid_argument("kl_every must be positive");
}

Vector conditional_row(const Matrix& sq_dist, Eigen::Index i, double perplexity) {
  const auto n = sq_dist.rows();
  double d_min = std::numeric_limits<double>::infinity();
  double d_sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == i) continue;
    d_min = std::min(d_min, sq_dist(i, j));
    d_sum += sq_dist(i, j);
  }
  const double d_mean = d_sum / static_cast<double>(n - 1) - d_min;

  // Perplexity falls monotonically in log(beta); bisect on a wide bracket
  // centred on the inverse mean (shifted) distance.
  const double centre = -std::log(std::max(d_mean, 1e-300));
  double lo = centre - 40.0;
  double hi = centre + 40.0;
  Vector row(n);
  Vector best(n);
  double best_err = std::numeric_limits<double>::infinity();
  for (int step = 0; step < kMaxBisection; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double perp = gaussian_row(sq_dist, i, d_min, std::exp(mid), row);
    const double err = std::abs(perp - perplexity);
    if (err < best_err) {
      best_err = err;
      best = row;
    }
    if (err < kPerplexityTol) break;
    if (perp > perplexity)
      lo = mid;  // too flat, sharpen
    else
      hi = mid;
  }
  return best;
}

Matrix pairwise_affinities(const Matrix& X, double perplexity) {
  const auto n = X.rows();
  TsneParams check;
  check.perplexity = perplexity;
  validate(check, static_cast<std::size_t>(n));
  if (!X.allFinite()) throw std::invalid_argument("pairwise_affinities: non-finite input");

  const Matrix D = squared_distances(X);
  Matrix cond(n, n);
  for (Eigen::Index i = 0; i < n; ++i) cond.row(i) = conditional_row(D, i, perplexity).transpose();

  Matrix P(n, n);
  const double denom = 2.0 * static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    P(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) P(i, j) = P(j, i) = (cond(i, j) + cond(j, i)) / denom;
  }
  return P;
}

double kl_divergence(const Matrix& P, const Matrix& Y) {
  const auto n = P.rows();
  Matrix num(n, n);
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    num(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      num(i, j) = num(j, i) = 1.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm());
      z += 2.0 * num(i, j);
    }
  }
  z = std::max(z, kQFloor);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || P(i, j) <= 0.0) continue;
      const double q = std::max(num(i, j) / z, kQFloor);
      kl += P(i, j) * std::log(P(i, j) / q);
    }
  return kl;
}

Matrix initial_layout(std::size_t n, std::uint64_t seed) {
  auto gen = make_stream(seed, 0);
  Matrix Y(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < Y.rows(); ++i)
    for (Eigen::Index d = 0; d < 2; ++d) Y(i, d) = 1e-4 * standard_normal(gen);
  return Y;
}

TsneResult tsne(const Matrix& X, const TsneParams& params) {
  return tsne(X, params, initial_layout(static_cast<std::size_t>(X.rows()), params.seed));
}

namespace {

// Lexicographic on (features, start position), so permuting the input
// permutes the optimisation exactly instead of reordering its sums.
std::vector<Eigen::Index> canonical_order(const Matrix& X, const Matrix& init) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) order[static_cast<std::size_t>(i)] = i;
  const auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index d = 0; d < X.cols(); ++d)
      if (X(a, d) != X(b, d)) return X(a, d) < X(b, d);
    for (Eigen::Index d = 0; d < init.cols(); ++d)
      if (init(a, d) != init(b, d)) return init(a, d) < init(b, d);
    return false;
  };
  std::stable_sort(order.begin(), order.end(), less);
  return order;
}

TsneResult optimise(const Matrix& X, const TsneParams& params, const Matrix& init);

}  // namespace

TsneResult tsne(const Matrix& X, const TsneParams& params, const Matrix& init) {
  const auto n = X.rows();
  validate(params, static_cast<std::size_t>(n));
  if (init.rows() != n || init.cols() != 2)
    throw std::invalid_argument("tsne: initial layout must be N x 2");
  if (!X.allFinite() || !init.allFinite()) throw std::invalid_argument("tsne: non-finite input");

  const auto order = canonical_order(X, init);
  Matrix Xs(n, X.cols()), init_s(n, 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    Xs.row(k) = X.row(order[static_cast<std::size_t>(k)]);
    init_s.row(k) = init.row(order[static_cast<std::size_t>(k)]);
  }
  TsneResult result = optimise(Xs, params, init_s);
  Matrix coords(n, 2);
  for (Eigen::Index k = 0; k < n; ++k) coords.row(order[static_cast<std::size_t>(k)]) = result.coords.row(k);
  result.coords = std::move(coords);
  return result;
}

namespace {

TsneResult optimise(const Matrix& X, const TsneParams& params, const Matrix& init) {
  const auto n = X.rows();
  const Matrix P = pairwise_affinities(X, params.perplexity);
  Matrix Y = init;
  Matrix update = Matrix::Zero(n, 2);
  Matrix grad(n, 2);
  Matrix num(n, n);

  TsneResult result;
  for (std::size_t iter = 0; iter < params.n_iter; ++iter) {
    const double exaggeration = iter < params.exaggeration_iters ? params.early_exaggeration : 1.0;
    const double momentum =
        iter < params.momentum_switch_iter ? params.initial_momentum : params.final_momentum;

    double z = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      num(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        num(i, j) = num(j, i) = 1.0 / (1.0 + (Y.row(i) - Y.row(j)).squaredNorm());
        z += 2.0 * num(i, j);
      }
    }
    z = std::max(z, kQFloor);

    // dC/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)
    for (Eigen::Index i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = (exaggeration * P(i, j) - num(i, j) / z) * num(i, j);
        gx += w * (Y(i, 0) - Y(j, 0));
        gy += w * (Y(i, 1) - Y(j, 1));
      }
      grad(i, 0) = 4.0 * gx;
      grad(i, 1) = 4.0 * gy;
    }

    update = momentum * update - params.learning_rate * grad;
    Y += update;
    Y.rowwise() -= Y.colwise().mean();
    if (!Y.allFinite())
      throw std::runtime_error("tsne: numerical overflow at iteration " + std::to_string(iter + 1));

    const std::size_t done = iter + 1;
    const bool boundary = done == params.exaggeration_iters;
    const bool last = done == params.n_iter;
    if (boundary || last || done % params.kl_every == 0) {
      const double kl = kl_divergence(P, Y);
      result.kl_trace.push_back({done, kl});
      if (boundary) result.kl_after_exaggeration = kl;
      if (last) result.kl_final = kl;
    }
  }
  if (params.n_iter < params.exaggeration_iters) result.kl_after_exaggeration = result.kl_final;
  result.coords = std::move(Y);
  return result;
}

}  // namespace

std::vector<EmbeddingRow> join_embedding(const Matrix& coords, std::span<const ImageRecord> records,
                                         const std::optional<Vector>& predictions) {
  if (static_cast<std::size_t>(coords.rows()) != records.size())
    throw std::invalid_argument("join_embedding: " + std::to_string(coords.rows()) +
                                " coordinates for " + std::to_string(records.size()) + " images");
  if (predictions && static_cast<std::size_t>(predictions->size()) != records.size())
    throw std::invalid_argument("join_embedding: prediction count does not match image count");
  std::vector<EmbeddingRow> rows;
  rows.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    EmbeddingRow r{records[i].image_id, coords(k, 0), coords(k, 1), std::nullopt, records[i].survival};
    if (predictions) r.predicted_extent = (*predictions)(k);
    rows.push_back(std::move(r));
  }
  return rows;
}

void export_embedding(std::span<const EmbeddingRow> rows, std::ostream& out) {
  const bool with_pred = std::any_of(rows.begin(), rows.end(),
                                     [](const EmbeddingRow& r) { return r.predicted_extent.has_value(); });
  out << "image_id,x,y" << (with_pred ? ",predicted_extent" : "") << ",survival\n";
  for (const auto& r : rows) {
    out << r.image_id << ',' << detail::format_exact(r.x) << ',' << detail::format_exact(r.y);
    if (with_pred)
      out << ',' << (r.predicted_extent ? detail::format_exact(*r.predicted_extent) : std::string("unknown"));
    out << ',' << to_string(r.survival) << '\n';
  }
}

}  // namespace cxrsev
