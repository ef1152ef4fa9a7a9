#include "cxrsev/agreement.hpp"

#include <unordered_map>

namespace cxrsev {

RatingMatrix ratings_from_labels(const LabelTable& labels, Target scale) {
  RatingMatrix m;
  const int top = max_score(scale);
  for (int c = 0; c <= top; ++c) m.categories.push_back(c);

  std::unordered_map<std::string, std::size_t> row_of;
  std::vector<int> raters;
  for (const auto& s : labels) {
    auto [it, fresh] = row_of.try_emplace(s.image_id, m.items.size());
    if (fresh) {
      m.items.push_back(s.image_id);
      m.counts.emplace_back(m.categories.size(), 0);
      raters.push_back(0);
    }
    const int total = scale == Target::extent ? s.extent_total() : s.opacity_total();
    ++m.counts[it->second][static_cast<std::size_t>(total)];
    ++raters[it->second];
  }
  if (m.items.empty()) throw DataError("label table is empty");
  m.n_raters = raters.front();
  for (std::size_t i = 0; i < raters.size(); ++i)
    if (raters[i] != m.n_raters)
      throw DataError("image '" + m.items[i] + "' has " + std::to_string(raters[i]) +
                      " raters but image '" + m.items.front() + "' has " + std::to_string(m.n_raters));
  return m;
}

void validate(const RatingMatrix& m) {
  for (std::size_t i = 0; i < m.counts.size(); ++i) {
    const auto& row = m.counts[i];
    if (row.size() != m.categories.size())
      throw std::invalid_argument("rating row " + std::to_string(i) + " has wrong width");
    int sum = 0;
    for (int c : row) {
      if (c < 0) throw std::invalid_argument("negative count in rating row " + std::to_string(i));
      sum += c;
    }
    if (sum != m.n_raters)
      throw std::invalid_argument("rating row " + std::to_string(i) + " sums to " + std::to_string(sum) +
                                  ", expected " + std::to_string(m.n_raters));
  }
}

double fleiss_kappa(const RatingMatrix& m) {
  if (m.n_raters < 2) throw std::invalid_argument("fleiss_kappa: need at least 2 raters");
  if (m.counts.empty()) throw std::invalid_argument("fleiss_kappa: no items");
  validate(m);

  const double n = m.n_raters;
  const double N = static_cast<double>(m.n_items());
  std::vector<double> column_totals(m.n_categories(), 0.0);
  double p_bar = 0.0;
  for (const auto& row : m.counts) {
    double sq = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      sq += static_cast<double>(row[j]) * row[j];
      column_totals[j] += row[j];
    }
    p_bar += (sq - n) / (n * (n - 1.0));
  }
  p_bar /= N;

  double p_e = 0.0;
  for (double t : column_totals) {
    const double p = t / (N * n);
    p_e += p * p;
  }
  if (p_e >= 1.0) throw UndefinedKappa("fleiss_kappa: undefined, every rating is in one category");
  return (p_bar - p_e) / (1.0 - p_e);
}

}  // namespace cxrsev
