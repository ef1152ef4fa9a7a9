#ifndef CXRSEV_AGREEMENT_HPP
#define CXRSEV_AGREEMENT_HPP

#include <stdexcept>
#include <string>
#include <vector>

#include "cxrsev/core_data.hpp"

namespace cxrsev {

/// Raters-per-category counts, one row per item. Categories are the total
/// scores 0..max_score(scale).
struct RatingMatrix {
  std::vector<std::string> items;
  std::vector<int> categories;
  std::vector<std::vector<int>> counts;  // items x categories
  int n_raters = 0;

  std::size_t n_items() const noexcept { return counts.size(); }
  std::size_t n_categories() const noexcept { return categories.size(); }
};

/// Kappa is undefined when all ratings fall into one category.
class UndefinedKappa : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Builds the matrix from rater totals. Items keep first-appearance order.
/// Throws DataError when images have different numbers of raters.
RatingMatrix ratings_from_labels(const LabelTable& labels, Target scale);

/// Checks row sums and non-negativity; throws std::invalid_argument.
void validate(const RatingMatrix& m);

/// Fleiss' kappa for nominal categories:
///   P_i   = (sum_j n_ij^2 - n) / (n (n - 1))
///   p_j   = sum_i n_ij / (N n)
///   kappa = (mean(P_i) - sum_j p_j^2) / (1 - sum_j p_j^2)
double fleiss_kappa(const RatingMatrix& m);

}  // namespace cxrsev

#endif  // CXRSEV_AGREEMENT_HPP
