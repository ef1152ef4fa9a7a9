#ifndef CXRSEV_REGRESS_HPP
#define CXRSEV_REGRESS_HPP

#include <Eigen/Core>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cxrsev/core_data.hpp"

namespace cxrsev {

/// Which network outputs feed a linear probe.
enum class FeatureSet { none, opacity1, pneumonia4, all18, intermediate1024 };

inline constexpr std::array<FeatureSet, 5> kAllFeatureSets = {
    FeatureSet::opacity1, FeatureSet::pneumonia4, FeatureSet::all18,
    FeatureSet::intermediate1024, FeatureSet::none};

std::string_view to_string(FeatureSet fs);
std::optional<FeatureSet> parse_feature_set(std::string_view s);

/// Number of design columns (intercept not counted).
std::size_t width(FeatureSet fs);

/// Column names in design-matrix order. Task sets use task names,
/// intermediate1024 uses feat_0000..feat_1023.
std::vector<std::string> column_names(FeatureSet fs);

/// The four pneumonia-related outputs, in design order.
inline constexpr std::array<std::string_view, 4> kPneumoniaTasks = {
    "lung_opacity", "pneumonia", "infiltration", "consolidation"};

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Rows follow `ids`; no intercept column. Throws DataError for an unknown id
/// or when intermediate1024 is requested and a row lacks the block.
Matrix design_matrix(const FeatureTable& table, FeatureSet fs, std::span<const std::string> ids);

struct RegressionModel {
  FeatureSet feature_set = FeatureSet::none;
  Target target = Target::extent;
  Vector weights;
  double intercept = 0.0;

  std::size_t n_params() const { return static_cast<std::size_t>(weights.size()) + 1; }
};

/// Relative singular-value cutoff used by fit_ols.
inline constexpr double kRankTolerance = 1e-10;

/// Least squares with an unpenalised intercept. When the minimiser is not
/// unique the weight vector of smallest Euclidean norm is returned.
///
/// The columns and target are centred on their means, which removes the
/// intercept from the problem exactly; the centred system is then solved
/// through a thin SVD, discarding singular values below
/// kRankTolerance * sigma_max. The intercept is recovered as
/// mean(y) - mean(X) . w.
RegressionModel fit_ols(const Matrix& X, const Vector& y, FeatureSet fs = FeatureSet::none,
                        Target target = Target::extent);

/// X * weights + intercept. Not clipped to the score range.
Vector predict(const RegressionModel& model, const Matrix& X);

void save_model(const RegressionModel& model, std::ostream& out);
void save_model(const RegressionModel& model, const std::filesystem::path& path);
RegressionModel load_model(std::istream& in, const std::string& source = "<stream>");
RegressionModel load_model(const std::filesystem::path& path);

}  // namespace cxrsev

#endif  // CXRSEV_REGRESS_HPP
