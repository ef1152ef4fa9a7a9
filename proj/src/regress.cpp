#include "cxrsev/regress.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "text_util.hpp"

namespace cxrsev {

std::string_view to_string(FeatureSet fs) {
  switch (fs) {
    case FeatureSet::none: return "none";
    case FeatureSet::opacity1: return "opacity1";
    case FeatureSet::pneumonia4: return "pneumonia4";
    case FeatureSet::all18: return "all18";
    case FeatureSet::intermediate1024: return "intermediate1024";
  }
  return "?";
}

std::optional<FeatureSet> parse_feature_set(std::string_view s) {
  for (auto fs : kAllFeatureSets)
    if (to_string(fs) == s) return fs;
  return std::nullopt;
}

std::size_t width(FeatureSet fs) {
  switch (fs) {
    case FeatureSet::none: return 0;
    case FeatureSet::opacity1: return 1;
    case FeatureSet::pneumonia4: return kPneumoniaTasks.size();
    case FeatureSet::all18: return kNumTasks;
    case FeatureSet::intermediate1024: return kIntermediateDim;
  }
  return 0;
}

namespace {

std::vector<std::size_t> task_columns(FeatureSet fs) {
  std::vector<std::size_t> idx;
  switch (fs) {
    case FeatureSet::opacity1:
      idx.push_back(*task_index("lung_opacity"));
      break;
    case FeatureSet::pneumonia4:
      for (auto t : kPneumoniaTasks) idx.push_back(*task_index(t));
      break;
    case FeatureSet::all18:
      for (std::size_t k = 0; k < kNumTasks; ++k) idx.push_back(k);
      break;
    default:
      break;
  }
  return idx;
}

}  // namespace

std::vector<std::string> column_names(FeatureSet fs) {
  std::vector<std::string> names;
  if (fs == FeatureSet::intermediate1024) {
    for (std::size_t k = 0; k < kIntermediateDim; ++k) names.push_back(feat_column_name(k));
    return names;
  }
  for (auto k : task_columns(fs)) names.emplace_back(kTaskNames[k]);
  return names;
}

Matrix design_matrix(const FeatureTable& table, FeatureSet fs, std::span<const std::string> ids) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  const auto p = static_cast<Eigen::Index>(width(fs));
  Matrix X(n, p);
  const auto cols = task_columns(fs);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.at(ids[i]);
    if (fs == FeatureSet::intermediate1024) {
      if (!row.features.intermediate)
        throw DataError("image '" + ids[i] + "' has no intermediate feature block");
      const auto& v = *row.features.intermediate;
      for (Eigen::Index j = 0; j < p; ++j) X(i, j) = v[j];
    } else {
      for (Eigen::Index j = 0; j < p; ++j) X(i, j) = row.features.outputs[cols[j]];
    }
  }
  return X;
}

RegressionModel fit_ols(const Matrix& X, const Vector& y, FeatureSet fs, Target target) {
  if (X.rows() == 0) throw std::invalid_argument("fit_ols: zero rows");
  if (X.rows() != y.size())
    throw std::invalid_argument("fit_ols: X has " + std::to_string(X.rows()) + " rows but y has " +
                                std::to_string(y.size()) + " entries");
  if (!y.allFinite()) throw std::invalid_argument("fit_ols: non-finite target");
  if (!X.allFinite()) throw std::invalid_argument("fit_ols: non-finite design entry");

  RegressionModel model;
  model.feature_set = fs;
  model.target = target;

  const double y_mean = y.mean();
  if (X.cols() == 0) {
    model.weights = Vector(0);
    model.intercept = y_mean;
    return model;
  }

  const Eigen::RowVectorXd x_mean = X.colwise().mean();
  const Matrix Xc = X.rowwise() - x_mean;
  const Vector yc = y.array() - y_mean;

  Eigen::JacobiSVD<Matrix> svd(Xc, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sigma = svd.singularValues();
  const double cutoff = sigma.size() > 0 ? kRankTolerance * sigma(0) : 0.0;

  Vector coeffs = svd.matrixU().transpose() * yc;
  for (Eigen::Index k = 0; k < sigma.size(); ++k)
    coeffs(k) = (sigma(k) > cutoff && sigma(k) > 0.0) ? coeffs(k) / sigma(k) : 0.0;
  model.weights = svd.matrixV() * coeffs;
  model.intercept = y_mean - x_mean.dot(model.weights);
  return model;
}

Vector predict(const RegressionModel& model, const Matrix& X) {
  if (X.cols() != model.weights.size())
    throw std::invalid_argument("predict: X has " + std::to_string(X.cols()) +
                                " columns, model expects " + std::to_string(model.weights.size()));
  Vector out = X * model.weights;
  out.array() += model.intercept;
  return out;
}

void save_model(const RegressionModel& model, std::ostream& out) {
  out << "feature_set=" << to_string(model.feature_set) << '\n'
      << "target=" << to_string(model.target) << '\n'
      << "intercept=" << detail::format_exact(model.intercept) << '\n'
      << "weights=";
  for (Eigen::Index i = 0; i < model.weights.size(); ++i)
    out << (i ? "," : "") << detail::format_exact(model.weights(i));
  out << '\n';
}

void save_model(const RegressionModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  save_model(model, out);
}

RegressionModel load_model(std::istream& in, const std::string& source) {
  std::map<std::string, std::string, std::less<>> kv;
  std::string line;
  std::size_t row = 0;
  while (detail::read_line(in, line)) {
    ++row;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(source + ": line " + std::to_string(row) + ": expected key=value", row);
    kv[std::string(detail::trim(std::string_view(line).substr(0, eq)))] =
        std::string(detail::trim(std::string_view(line).substr(eq + 1)));
  }
  const auto get = [&](std::string_view key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(source + ": missing key '" + std::string(key) + "'", 0, std::string(key));
    return it->second;
  };

  RegressionModel m;
  const auto fs = parse_feature_set(get("feature_set"));
  if (!fs) throw DataError(source + ": unknown feature_set '" + get("feature_set") + "'", 0, "feature_set");
  m.feature_set = *fs;
  const auto target = parse_target(get("target"));
  if (!target) throw DataError(source + ": unknown target '" + get("target") + "'", 0, "target");
  m.target = *target;
  const auto b = detail::parse_double(get("intercept"));
  if (!b || !std::isfinite(*b)) throw DataError(source + ": bad intercept", 0, "intercept");
  m.intercept = *b;

  std::vector<double> w;
  const auto& wtext = get("weights");
  if (!wtext.empty()) {
    for (auto field : detail::split_fields(wtext)) {
      const auto v = detail::parse_double(field);
      if (!v || !std::isfinite(*v))
        throw DataError(source + ": bad weight '" + std::string(field) + "'", 0, "weights");
      w.push_back(*v);
    }
  }
  if (w.size() != width(m.feature_set))
    throw DataError(source + ": feature_set " + std::string(to_string(m.feature_set)) + " needs " +
                        std::to_string(width(m.feature_set)) + " weights, found " + std::to_string(w.size()),
                    0, "weights");
  m.weights = Eigen::Map<const Vector>(w.data(), static_cast<Eigen::Index>(w.size()));
  return m;
}

RegressionModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return load_model(in, path.string());
}

}  // namespace cxrsev
