#include "doctest.h"

#include <sstream>

#include "cxrsev/regress.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace cxrsev;

namespace {

Matrix random_matrix(Eigen::Index n, Eigen::Index p, std::mt19937_64& gen) {
  Matrix X(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) X(i, j) = standard_normal(gen);
  return X;
}

Vector random_vector(Eigen::Index n, std::mt19937_64& gen) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = standard_normal(gen);
  return v;
}

}  // namespace

TEST_CASE("feature set widths and names") {
  CHECK(width(FeatureSet::opacity1) == 1);
  CHECK(width(FeatureSet::pneumonia4) == 4);
  CHECK(width(FeatureSet::all18) == 18);
  CHECK(width(FeatureSet::intermediate1024) == 1024);
  CHECK(width(FeatureSet::none) == 0);
  for (auto fs : kAllFeatureSets) CHECK(parse_feature_set(to_string(fs)) == fs);
  CHECK_FALSE(parse_feature_set("all19").has_value());
}

TEST_CASE("design_matrix") {
  const auto t = testing::synthetic_table(3, 1, 7);
  std::vector<std::string> ids = {"img2", "img0", "img1"};

  SUBCASE("pneumonia4 column order") {
    const auto X = design_matrix(t, FeatureSet::pneumonia4, ids);
    REQUIRE(X.rows() == 3);
    REQUIRE(X.cols() == 4);
    const auto& f = t.at("img2").features;
    CHECK(X(0, 0) == f.output("lung_opacity"));
    CHECK(X(0, 1) == f.output("pneumonia"));
    CHECK(X(0, 2) == f.output("infiltration"));
    CHECK(X(0, 3) == f.output("consolidation"));
  }
  SUBCASE("none is n x 0") {
    const auto X = design_matrix(t, FeatureSet::none, ids);
    CHECK(X.rows() == 3);
    CHECK(X.cols() == 0);
  }
  SUBCASE("all18 in canonical order") {
    const std::vector<std::string> one = {"img1"};
    const auto X = design_matrix(t, FeatureSet::all18, one);
    REQUIRE(X.cols() == 18);
    for (std::size_t k = 0; k < kNumTasks; ++k)
      CHECK(X(0, static_cast<Eigen::Index>(k)) == t.at("img1").features.outputs[k]);
  }
  SUBCASE("errors") {
    const std::vector<std::string> bad = {"nope"};
    CHECK_THROWS_AS(design_matrix(t, FeatureSet::opacity1, bad), DataError);
    CHECK_THROWS_AS(design_matrix(t, FeatureSet::intermediate1024, ids), DataError);
  }
  SUBCASE("intermediate block") {
    const auto ti = testing::synthetic_table(2, 1, 8, true);
    const std::vector<std::string> one = {"img1"};
    const auto X = design_matrix(ti, FeatureSet::intermediate1024, one);
    CHECK(X.cols() == 1024);
    CHECK(X(0, 1023) == (*ti.at("img1").features.intermediate)[1023]);
  }
}

TEST_CASE("fit_ols: consistent system") {
  Matrix X(3, 1);
  X << 1, 2, 3;
  Vector y(3);
  y << 3, 5, 7;
  const auto m = fit_ols(X, y);
  CHECK(m.weights(0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(m.intercept == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(m.n_params() == 2);
}

TEST_CASE("fit_ols: duplicate columns split the weight equally") {
  Matrix X(4, 2);
  X << -1.5, -1.5, -0.5, -0.5, 0.5, 0.5, 1.5, 1.5;
  const Vector y = 2.0 * X.col(0);
  const auto m = fit_ols(X, y);
  CHECK(m.weights(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.weights(1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(m.intercept) < 1e-12);
}

TEST_CASE("fit_ols: random 20x6 matches the normal-equations oracle") {
  auto gen = make_stream(2024, 6);
  const Matrix X = random_matrix(20, 6, gen);
  const Vector y = random_vector(20, gen);
  const auto m = fit_ols(X, y);
  const auto ref = oracle::normal_equations(X, y);
  for (int j = 0; j < 6; ++j) CHECK(std::abs(m.weights(j) - ref.weights[j]) < 1e-8);
  CHECK(std::abs(m.intercept - ref.intercept) < 1e-8);
}

TEST_CASE("fit_ols: intercept only") {
  Vector y(4);
  y << 1, 2, 3, 6;
  const auto m = fit_ols(Matrix(4, 0), y);
  CHECK(m.weights.size() == 0);
  CHECK(m.intercept == 3.0);
}

TEST_CASE("fit_ols: errors") {
  CHECK_THROWS_AS(fit_ols(Matrix(0, 2), Vector(0)), std::invalid_argument);
  CHECK_THROWS_AS(fit_ols(Matrix(3, 2), Vector(2)), std::invalid_argument);
  Matrix X = Matrix::Ones(2, 1);
  Vector y(2);
  y << 1, std::nan("");
  CHECK_THROWS_AS(fit_ols(X, y), std::invalid_argument);
}

TEST_CASE("fit_ols properties: residuals centred and orthogonal to columns") {
  auto gen = make_stream(77, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<Eigen::Index>(2 + uniform_below(gen, 40));
    const auto p = static_cast<Eigen::Index>(uniform_below(gen, 12));
    const Matrix X = random_matrix(n, p, gen) * (1.0 + 5.0 * uniform01(gen));
    const Vector y = random_vector(n, gen) * 3.0;
    const auto m = fit_ols(X, y);
    const Vector res = y - predict(m, X);
    CHECK(std::abs(res.mean()) < 1e-9);
    for (Eigen::Index j = 0; j < p; ++j) {
      const double scale = X.col(j).norm() * y.norm() + 1.0;
      CHECK(std::abs(X.col(j).dot(res)) / scale < 1e-8);
    }
  }
}

TEST_CASE("fit_ols properties: min-norm on rank-deficient designs") {
  auto gen = make_stream(78, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = static_cast<Eigen::Index>(5 + uniform_below(gen, 20));
    const auto p = static_cast<Eigen::Index>(n + 1 + uniform_below(gen, 30));  // p > n
    const Matrix X = random_matrix(n, p, gen);
    const Vector y = random_vector(n, gen);
    const auto m = fit_ols(X, y);
    const auto ref = oracle::pseudo_inverse(X, y);
    const Eigen::Map<const Vector> ref_w(ref.weights.data(), p);
    CHECK(m.weights.norm() <= ref_w.norm() + 1e-8);
    std::vector<double> w(m.weights.data(), m.weights.data() + p);
    CHECK(oracle::residual_ss(X, y, w, m.intercept) <=
          oracle::residual_ss(X, y, ref.weights, ref.intercept) + 1e-8);
  }
}

TEST_CASE("fit_ols properties: duplicating a row keeps the full-rank solution") {
  // Holds for consistent systems, where every row is already fitted exactly.
  auto gen = make_stream(79, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const Eigen::Index n = 30, p = 5;
    const Matrix X = random_matrix(n, p, gen);
    const Vector w = random_vector(p, gen);
    const Vector y = X * w + Vector::Constant(n, 2.0);
    const auto dup = static_cast<Eigen::Index>(uniform_below(gen, n));
    Matrix X2(n + 1, p);
    X2 << X, X.row(dup);
    Vector y2(n + 1);
    y2 << y, y(dup);
    const auto a = fit_ols(X, y);
    const auto b = fit_ols(X2, y2);
    const double scale = 1.0 + a.weights.norm();
    CHECK((a.weights - b.weights).norm() / scale < 1e-8);
    CHECK(std::abs(a.intercept - b.intercept) / scale < 1e-8);
    CHECK((a.weights - w).norm() / scale < 1e-8);
  }
}

TEST_CASE("predict") {
  RegressionModel m;
  m.weights = Vector(0);
  m.intercept = 2.0;
  const Vector p = predict(m, Matrix(5, 0));
  CHECK((p.array() == 2.0).all());

  RegressionModel lin;
  lin.feature_set = FeatureSet::opacity1;
  lin.weights = Vector::Constant(1, 2.0);
  lin.intercept = 1.0;
  CHECK(predict(lin, Matrix::Zero(1, 1))(0) == 1.0);
  // not clipped to the score range
  CHECK(predict(lin, Matrix::Constant(1, 1, -0.9))(0) == doctest::Approx(-0.8));
  CHECK_THROWS_AS(predict(lin, Matrix(1, 2)), std::invalid_argument);
}

TEST_CASE("model save/load is exact") {
  auto gen = make_stream(80, 0);
  RegressionModel m;
  m.feature_set = FeatureSet::pneumonia4;
  m.target = Target::opacity;
  m.weights = random_vector(4, gen) * 1e-3;
  m.intercept = 1.0 / 3.0;
  std::stringstream ss;
  save_model(m, ss);
  const auto back = load_model(ss);
  CHECK(back.feature_set == m.feature_set);
  CHECK(back.target == m.target);
  CHECK(back.intercept == m.intercept);
  CHECK(back.weights == m.weights);

  std::istringstream bad("feature_set=opacity1\ntarget=extent\nintercept=1\nweights=1,2\n");
  CHECK_THROWS_AS(load_model(bad), DataError);
  std::istringstream none("feature_set=none\ntarget=extent\nintercept=1.5\nweights=\n");
  CHECK(load_model(none).intercept == 1.5);
}
