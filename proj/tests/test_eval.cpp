#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "cxrsev/eval.hpp"
#include "oracles.hpp"
#include "test_support.hpp"
#include "../src/text_util.hpp"

using namespace cxrsev;

namespace {

std::vector<ImageRecord> cohort(const std::vector<std::pair<std::string, std::size_t>>& patients) {
  std::vector<ImageRecord> out;
  for (const auto& [pid, k] : patients)
    for (std::size_t t = 0; t < k; ++t) {
      ImageRecord r;
      r.patient_id = pid;
      r.image_id = pid + "_" + std::to_string(t);
      r.timepoint = static_cast<int>(t);
      out.push_back(r);
    }
  return out;
}

std::vector<ImageRecord> records_of(const FeatureTable& t) {
  std::vector<ImageRecord> out;
  for (const auto& r : t.rows()) out.push_back(r.record);
  return out;
}

}  // namespace

TEST_CASE("grouped_split: {A:2, B:1, C:1} matches the enumerated outcomes") {
  const auto recs = cohort({{"A", 2}, {"B", 1}, {"C", 1}});
  const auto reachable = oracle::reachable_train_counts({2, 1, 1}, 0.5);
  CHECK(reachable == std::set<std::size_t>{2, 3});
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto plan = grouped_split(recs, 0.5, seed, 0);
    CHECK(reachable.count(plan.train_images.size()) == 1);
    const bool a_train = std::count(plan.train_images.begin(), plan.train_images.end(), "A_0") == 1;
    CHECK(a_train == (std::count(plan.train_images.begin(), plan.train_images.end(), "A_1") == 1));
    seen.insert(plan.train_images.size());
  }
  CHECK(seen == reachable);
}

TEST_CASE("grouped_split: two single-image patients go one per side") {
  const auto recs = cohort({{"A", 1}, {"B", 1}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto plan = grouped_split(recs, 0.5, seed, seed % 3);
    CHECK(plan.train_images.size() == 1);
    CHECK(plan.test_images.size() == 1);
  }
}

TEST_CASE("grouped_split: deterministic in (seed, repetition)") {
  const auto recs = records_of(testing::synthetic_table(20, 3, 1));
  CHECK(grouped_split(recs, 0.5, 7, 3) == grouped_split(recs, 0.5, 7, 3));
  bool any_difference = false;
  for (std::size_t r = 0; r < 10; ++r)
    any_difference |= grouped_split(recs, 0.5, 7, r).train_patients != grouped_split(recs, 0.5, 7, 0).train_patients;
  CHECK(any_difference);
}

TEST_CASE("grouped_split: errors") {
  CHECK_THROWS_AS(grouped_split(cohort({{"A", 3}}), 0.5, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(grouped_split(cohort({{"A", 1}, {"B", 1}}), 0.0, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(grouped_split(cohort({{"A", 1}, {"B", 1}}), 1.0, 1, 0), std::invalid_argument);
}

TEST_CASE("grouped_split: a dominant late patient still leaves test non-empty") {
  // A holds 3 of 5 images; when A is shuffled last the greedy pass would take everything.
  const auto recs = cohort({{"A", 3}, {"B", 1}, {"C", 1}});
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto plan = grouped_split(recs, 0.5, seed, 0);
    CHECK_FALSE(plan.test_images.empty());
    CHECK_FALSE(plan.train_images.empty());
    CHECK(plan.train_images.size() >= 3);
  }
}

TEST_CASE("grouped_split properties on fuzzed cohorts") {
  auto gen = make_stream(31337, 0);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n_patients = 2 + uniform_below(gen, 30);
    std::vector<std::pair<std::string, std::size_t>> sizes;
    for (std::size_t p = 0; p < n_patients; ++p) sizes.push_back({"p" + std::to_string(p), 1 + uniform_below(gen, 4)});
    const auto recs = cohort(sizes);
    const auto plan = grouped_split(recs, 0.5, gen(), trial);

    std::unordered_map<std::string, int> side;
    for (const auto& p : plan.train_patients) side[p] |= 1;
    for (const auto& p : plan.test_patients) side[p] |= 2;
    CHECK(side.size() == n_patients);
    for (const auto& [p, s] : side) CHECK((s == 1 || s == 2));
    CHECK(plan.train_images.size() + plan.test_images.size() == recs.size());
    CHECK_FALSE(plan.test_images.empty());
  }
}

TEST_CASE("grouped_split: unit-sized patients give ceil(n/2) train images") {
  for (std::size_t n = 2; n < 40; ++n) {
    std::vector<std::pair<std::string, std::size_t>> sizes;
    for (std::size_t p = 0; p < n; ++p) sizes.push_back({"p" + std::to_string(p), 1});
    CHECK(grouped_split(cohort(sizes), 0.5, n, 0).train_images.size() == (n + 1) / 2);
  }
}

TEST_CASE("pearson") {
  const std::vector<double> a = {1, 2, 3}, b = {3, 2, 1}, c = {4, 4, 4};
  CHECK(pearson(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(a, b) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(pearson(c, a) == 0.0);
  CHECK(pearson(a, c) == 0.0);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
  CHECK_THROWS_AS(pearson(a, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST_CASE("pearson is invariant under positive affine maps") {
  auto gen = make_stream(12, 0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(10), y(10), x2(10);
    for (int i = 0; i < 10; ++i) x[i] = standard_normal(gen), y[i] = standard_normal(gen);
    const double scale = 0.1 + 10 * uniform01(gen), shift = 20 * standard_normal(gen);
    for (int i = 0; i < 10; ++i) x2[i] = scale * x[i] + shift;
    CHECK(pearson(x2, y) == doctest::Approx(pearson(x, y)).epsilon(1e-10));
  }
}

TEST_CASE("r2, mae, mse") {
  const std::vector<double> y = {0, 2}, h = {1, 1};
  CHECK(mae(y, h) == 1.0);
  CHECK(mse(y, h) == 1.0);
  CHECK(r2(y, y) == 1.0);
  CHECK(mae(y, y) == 0.0);
  CHECK(mse(y, y) == 0.0);
  CHECK(r2(y, h) == 0.0);  // mean prediction
  CHECK(r2(y, std::vector<double>{2, 0}) < 0.0);
  CHECK_THROWS_AS(r2(std::vector<double>{3, 3}, std::vector<double>{1, 2}), std::domain_error);
  CHECK_THROWS_AS(mae(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(mse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);

  auto gen = make_stream(13, 0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(7), b(7);
    for (int i = 0; i < 7; ++i) a[i] = 8 * uniform01(gen), b[i] = 8 * uniform01(gen);
    CHECK(mae(a, b) <= std::sqrt(mse(a, b)) + 1e-12);
  }
}

TEST_CASE("mean_std and summarize") {
  const std::vector<double> v = {1, 2, 3, 4};
  const auto m = mean_std(v);
  CHECK(m.mean == 2.5);
  CHECK(*m.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK_FALSE(mean_std(std::vector<double>{1.0}).std.has_value());

  std::vector<SplitMetrics> reps;
  auto gen = make_stream(14, 0);
  for (std::size_t r = 0; r < 9; ++r)
    reps.push_back({r, 10, 10, uniform01(gen), uniform01(gen), uniform01(gen), uniform01(gen)});
  const auto s1 = summarize(Target::extent, FeatureSet::opacity1, reps);
  std::reverse(reps.begin(), reps.end());
  std::swap(reps[1], reps[5]);
  const auto s2 = summarize(Target::extent, FeatureSet::opacity1, reps);
  CHECK(s1.pearson.mean == doctest::Approx(s2.pearson.mean).epsilon(1e-14));
  CHECK(*s1.mse.std == doctest::Approx(*s2.mse.std).epsilon(1e-14));
  CHECK(s1.n_params == 2);
  CHECK(s1.n_reps == 9);
}

TEST_CASE("run_repeated_eval: noiseless linear target") {
  const auto t = testing::synthetic_table(30, 3, 3);
  const auto truth = testing::truth_from(t, [](const FeatureRow& r) { return 3.0 * r.features.output("lung_opacity") + 1.0; });
  EvalOptions opt;
  opt.n_reps = 20;
  const auto res = run_repeated_eval(t, truth, FeatureSet::opacity1, Target::extent, opt);
  CHECK(res.summary.pearson.mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.summary.mae.mean < 1e-8);
  CHECK(res.per_rep.size() == 20);
  CHECK_FALSE(res.scatter.empty());
  CHECK(res.scatter.size() == res.per_rep.front().n_test);
}

TEST_CASE("run_repeated_eval: intercept-only gives zero correlation") {
  const auto t = testing::synthetic_table(30, 2, 4);
  auto gen = make_stream(4, 1);
  const auto truth = testing::truth_from(t, [&](const FeatureRow&) { return static_cast<double>(uniform_below(gen, 9)); });
  const auto res = run_repeated_eval(t, truth, FeatureSet::none, Target::extent);
  CHECK(res.summary.pearson.mean == 0.0);
  CHECK(*res.summary.pearson.std == 0.0);
  CHECK(res.summary.n_params == 1);
  CHECK(res.summary.r2.mean < 0.05);
}

TEST_CASE("run_repeated_eval: single-feature out-of-sample R2 never beats pearson^2") {
  const auto t = testing::synthetic_table(25, 2, 5);
  auto gen = make_stream(5, 1);
  const auto truth = testing::truth_from(t, [&](const FeatureRow& r) {
    return 2.0 * r.features.output("lung_opacity") + standard_normal(gen);
  });
  EvalOptions opt;
  opt.n_reps = 30;
  for (const auto& rep : run_repeated_eval(t, truth, FeatureSet::opacity1, Target::extent, opt).per_rep)
    CHECK(rep.r2 <= rep.pearson * rep.pearson + 1e-9);
}

TEST_CASE("run_repeated_eval: threads do not change results") {
  const auto t = testing::synthetic_table(25, 3, 6);
  auto gen = make_stream(6, 1);
  const auto truth = testing::truth_from(t, [&](const FeatureRow& r) {
    return r.features.output("lung_opacity") + 0.3 * standard_normal(gen);
  });
  EvalOptions one;
  one.n_reps = 12;
  EvalOptions many = one;
  many.threads = 4;
  const auto a = run_repeated_eval(t, truth, FeatureSet::pneumonia4, Target::opacity, one);
  const auto b = run_repeated_eval(t, truth, FeatureSet::pneumonia4, Target::opacity, many);
  for (std::size_t r = 0; r < a.per_rep.size(); ++r) {
    CHECK(a.per_rep[r].mse == b.per_rep[r].mse);
    CHECK(a.per_rep[r].pearson == b.per_rep[r].pearson);
  }
}

TEST_CASE("run_repeated_eval: errors") {
  const auto t = testing::synthetic_table(10, 1, 7);
  auto truth = testing::truth_from(t, [](const FeatureRow& r) { return r.features.output("lung_opacity"); });
  CHECK_THROWS_AS(run_repeated_eval(t, truth, FeatureSet::intermediate1024, Target::extent), DataError);
  truth.push_back({"ghost", 1, 1, 1});
  CHECK_THROWS_AS(run_repeated_eval(t, truth, FeatureSet::opacity1, Target::extent), DataError);
}

TEST_CASE("emit_table") {
  MetricsSummary s;
  s.task = Target::extent;
  s.feature_set = FeatureSet::opacity1;
  s.n_params = 2;
  s.n_reps = 50;
  s.pearson = {0.8012, 0.049};
  s.r2 = {0.6, 0.09};
  s.mae = {1.14, 0.11};
  s.mse = {2.06, 0.34};

  SUBCASE("one markdown row") {
    std::ostringstream out;
    emit_table(std::vector<MetricsSummary>{s}, TableFormat::markdown, out);
    const auto text = out.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
    CHECK(text.find("| extent | opacity1 | 1+1 | 0.80±0.05 | 0.60±0.09 | 1.14±0.11 | 2.06±0.34 |") !=
          std::string::npos);
  }
  SUBCASE("ten rows in task then parameter order") {
    std::vector<MetricsSummary> all;
    for (Target task : {Target::extent, Target::opacity})
      for (auto fs : kAllFeatureSets) {
        auto x = s;
        x.task = task;
        x.feature_set = fs;
        x.n_params = width(fs) + 1;
        all.push_back(x);
      }
    std::ostringstream out;
    emit_table(all, TableFormat::csv, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    const auto header_fields = detail::split_fields(line).size();
    std::vector<std::pair<std::string, std::size_t>> order;
    while (std::getline(in, line)) {
      const auto f = detail::split_fields(line);
      CHECK(f.size() == header_fields);
      order.emplace_back(std::string(f[0]), std::stoul(std::string(f[2])));
    }
    REQUIRE(order.size() == 10);
    const std::vector<std::size_t> params = {1, 2, 5, 19, 1025};
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(order[i].first == (i < 5 ? "opacity" : "extent"));
      CHECK(order[i].second == params[i % 5]);
    }
  }
  SUBCASE("skipped rows") {
    std::vector<TableEntry> entries = {{Target::extent, FeatureSet::intermediate1024, std::nullopt, "features absent"}};
    std::ostringstream out;
    emit_table(entries, TableFormat::markdown, out);
    CHECK(out.str().find("skipped: features absent") != std::string::npos);
  }
}

TEST_CASE("export_scatter") {
  std::ostringstream out;
  const std::vector<ScatterPoint> pts = {{"a", 5.0, 5.3}, {"b", 2.0, 2.0}};
  export_scatter(pts, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "image_id,truth,prediction,abs_error");
  std::getline(in, line);
  const auto f = detail::split_fields(line);
  CHECK(std::stod(std::string(f[3])) == doctest::Approx(0.3).epsilon(1e-12));
  std::getline(in, line);
  CHECK(std::stod(std::string(detail::split_fields(line)[3])) == 0.0);

  CHECK_THROWS_AS(export_scatter(std::vector<ScatterPoint>{}, out), std::invalid_argument);
  const std::vector<GroundTruth> truth = {{"a", 5.0, 3.0, 1}};
  CHECK_THROWS_AS(export_scatter(truth, pts, Target::extent, out), DataError);
  std::ostringstream ok;
  export_scatter(truth, std::vector<ScatterPoint>{{"a", 0.0, 2.5}}, Target::opacity, ok);
  CHECK(ok.str().find("a,3,2.5,0.5") != std::string::npos);
}

TEST_CASE("export_per_rep") {
  std::ostringstream out;
  export_per_rep(std::vector<SplitMetrics>{{0, 5, 4, 0.5, 0.25, 1.0, 2.0}}, out);
  CHECK(out.str() == "repetition,n_train,n_test,pearson,r2,mae,mse\n0,5,4,0.5,0.25,1,2\n");
}
