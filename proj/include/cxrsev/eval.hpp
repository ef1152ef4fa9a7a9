#ifndef CXRSEV_EVAL_HPP
#define CXRSEV_EVAL_HPP

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

/// Patient-atomic train/test partition for one repetition.
struct SplitPlan {
  std::uint64_t seed = 0;
  std::size_t repetition = 0;
  std::vector<std::string> train_patients;  // in shuffled order
  std::vector<std::string> test_patients;
  std::vector<std::string> train_images;    // input order
  std::vector<std::string> test_images;

  bool operator==(const SplitPlan&) const = default;
};

/// Shuffles the distinct patients with stream (seed, repetition), then hands
/// them to the train side in that order until the train image count first
/// reaches ratio * total; the rest go to test. If that would leave test
/// empty (one late patient holds most images), the first shuffled patient
/// is moved to test instead.
SplitPlan grouped_split(std::span<const ImageRecord> records, double ratio, std::uint64_t seed,
                        std::size_t repetition);

/// Sample Pearson correlation; 0.0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);
/// 1 - SS_res / SS_tot around the mean of `y`. Throws when `y` is constant.
double r2(std::span<const double> y, std::span<const double> yhat);
double mae(std::span<const double> y, std::span<const double> yhat);
double mse(std::span<const double> y, std::span<const double> yhat);

struct SplitMetrics {
  std::size_t repetition = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double pearson = 0.0;
  double r2 = 0.0;
  double mae = 0.0;
  double mse = 0.0;
};

/// Mean and sample standard deviation; `std` is empty for fewer than two values.
struct MeanStd {
  double mean = 0.0;
  std::optional<double> std;
};

MeanStd mean_std(std::span<const double> values);

struct MetricsSummary {
  Target task = Target::extent;
  FeatureSet feature_set = FeatureSet::none;
  std::size_t n_params = 1;
  std::size_t n_reps = 0;
  MeanStd pearson, r2, mae, mse;
};

MetricsSummary summarize(Target task, FeatureSet fs, std::span<const SplitMetrics> reps);

struct ScatterPoint {
  std::string image_id;
  double truth = 0.0;
  double prediction = 0.0;
};

struct EvalOptions {
  std::size_t n_reps = 50;
  double ratio = 0.5;
  std::uint64_t seed = kDefaultSeed;
  /// Worker threads for repetitions; results do not depend on this.
  unsigned threads = 1;
};

struct EvalResult {
  MetricsSummary summary;
  std::vector<SplitMetrics> per_rep;
  /// Held-out predictions of repetition 0, for truth-vs-prediction plots.
  std::vector<ScatterPoint> scatter;
};

/// Repeated patient-grouped evaluation of one (feature set, target) probe.
/// Images are those in `truth`; each must be present in `features`.
EvalResult run_repeated_eval(const FeatureTable& features, std::span<const GroundTruth> truth,
                             FeatureSet fs, Target target, const EvalOptions& options = {});

/// One row of a results table. A row with no summary is rendered as skipped.
struct TableEntry {
  Target task = Target::extent;
  FeatureSet feature_set = FeatureSet::none;
  std::optional<MetricsSummary> summary;
  std::string skipped_reason;
};

enum class TableFormat { markdown, csv };

/// Rows ordered by task (opacity, then extent) and then by parameter count.
void emit_table(std::span<const TableEntry> entries, TableFormat format, std::ostream& out);
void emit_table(std::span<const MetricsSummary> summaries, TableFormat format, std::ostream& out);

/// image_id,truth,prediction,abs_error
void export_scatter(std::span<const ScatterPoint> points, std::ostream& out);
void export_scatter(std::span<const GroundTruth> truth, std::span<const ScatterPoint> predictions,
                    Target target, std::ostream& out);

/// repetition,n_train,n_test,pearson,r2,mae,mse at full precision.
void export_per_rep(std::span<const SplitMetrics> reps, std::ostream& out);

}  // namespace cxrsev

#endif  // CXRSEV_EVAL_HPP
