#ifndef CXRSEV_CORE_DATA_HPP
#define CXRSEV_CORE_DATA_HPP

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cxrsev {

/// Thrown for any problem with the contents of an input document.
/// `row` is the 1-based line number in the file (the header is line 1),
/// or 0 when the problem is not tied to a single row.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t row = 0, std::string column = {})
      : std::runtime_error(what), row_(row), column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

inline constexpr std::size_t kNumTasks = 18;
inline constexpr std::size_t kIntermediateDim = 1024;

/// The pretrained classifier's task heads, in the column order used
/// everywhere in the toolkit.
inline constexpr std::array<std::string_view, kNumTasks> kTaskNames = {
    "atelectasis",  "consolidation", "infiltration",       "pneumothorax",
    "edema",        "emphysema",     "fibrosis",           "effusion",
    "pneumonia",    "pleural_thickening", "cardiomegaly",  "nodule",
    "mass",         "hernia",        "lung_lesion",        "fracture",
    "lung_opacity", "enlarged_cardiomediastinum"};

/// Column name of intermediate feature i: feat_0000 .. feat_1023.
std::string feat_column_name(std::size_t i);

/// Index of a task in kTaskNames, or nullopt.
std::optional<std::size_t> task_index(std::string_view name);

enum class Sex { male, female, unknown };
enum class Survival { survived, deceased, unknown };

std::string_view to_string(Sex s);
std::string_view to_string(Survival s);

struct ImageRecord {
  std::string image_id;
  std::string patient_id;
  int timepoint = 0;
  Sex sex = Sex::unknown;
  std::optional<double> age;
  Survival survival = Survival::unknown;

  bool operator==(const ImageRecord&) const = default;
};

struct FeatureVector {
  std::array<double, kNumTasks> outputs{};  // indexed like kTaskNames
  std::optional<std::vector<double>> intermediate;

  double output(std::string_view task) const;

  bool operator==(const FeatureVector&) const = default;
};

struct FeatureRow {
  ImageRecord record;
  FeatureVector features;

  bool operator==(const FeatureRow&) const = default;
};

/// Parsed feature file. Rows keep file order; lookups by image_id are O(log n).
class FeatureTable {
 public:
  FeatureTable() = default;
  /// Validates the table invariants; throws DataError on violation.
  explicit FeatureTable(std::vector<FeatureRow> rows);

  const std::vector<FeatureRow>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }

  /// True when every row carries the 1024-dim intermediate block.
  bool has_intermediate() const noexcept;

  const FeatureRow* find(std::string_view image_id) const;
  const FeatureRow& at(std::string_view image_id) const;

  bool operator==(const FeatureTable& other) const { return rows_ == other.rows_; }

 private:
  std::vector<FeatureRow> rows_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

FeatureTable parse_features(std::istream& in, const std::string& source = "<stream>");
FeatureTable parse_features(const std::filesystem::path& path);

/// Writes the canonical feature-file text. Reals use 17 significant digits
/// so that parse_features(write_features(t)) == t.
void write_features(const FeatureTable& table, std::ostream& out);
void write_features(const FeatureTable& table, const std::filesystem::path& path);

struct RaterScore {
  std::string image_id;
  std::string rater_id;
  int extent_right = 0;
  int extent_left = 0;
  int opacity_right = 0;
  int opacity_left = 0;

  int extent_total() const noexcept { return extent_right + extent_left; }
  int opacity_total() const noexcept { return opacity_right + opacity_left; }
};

using LabelTable = std::vector<RaterScore>;

LabelTable parse_labels(std::istream& in, const std::string& source = "<stream>");
LabelTable parse_labels(const std::filesystem::path& path);

enum class Target { extent, opacity };
std::string_view to_string(Target t);
std::optional<Target> parse_target(std::string_view s);

inline constexpr int max_score(Target t) { return t == Target::extent ? 8 : 6; }

struct GroundTruth {
  std::string image_id;
  double extent = 0.0;
  double opacity = 0.0;
  int n_raters = 0;

  double value(Target t) const noexcept { return t == Target::extent ? extent : opacity; }
};

enum class AggregationPolicy { mean, median };
std::optional<AggregationPolicy> parse_policy(std::string_view s);

/// One GroundTruth per image, in order of first appearance in `labels`.
std::vector<GroundTruth> aggregate_labels(const LabelTable& labels,
                                          AggregationPolicy policy = AggregationPolicy::mean);

struct AgeStats {
  std::size_t n = 0;
  std::optional<double> mean;
  std::optional<double> std;  // population (divide by n)
};

struct CohortSummary {
  std::size_t n_images = 0;
  std::size_t n_patients = 0;
  std::size_t male = 0;
  std::size_t female = 0;
  std::size_t sex_unknown = 0;
  AgeStats age;
  std::map<Sex, AgeStats> age_by_sex;
};

CohortSummary cohort_summary(const FeatureTable& table);

/// Human-readable summary; states the standard-deviation convention.
void print_cohort_summary(const CohortSummary& summary, std::ostream& out);

}  // namespace cxrsev

#endif  // CXRSEV_CORE_DATA_HPP
