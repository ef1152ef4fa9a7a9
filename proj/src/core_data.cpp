#include "cxrsev/core_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "text_util.hpp"

namespace cxrsev {

namespace {

constexpr std::size_t kMetaColumns = 6;
constexpr std::array<std::string_view, kMetaColumns> kMetaNames = {
    "image_id", "patient_id", "timepoint", "sex", "age", "survival"};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string where(const std::string& source, std::size_t row, std::string_view column) {
  std::ostringstream os;
  os << source << ": row " << row;
  if (!column.empty()) os << ", column '" << column << "'";
  return os.str();
}

[[noreturn]] void fail(const std::string& source, std::size_t row, std::string_view column,
                       const std::string& msg) {
  throw DataError(where(source, row, column) + ": " + msg, row, std::string(column));
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

Sex parse_sex(std::string_view s, const std::string& source, std::size_t row) {
  const auto v = lower(detail::trim(s));
  if (v == "male" || v == "m") return Sex::male;
  if (v == "female" || v == "f") return Sex::female;
  if (v.empty() || v == "unknown" || v == "na") return Sex::unknown;
  fail(source, row, "sex", "unrecognised value '" + std::string(s) + "'");
}

Survival parse_survival(std::string_view s, const std::string& source, std::size_t row) {
  const auto v = lower(detail::trim(s));
  if (v == "survived" || v == "y" || v == "yes") return Survival::survived;
  if (v == "deceased" || v == "n" || v == "no") return Survival::deceased;
  if (v.empty() || v == "unknown" || v == "na") return Survival::unknown;
  fail(source, row, "survival", "unrecognised value '" + std::string(s) + "'");
}

double parse_finite(std::string_view field, const std::string& source, std::size_t row,
                    std::string_view column) {
  const auto v = detail::parse_double(field);
  if (!v) fail(source, row, column, "not a number: '" + std::string(field) + "'");
  if (!std::isfinite(*v)) fail(source, row, column, "non-finite value '" + std::string(field) + "'");
  return *v;
}

}  // namespace

std::string feat_column_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "feat_%04zu", i);
  return buf;
}

std::optional<std::size_t> task_index(std::string_view name) {
  const auto it = std::find(kTaskNames.begin(), kTaskNames.end(), name);
  if (it == kTaskNames.end()) return std::nullopt;
  return static_cast<std::size_t>(it - kTaskNames.begin());
}

std::string_view to_string(Sex s) {
  switch (s) {
    case Sex::male: return "male";
    case Sex::female: return "female";
    default: return "unknown";
  }
}

std::string_view to_string(Survival s) {
  switch (s) {
    case Survival::survived: return "survived";
    case Survival::deceased: return "deceased";
    default: return "unknown";
  }
}

std::string_view to_string(Target t) { return t == Target::extent ? "extent" : "opacity"; }

std::optional<Target> parse_target(std::string_view s) {
  if (s == "extent") return Target::extent;
  if (s == "opacity") return Target::opacity;
  return std::nullopt;
}

std::optional<AggregationPolicy> parse_policy(std::string_view s) {
  if (s == "mean") return AggregationPolicy::mean;
  if (s == "median") return AggregationPolicy::median;
  return std::nullopt;
}

double FeatureVector::output(std::string_view task) const {
  const auto idx = task_index(task);
  if (!idx) throw std::invalid_argument("unknown task '" + std::string(task) + "'");
  return outputs[*idx];
}

FeatureTable::FeatureTable(std::vector<FeatureRow> rows) : rows_(std::move(rows)) {
  std::set<std::pair<std::string, int>> series;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const auto& r = rows_[i];
    if (r.record.image_id.empty()) throw DataError("empty image_id", i + 2, "image_id");
    if (!index_.emplace(r.record.image_id, i).second)
      throw DataError("duplicate image_id '" + r.record.image_id + "'", i + 2, "image_id");
    if (r.record.timepoint < 0) throw DataError("negative timepoint", i + 2, "timepoint");
    if (!series.emplace(r.record.patient_id, r.record.timepoint).second)
      throw DataError("duplicate (patient_id, timepoint) for patient '" + r.record.patient_id + "'",
                      i + 2, "timepoint");
    for (std::size_t k = 0; k < kNumTasks; ++k)
      if (!std::isfinite(r.features.outputs[k]))
        throw DataError("non-finite task output", i + 2, "out_" + std::string(kTaskNames[k]));
    if (r.features.intermediate) {
      const auto& v = *r.features.intermediate;
      if (v.size() != kIntermediateDim)
        throw DataError("intermediate vector has length " + std::to_string(v.size()), i + 2);
      for (std::size_t k = 0; k < v.size(); ++k)
        if (!std::isfinite(v[k])) throw DataError("non-finite feature", i + 2, feat_column_name(k));
    }
  }
}

bool FeatureTable::has_intermediate() const noexcept {
  return !rows_.empty() && std::all_of(rows_.begin(), rows_.end(), [](const FeatureRow& r) {
    return r.features.intermediate.has_value();
  });
}

const FeatureRow* FeatureTable::find(std::string_view image_id) const {
  const auto it = index_.find(image_id);
  return it == index_.end() ? nullptr : &rows_[it->second];
}

const FeatureRow& FeatureTable::at(std::string_view image_id) const {
  const auto* row = find(image_id);
  if (!row) throw DataError("unknown image_id '" + std::string(image_id) + "'");
  return *row;
}

FeatureTable parse_features(std::istream& in, const std::string& source) {
  std::string line;
  if (!detail::read_line(in, line)) throw DataError(source + ": missing header row", 1);

  const auto header = detail::split_fields(line);
  const std::size_t base = kMetaColumns + kNumTasks;
  if (header.size() != base && header.size() != base + kIntermediateDim)
    fail(source, 1, "", "expected " + std::to_string(base) + " or " +
                            std::to_string(base + kIntermediateDim) + " columns, found " +
                            std::to_string(header.size()));
  for (std::size_t i = 0; i < kMetaColumns; ++i)
    if (detail::trim(header[i]) != kMetaNames[i])
      fail(source, 1, header[i], "expected column '" + std::string(kMetaNames[i]) + "'");
  for (std::size_t k = 0; k < kNumTasks; ++k) {
    const auto expected = "out_" + std::string(kTaskNames[k]);
    const auto got = detail::trim(header[kMetaColumns + k]);
    if (got != expected) {
      const bool known = got.starts_with("out_") && task_index(got.substr(4));
      fail(source, 1, got,
           known ? "task column out of order, expected '" + expected + "'"
                 : "unknown task column, expected '" + expected + "'");
    }
  }
  const bool with_block = header.size() == base + kIntermediateDim;
  if (with_block)
    for (std::size_t k = 0; k < kIntermediateDim; ++k)
      if (detail::trim(header[base + k]) != feat_column_name(k))
        fail(source, 1, header[base + k], "expected column '" + feat_column_name(k) + "'");

  std::vector<FeatureRow> rows;
  std::unordered_map<std::string, std::size_t> seen;
  std::set<std::pair<std::string, int>> series;
  std::size_t row_no = 1;
  while (detail::read_line(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const auto f = detail::split_fields(line);
    if (f.size() != header.size())
      fail(source, row_no, "", "expected " + std::to_string(header.size()) + " fields, found " +
                                   std::to_string(f.size()));

    FeatureRow row;
    auto& rec = row.record;
    rec.image_id = std::string(detail::trim(f[0]));
    if (rec.image_id.empty()) fail(source, row_no, "image_id", "missing image_id");
    if (auto [it, fresh] = seen.emplace(rec.image_id, row_no); !fresh)
      fail(source, row_no, "image_id",
           "duplicate image_id '" + rec.image_id + "' (first at row " + std::to_string(it->second) + ")");
    rec.patient_id = std::string(detail::trim(f[1]));
    if (rec.patient_id.empty()) fail(source, row_no, "patient_id", "missing patient_id");
    const auto tp = detail::parse_int(f[2]);
    if (!tp || *tp < 0 || *tp > std::numeric_limits<int>::max())
      fail(source, row_no, "timepoint", "expected a non-negative integer, got '" + std::string(f[2]) + "'");
    rec.timepoint = static_cast<int>(*tp);
    if (!series.emplace(rec.patient_id, rec.timepoint).second)
      fail(source, row_no, "timepoint",
           "duplicate timepoint " + std::to_string(rec.timepoint) + " for patient '" + rec.patient_id + "'");
    rec.sex = parse_sex(f[3], source, row_no);
    const auto age_text = detail::trim(f[4]);
    if (!age_text.empty() && lower(age_text) != "na") {
      const double age = parse_finite(age_text, source, row_no, "age");
      if (age < 0) fail(source, row_no, "age", "negative age");
      rec.age = age;
    }
    rec.survival = parse_survival(f[5], source, row_no);

    for (std::size_t k = 0; k < kNumTasks; ++k)
      row.features.outputs[k] =
          parse_finite(f[kMetaColumns + k], source, row_no, detail::trim(header[kMetaColumns + k]));
    if (with_block) {
      std::vector<double> v(kIntermediateDim);
      for (std::size_t k = 0; k < kIntermediateDim; ++k)
        v[k] = parse_finite(f[base + k], source, row_no, detail::trim(header[base + k]));
      row.features.intermediate = std::move(v);
    }
    rows.push_back(std::move(row));
  }
  return FeatureTable(std::move(rows));
}

FeatureTable parse_features(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_features(in, path.string());
}

void write_features(const FeatureTable& table, std::ostream& out) {
  const bool with_block = table.has_intermediate();
  for (auto name : kMetaNames) out << name << (name == kMetaNames.back() ? "" : ",");
  for (auto task : kTaskNames) out << ",out_" << task;
  if (with_block)
    for (std::size_t k = 0; k < kIntermediateDim; ++k) out << ',' << feat_column_name(k);
  out << '\n';
  for (const auto& row : table.rows()) {
    const auto& r = row.record;
    out << r.image_id << ',' << r.patient_id << ',' << r.timepoint << ',' << to_string(r.sex) << ','
        << (r.age ? detail::format_exact(*r.age) : std::string()) << ',' << to_string(r.survival);
    for (double v : row.features.outputs) out << ',' << detail::format_exact(v);
    if (with_block)
      for (double v : *row.features.intermediate) out << ',' << detail::format_exact(v);
    out << '\n';
  }
}

void write_features(const FeatureTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_features(table, out);
}

LabelTable parse_labels(std::istream& in, const std::string& source) {
  static constexpr std::array<std::string_view, 6> kColumns = {
      "image_id", "rater_id", "extent_right", "extent_left", "opacity_right", "opacity_left"};
  std::string line;
  if (!detail::read_line(in, line)) throw DataError(source + ": missing header row", 1);
  const auto header = detail::split_fields(line);
  if (header.size() != kColumns.size())
    fail(source, 1, "", "expected 6 columns, found " + std::to_string(header.size()));
  for (std::size_t i = 0; i < kColumns.size(); ++i)
    if (detail::trim(header[i]) != kColumns[i])
      fail(source, 1, header[i], "expected column '" + std::string(kColumns[i]) + "'");

  LabelTable labels;
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t row_no = 1;
  while (detail::read_line(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const auto f = detail::split_fields(line);
    if (f.size() != kColumns.size())
      fail(source, row_no, "", "expected 6 fields, found " + std::to_string(f.size()));
    RaterScore s;
    s.image_id = std::string(detail::trim(f[0]));
    s.rater_id = std::string(detail::trim(f[1]));
    if (s.image_id.empty()) fail(source, row_no, "image_id", "missing image_id");
    if (s.rater_id.empty()) fail(source, row_no, "rater_id", "missing rater_id");
    if (!seen.emplace(s.image_id, s.rater_id).second)
      fail(source, row_no, "rater_id",
           "duplicate score for image '" + s.image_id + "' by rater '" + s.rater_id + "'");
    const auto score = [&](std::size_t col, int hi) {
      const auto v = detail::parse_int(f[col]);
      if (!v) fail(source, row_no, kColumns[col], "expected an integer, got '" + std::string(f[col]) + "'");
      if (*v < 0 || *v > hi)
        fail(source, row_no, kColumns[col],
             "value " + std::to_string(*v) + " violates constraint 0 <= " + std::string(kColumns[col]) +
                 " <= " + std::to_string(hi));
      return static_cast<int>(*v);
    };
    s.extent_right = score(2, 4);
    s.extent_left = score(3, 4);
    s.opacity_right = score(4, 3);
    s.opacity_left = score(5, 3);
    labels.push_back(std::move(s));
  }
  return labels;
}

LabelTable parse_labels(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_labels(in, path.string());
}

namespace {

double aggregate(std::vector<int> values, AggregationPolicy policy) {
  if (policy == AggregationPolicy::mean) {
    double sum = 0.0;
    for (int v : values) sum += v;
    return sum / static_cast<double>(values.size());
  }
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

std::vector<GroundTruth> aggregate_labels(const LabelTable& labels, AggregationPolicy policy) {
  if (labels.empty()) throw DataError("label table is empty");
  std::vector<std::string> order;
  std::unordered_map<std::string, std::pair<std::vector<int>, std::vector<int>>> totals;
  for (const auto& s : labels) {
    auto [it, fresh] = totals.try_emplace(s.image_id);
    if (fresh) order.push_back(s.image_id);
    it->second.first.push_back(s.extent_total());
    it->second.second.push_back(s.opacity_total());
  }
  std::vector<GroundTruth> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    auto& [extent, opacity] = totals.at(id);
    GroundTruth g;
    g.image_id = id;
    g.n_raters = static_cast<int>(extent.size());
    g.extent = aggregate(std::move(extent), policy);
    g.opacity = aggregate(std::move(opacity), policy);
    out.push_back(std::move(g));
  }
  return out;
}

namespace {

AgeStats age_stats(const std::vector<double>& ages) {
  AgeStats s;
  s.n = ages.size();
  if (ages.empty()) return s;
  double sum = 0.0;
  for (double a : ages) sum += a;
  const double mean = sum / static_cast<double>(ages.size());
  double ss = 0.0;
  for (double a : ages) ss += (a - mean) * (a - mean);
  s.mean = mean;
  s.std = std::sqrt(ss / static_cast<double>(ages.size()));
  return s;
}

}  // namespace

CohortSummary cohort_summary(const FeatureTable& table) {
  CohortSummary s;
  s.n_images = table.size();
  std::set<std::string> patients;
  std::vector<double> ages;
  std::map<Sex, std::vector<double>> by_sex;
  for (const auto& row : table.rows()) {
    const auto& r = row.record;
    patients.insert(r.patient_id);
    switch (r.sex) {
      case Sex::male: ++s.male; break;
      case Sex::female: ++s.female; break;
      default: ++s.sex_unknown; break;
    }
    if (r.age) {
      ages.push_back(*r.age);
      by_sex[r.sex].push_back(*r.age);
    }
  }
  s.n_patients = patients.size();
  s.age = age_stats(ages);
  for (Sex sex : {Sex::male, Sex::female, Sex::unknown}) s.age_by_sex[sex] = age_stats(by_sex[sex]);
  return s;
}

void print_cohort_summary(const CohortSummary& s, std::ostream& out) {
  const auto stat = [](const AgeStats& a) {
    if (!a.mean) return std::string("n/a (no ages)");
    return detail::format_fixed(*a.mean, 1) + " +/- " + detail::format_fixed(*a.std, 1) +
           " (n=" + std::to_string(a.n) + ")";
  };
  out << "images:      " << s.n_images << '\n'
      << "patients:    " << s.n_patients << '\n'
      << "male/female: " << s.male << '/' << s.female << " (unknown " << s.sex_unknown << ")\n"
      << "age:         " << stat(s.age) << '\n';
  for (Sex sex : {Sex::male, Sex::female, Sex::unknown})
    out << "age[" << to_string(sex) << "]: " << stat(s.age_by_sex.at(sex)) << '\n';
  out << "std convention: population (divide by n); missing ages excluded\n";
}

}  // namespace cxrsev
