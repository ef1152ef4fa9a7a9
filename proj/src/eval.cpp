#include "cxrsev/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "text_util.hpp"

namespace cxrsev {

SplitPlan grouped_split(std::span<const ImageRecord> records, double ratio, std::uint64_t seed,
                        std::size_t repetition) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw std::invalid_argument("grouped_split: ratio must lie in (0, 1)");

  // Patients in order of first appearance so the shuffle input is stable.
  std::vector<std::string> patients;
  std::unordered_map<std::string, std::size_t> image_count;
  for (const auto& r : records)
    if (image_count[r.patient_id]++ == 0) patients.push_back(r.patient_id);
  if (patients.size() < 2)
    throw std::invalid_argument("grouped_split: need at least 2 distinct patients, found " +
                                std::to_string(patients.size()));

  auto gen = make_stream(seed, repetition);
  shuffle(patients, gen);

  const double goal = ratio * static_cast<double>(records.size());
  std::size_t n_train = 0;
  std::size_t cut = 0;
  while (cut < patients.size() && static_cast<double>(n_train) < goal)
    n_train += image_count[patients[cut++]];

  SplitPlan plan;
  plan.seed = seed;
  plan.repetition = repetition;
  plan.train_patients.assign(patients.begin(), patients.begin() + static_cast<std::ptrdiff_t>(cut));
  plan.test_patients.assign(patients.begin() + static_cast<std::ptrdiff_t>(cut), patients.end());
  if (plan.test_patients.empty()) {
    plan.test_patients.push_back(plan.train_patients.front());
    plan.train_patients.erase(plan.train_patients.begin());
  }

  const std::unordered_set<std::string> train(plan.train_patients.begin(), plan.train_patients.end());
  for (const auto& r : records)
    (train.count(r.patient_id) ? plan.train_images : plan.test_images).push_back(r.image_id);
  return plan;
}

namespace {

void require_same_length(std::span<const double> a, std::span<const double> b, const char* who) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(who) + ": length mismatch (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

double pearson(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "pearson");
  if (a.size() < 2) throw std::invalid_argument("pearson: need at least 2 values");
  if (is_constant(a) || is_constant(b)) return 0.0;
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double r2(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, "r2");
  if (y.size() < 2) throw std::invalid_argument("r2: need at least 2 values");
  const double my = mean_of(y);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - my) * (y[i] - my);
  }
  if (is_constant(y)) throw std::domain_error("r2: undefined for constant truth");
  return 1.0 - ss_res / ss_tot;
}

double mae(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, "mae");
  if (y.empty()) throw std::invalid_argument("mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

double mse(std::span<const double> y, std::span<const double> yhat) {
  require_same_length(y, yhat, "mse");
  if (y.empty()) throw std::invalid_argument("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  out.mean = mean_of(values);
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

MetricsSummary summarize(Target task, FeatureSet fs, std::span<const SplitMetrics> reps) {
  MetricsSummary s;
  s.task = task;
  s.feature_set = fs;
  s.n_params = width(fs) + 1;
  s.n_reps = reps.size();
  std::vector<double> p, r, a, m;
  for (const auto& rep : reps) {
    p.push_back(rep.pearson);
    r.push_back(rep.r2);
    a.push_back(rep.mae);
    m.push_back(rep.mse);
  }
  s.pearson = mean_std(p);
  s.r2 = mean_std(r);
  s.mae = mean_std(a);
  s.mse = mean_std(m);
  return s;
}

namespace {

struct RepOutput {
  SplitMetrics metrics;
  std::vector<ScatterPoint> points;
};

RepOutput run_one(const FeatureTable& features, const std::vector<ImageRecord>& records,
                  const std::unordered_map<std::string, double>& y_of, FeatureSet fs, Target target,
                  const EvalOptions& opt, std::size_t rep) {
  const auto plan = grouped_split(records, opt.ratio, opt.seed, rep);
  const auto targets = [&](const std::vector<std::string>& ids) {
    Vector y(static_cast<Eigen::Index>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) y(static_cast<Eigen::Index>(i)) = y_of.at(ids[i]);
    return y;
  };
  const Vector y_train = targets(plan.train_images);
  const Vector y_test = targets(plan.test_images);
  const auto model = fit_ols(design_matrix(features, fs, plan.train_images), y_train, fs, target);
  const Vector yhat = predict(model, design_matrix(features, fs, plan.test_images));

  const std::span<const double> y(y_test.data(), static_cast<std::size_t>(y_test.size()));
  const std::span<const double> h(yhat.data(), static_cast<std::size_t>(yhat.size()));
  RepOutput out;
  out.metrics = {rep, plan.train_images.size(), plan.test_images.size(),
                 pearson(h, y), r2(y, h), mae(y, h), mse(y, h)};
  if (rep == 0)
    for (std::size_t i = 0; i < plan.test_images.size(); ++i)
      out.points.push_back({plan.test_images[i], y[i], h[i]});
  return out;
}

}  // namespace

EvalResult run_repeated_eval(const FeatureTable& features, std::span<const GroundTruth> truth,
                             FeatureSet fs, Target target, const EvalOptions& options) {
  if (options.n_reps == 0) throw std::invalid_argument("run_repeated_eval: n_reps must be >= 1");
  std::vector<ImageRecord> records;
  std::unordered_map<std::string, double> y_of;
  for (const auto& g : truth) {
    const auto* row = features.find(g.image_id);
    if (!row) throw DataError("labeled image '" + g.image_id + "' has no feature row");
    if (!y_of.emplace(g.image_id, g.value(target)).second)
      throw DataError("duplicate ground truth for image '" + g.image_id + "'");
    records.push_back(row->record);
  }
  if (fs == FeatureSet::intermediate1024)
    for (const auto& r : records)
      if (!features.at(r.image_id).features.intermediate)
        throw DataError("image '" + r.image_id + "' has no intermediate feature block");

  std::vector<RepOutput> outputs(options.n_reps);
  const unsigned workers = std::max(1u, std::min<unsigned>(options.threads,
                                                           static_cast<unsigned>(options.n_reps)));
  if (workers == 1) {
    for (std::size_t r = 0; r < options.n_reps; ++r)
      outputs[r] = run_one(features, records, y_of, fs, target, options, r);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          try {
            for (std::size_t r = w; r < options.n_reps; r += workers)
              outputs[r] = run_one(features, records, y_of, fs, target, options, r);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalResult result;
  for (auto& o : outputs) result.per_rep.push_back(o.metrics);
  result.scatter = std::move(outputs.front().points);
  result.summary = summarize(target, fs, result.per_rep);
  return result;
}

namespace {

std::string render(const MeanStd& m) {
  auto s = detail::format_fixed(m.mean, 2);
  if (m.std) s += "±" + detail::format_fixed(*m.std, 2);
  return s;
}

std::string params_label(FeatureSet fs) { return std::to_string(width(fs)) + "+1"; }

}  // namespace

void emit_table(std::span<const TableEntry> entries, TableFormat format, std::ostream& out) {
  std::vector<TableEntry> rows(entries.begin(), entries.end());
  std::stable_sort(rows.begin(), rows.end(), [](const TableEntry& a, const TableEntry& b) {
    // opacity first, as in the published layout
    const int ta = a.task == Target::opacity ? 0 : 1;
    const int tb = b.task == Target::opacity ? 0 : 1;
    if (ta != tb) return ta < tb;
    return width(a.feature_set) < width(b.feature_set);
  });

  if (format == TableFormat::markdown) {
    out << "| Task | Features | # params | Pearson | R2 | MAE | MSE |\n"
        << "|---|---|---|---|---|---|---|\n";
    for (const auto& e : rows) {
      out << "| " << to_string(e.task) << " | " << to_string(e.feature_set) << " | "
          << params_label(e.feature_set) << " | ";
      if (e.summary) {
        const auto& s = *e.summary;
        out << render(s.pearson) << " | " << render(s.r2) << " | " << render(s.mae) << " | "
            << render(s.mse) << " |\n";
      } else {
        out << "skipped: " << e.skipped_reason << " | | | |\n";
      }
    }
    return;
  }

  out << "task,features,n_params,n_reps,pearson_mean,pearson_std,r2_mean,r2_std,mae_mean,mae_std,"
         "mse_mean,mse_std,note\n";
  const auto cells = [](const MeanStd& m) {
    return detail::format_fixed(m.mean, 2) + "," + (m.std ? detail::format_fixed(*m.std, 2) : "");
  };
  for (const auto& e : rows) {
    out << to_string(e.task) << ',' << to_string(e.feature_set) << ',' << width(e.feature_set) + 1 << ',';
    if (e.summary) {
      const auto& s = *e.summary;
      out << s.n_reps << ',' << cells(s.pearson) << ',' << cells(s.r2) << ',' << cells(s.mae) << ','
          << cells(s.mse) << ",\n";
    } else {
      out << "0,,,,,,,,,skipped: " << e.skipped_reason << '\n';
    }
  }
}

void emit_table(std::span<const MetricsSummary> summaries, TableFormat format, std::ostream& out) {
  std::vector<TableEntry> entries;
  for (const auto& s : summaries) entries.push_back({s.task, s.feature_set, s, {}});
  emit_table(entries, format, out);
}

void export_scatter(std::span<const ScatterPoint> points, std::ostream& out) {
  if (points.empty()) throw std::invalid_argument("export_scatter: no predictions");
  out << "image_id,truth,prediction,abs_error\n";
  for (const auto& p : points)
    out << p.image_id << ',' << detail::format_exact(p.truth) << ','
        << detail::format_exact(p.prediction) << ',' << detail::format_exact(std::abs(p.truth - p.prediction))
        << '\n';
}

void export_scatter(std::span<const GroundTruth> truth, std::span<const ScatterPoint> predictions,
                    Target target, std::ostream& out) {
  std::unordered_map<std::string, double> y_of;
  for (const auto& g : truth) y_of.emplace(g.image_id, g.value(target));
  std::vector<ScatterPoint> joined;
  for (const auto& p : predictions) {
    const auto it = y_of.find(p.image_id);
    if (it == y_of.end()) throw DataError("prediction for image '" + p.image_id + "' has no ground truth");
    joined.push_back({p.image_id, it->second, p.prediction});
  }
  export_scatter(joined, out);
}

void export_per_rep(std::span<const SplitMetrics> reps, std::ostream& out) {
  out << "repetition,n_train,n_test,pearson,r2,mae,mse\n";
  for (const auto& r : reps)
    out << r.repetition << ',' << r.n_train << ',' << r.n_test << ',' << detail::format_exact(r.pearson)
        << ',' << detail::format_exact(r.r2) << ',' << detail::format_exact(r.mae) << ','
        << detail::format_exact(r.mse) << '\n';
}

}  // namespace cxrsev
