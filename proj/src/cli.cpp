#include "cxrsev/cli.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "cxrsev/agreement.hpp"
#include "cxrsev/embed.hpp"
#include "cxrsev/eval.hpp"
#include "cxrsev/regress.hpp"
#include "cxrsev/saliency.hpp"
#include "text_util.hpp"

namespace cxrsev {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest init failed");
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  return out;
}

std::vector<std::string> image_ids(const std::vector<GroundTruth>& truth) {
  std::vector<std::string> ids;
  for (const auto& g : truth) ids.push_back(g.image_id);
  return ids;
}

/// Ground truth restricted to images present in the feature table.
std::vector<GroundTruth> labeled_with_features(const FeatureTable& features,
                                               const std::vector<GroundTruth>& truth) {
  std::vector<GroundTruth> out;
  for (const auto& g : truth)
    if (features.find(g.image_id)) out.push_back(g);
  return out;
}

RegressionModel fit_on_all(const FeatureTable& features, const std::vector<GroundTruth>& truth,
                           FeatureSet fs, Target target) {
  const auto ids = image_ids(truth);
  Vector y(static_cast<Eigen::Index>(truth.size()));
  for (std::size_t i = 0; i < truth.size(); ++i) y(static_cast<Eigen::Index>(i)) = truth[i].value(target);
  return fit_ols(design_matrix(features, fs, ids), y, fs, target);
}

std::string kappa_line(const LabelTable& labels, Target scale) {
  const auto m = ratings_from_labels(labels, scale);
  const double k = fleiss_kappa(m);
  return "kappa(" + std::string(to_string(scale)) + ") = " + detail::format_fixed(k, 3) +
         "  N=" + std::to_string(m.n_items()) + " n_raters=" + std::to_string(m.n_raters) +
         " C=" + std::to_string(m.n_categories());
}

struct TsneOutput {
  std::vector<EmbeddingRow> rows;
  TsneResult result;
};

TsneOutput embed_all(const FeatureTable& features, const TsneParams& params,
                     const std::optional<RegressionModel>& model) {
  std::vector<std::string> ids;
  std::vector<ImageRecord> records;
  for (const auto& r : features.rows()) {
    ids.push_back(r.record.image_id);
    records.push_back(r.record);
  }
  TsneOutput out;
  out.result = tsne(design_matrix(features, FeatureSet::pneumonia4, ids), params);
  std::optional<Vector> predictions;
  if (model) predictions = predict(*model, design_matrix(features, model->feature_set, ids));
  out.rows = join_embedding(out.result.coords, records, predictions);
  return out;
}

std::string utc_stamp(const char* fmt) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

std::string policy_name(AggregationPolicy p) { return p == AggregationPolicy::mean ? "mean" : "median"; }

}  // namespace

ReportOutcome run_all(const ReportConfig& cfg, std::ostream& log) {
  const auto features = parse_features(cfg.features);
  const auto labels = parse_labels(cfg.labels);
  const auto truth = labeled_with_features(features, aggregate_labels(labels, cfg.policy));
  if (truth.size() < aggregate_labels(labels, cfg.policy).size())
    log << "warning: " << aggregate_labels(labels, cfg.policy).size() - truth.size()
        << " labeled image(s) have no feature row and are ignored\n";

  ReportOutcome outcome;
  auto name = cfg.run_name.empty() ? "report-" + utc_stamp("%Y%m%dT%H%M%SZ") : cfg.run_name;
  outcome.dir = cfg.out_root / name;
  for (int k = 1; std::filesystem::exists(outcome.dir); ++k)
    outcome.dir = cfg.out_root / (name + "-" + std::to_string(k));
  std::filesystem::create_directories(outcome.dir);

  std::vector<std::pair<std::string, std::string>> steps;
  const auto record = [&](const std::string& step, const std::string& status) {
    steps.emplace_back(step, status);
    if (status != "ok") log << step << ": " << status << '\n';
  };

  EvalOptions opt;
  opt.n_reps = cfg.n_reps;
  opt.ratio = cfg.ratio;
  opt.seed = cfg.seed;
  opt.threads = cfg.threads;

  std::vector<TableEntry> entries;
  std::map<Target, std::vector<ScatterPoint>> scatter;
  bool table_ok = true;
  for (Target task : {Target::opacity, Target::extent}) {
    for (FeatureSet fs : kAllFeatureSets) {
      TableEntry e{task, fs, std::nullopt, {}};
      if (fs == FeatureSet::intermediate1024 && !features.has_intermediate()) {
        e.skipped_reason = "features absent";
      } else {
        try {
          auto res = run_repeated_eval(features, truth, fs, task, opt);
          e.summary = res.summary;
          if (fs == FeatureSet::opacity1) scatter[task] = std::move(res.scatter);
        } catch (const std::exception& ex) {
          e.skipped_reason = std::string("error: ") + ex.what();
          table_ok = false;
        }
      }
      entries.push_back(std::move(e));
    }
  }
  {
    auto md = open_output(outcome.dir / "table.md");
    emit_table(entries, TableFormat::markdown, md);
    auto csv = open_output(outcome.dir / "table.csv");
    emit_table(entries, TableFormat::csv, csv);
  }
  record("table", table_ok ? "ok" : "failed: one or more evaluations errored (see table.md)");

  for (const auto& [task, file] : {std::pair{Target::extent, "scatter.csv"}, std::pair{Target::opacity, "scatter_opacity.csv"}}) {
    try {
      auto out = open_output(outcome.dir / file);
      export_scatter(scatter[task], out);
      record(std::string("scatter.") + std::string(to_string(task)), "ok");
    } catch (const std::exception& ex) {
      record(std::string("scatter.") + std::string(to_string(task)), std::string("failed: ") + ex.what());
    }
  }

  {
    std::ostringstream text;
    bool ok = true;
    for (Target scale : {Target::opacity, Target::extent}) {
      try {
        text << kappa_line(labels, scale) << '\n';
      } catch (const std::exception& ex) {
        text << "kappa(" << to_string(scale) << ") unavailable: " << ex.what() << '\n';
        ok = false;
      }
    }
    auto out = open_output(outcome.dir / "kappa.txt");
    out << text.str();
    record("kappa", ok ? "ok" : "failed: see kappa.txt");
  }

  TsneParams tp;
  tp.seed = cfg.seed;
  tp.n_iter = cfg.tsne_iters;
  tp.perplexity = cfg.perplexity;
  tp.learning_rate = cfg.learning_rate;
  const double limit = (static_cast<double>(features.size()) - 1.0) / 3.0;
  if (tp.perplexity >= limit) {
    // small tables: largest feasible integer-ish perplexity
    tp.perplexity = std::max(limit - 0.5, 0.5 * limit);
    log << "tsne: perplexity lowered to " << detail::format_fixed(tp.perplexity, 3) << " for "
        << features.size() << " images\n";
  }
  try {
    std::optional<RegressionModel> model;
    if (!truth.empty()) model = fit_on_all(features, truth, FeatureSet::opacity1, Target::extent);
    const auto emb = embed_all(features, tp, model);
    auto out = open_output(outcome.dir / "embedding.csv");
    export_embedding(emb.rows, out);
    record("tsne", "ok");
  } catch (const std::exception& ex) {
    record("tsne", std::string("failed: ") + ex.what());
  }

  outcome.complete = std::all_of(steps.begin(), steps.end(), [](const auto& s) { return s.second == "ok"; });
  auto manifest = open_output(outcome.dir / "manifest.txt");
  manifest << "tool=cxrsev report\n"
           << "created=" << utc_stamp("%Y-%m-%dT%H:%M:%SZ") << '\n'
           << "features=" << cfg.features.string() << '\n'
           << "features.sha256=" << sha256_file(cfg.features) << '\n'
           << "labels=" << cfg.labels.string() << '\n'
           << "labels.sha256=" << sha256_file(cfg.labels) << '\n'
           << "seed=" << cfg.seed << '\n'
           << "reps=" << cfg.n_reps << '\n'
           << "ratio=" << detail::format_exact(cfg.ratio) << '\n'
           << "policy=" << policy_name(cfg.policy) << '\n'
           << "tsne.seed=" << tp.seed << '\n'
           << "tsne.perplexity=" << detail::format_exact(tp.perplexity) << '\n'
           << "tsne.iters=" << tp.n_iter << '\n'
           << "tsne.learning_rate=" << detail::format_exact(tp.learning_rate) << '\n'
           << "tsne.model=opacity1/extent fit on all labeled images\n";
  for (const auto& [step, status] : steps) manifest << "step." << step << '=' << status << '\n';
  manifest << "status=" << (outcome.complete ? "complete" : "partial") << '\n';
  return outcome;
}

namespace {

struct Options {
  std::string features, labels, model, out, grads_dir, image_id, out_dir, run_name, per_rep, scatter;
  std::string feature_set = "opacity1", target = "extent", policy = "mean", format = "markdown",
              scale = "both";
  std::uint64_t seed = kDefaultSeed;
  std::size_t reps = 50;
  double ratio = 0.5;
  double perplexity = 30.0;
  double learning_rate = 200.0;
  std::size_t iters = 1000;
  double sigma = 1.0;
  bool abs = false;
  unsigned threads = 1;
};

FeatureSet feature_set_of(const Options& o) { return *parse_feature_set(o.feature_set); }
Target target_of(const Options& o) { return *parse_target(o.target); }
AggregationPolicy policy_of(const Options& o) { return *parse_policy(o.policy); }

void write_or_print(const std::string& path, std::ostream& out, const auto& writer) {
  if (path.empty() || path == "-") {
    writer(out);
  } else {
    auto f = open_output(path);
    writer(f);
  }
}

std::vector<GroundTruth> load_truth(const Options& o, const FeatureTable& features, std::ostream& err) {
  const auto all = aggregate_labels(parse_labels(std::filesystem::path(o.labels)), policy_of(o));
  auto truth = labeled_with_features(features, all);
  if (truth.size() != all.size()) {
    for (const auto& g : all)
      if (!features.find(g.image_id)) throw DataError("labeled image '" + g.image_id + "' has no feature row");
  }
  if (truth.empty()) err << "warning: no labeled images\n";
  return truth;
}

int cmd_validate(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.features.empty() && o.labels.empty()) {
    err << "validate: give --features and/or --labels\n";
    return kExitUsage;
  }
  std::optional<FeatureTable> features;
  if (!o.features.empty()) {
    features = parse_features(std::filesystem::path(o.features));
    out << o.features << ": " << features->size() << " images, "
        << cohort_summary(*features).n_patients << " patients, intermediate block "
        << (features->has_intermediate() ? "present" : "absent") << '\n';
  }
  if (!o.labels.empty()) {
    const auto labels = parse_labels(std::filesystem::path(o.labels));
    const auto truth = aggregate_labels(labels);
    out << o.labels << ": " << labels.size() << " rater rows, " << truth.size() << " images\n";
    if (features) {
      std::size_t missing = 0;
      for (const auto& g : truth)
        if (!features->find(g.image_id)) {
          err << o.labels << ": labeled image '" << g.image_id << "' has no feature row\n";
          ++missing;
        }
      if (missing) return kExitData;
    }
  }
  return kExitOk;
}

int cmd_cohort(const Options& o, std::ostream& out) {
  print_cohort_summary(cohort_summary(parse_features(std::filesystem::path(o.features))), out);
  return kExitOk;
}

int cmd_fit(const Options& o, std::ostream& out, std::ostream& err) {
  const auto features = parse_features(std::filesystem::path(o.features));
  const auto truth = load_truth(o, features, err);
  if (truth.empty()) throw DataError("no labeled images to fit");
  const auto model = fit_on_all(features, truth, feature_set_of(o), target_of(o));
  write_or_print(o.out, out, [&](std::ostream& s) { save_model(model, s); });
  return kExitOk;
}

int cmd_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto features = parse_features(std::filesystem::path(o.features));
  const auto truth = load_truth(o, features, err);
  EvalOptions opt;
  opt.n_reps = o.reps;
  opt.ratio = o.ratio;
  opt.seed = o.seed;
  opt.threads = o.threads;
  const auto res = run_repeated_eval(features, truth, feature_set_of(o), target_of(o), opt);
  const std::vector<MetricsSummary> rows{res.summary};
  emit_table(rows, o.format == "csv" ? TableFormat::csv : TableFormat::markdown, out);
  if (!o.per_rep.empty()) {
    auto f = open_output(o.per_rep);
    export_per_rep(res.per_rep, f);
  }
  if (!o.scatter.empty()) {
    auto f = open_output(o.scatter);
    export_scatter(res.scatter, f);
  }
  return kExitOk;
}

int cmd_kappa(const Options& o, std::ostream& out) {
  const auto labels = parse_labels(std::filesystem::path(o.labels));
  if (o.scale != "opacity") out << kappa_line(labels, Target::extent) << '\n';
  if (o.scale != "extent") out << kappa_line(labels, Target::opacity) << '\n';
  return kExitOk;
}

int cmd_tsne(const Options& o, std::ostream& out, std::ostream& err) {
  const auto features = parse_features(std::filesystem::path(o.features));
  TsneParams p;
  p.perplexity = o.perplexity;
  p.n_iter = o.iters;
  p.seed = o.seed;
  p.learning_rate = o.learning_rate;
  std::optional<RegressionModel> model;
  if (!o.model.empty()) model = load_model(std::filesystem::path(o.model));
  try {
    validate(p, features.size());
  } catch (const std::invalid_argument& ex) {
    throw DataError(ex.what());
  }
  const auto emb = embed_all(features, p, model);
  err << "tsne: N=" << features.size() << " KL after exaggeration "
      << detail::format_fixed(emb.result.kl_after_exaggeration, 4) << ", final "
      << detail::format_fixed(emb.result.kl_final, 4) << '\n';
  write_or_print(o.out, out, [&](std::ostream& s) { export_embedding(emb.rows, s); });
  return kExitOk;
}

int cmd_saliency(const Options& o, std::ostream& out, std::ostream& err) {
  const auto model = load_model(std::filesystem::path(o.model));
  const auto grads = load_rasters_for(model, o.grads_dir, o.image_id);
  auto map = compose_saliency(model, grads);
  if (o.abs) map = absolute(std::move(map));
  const auto rendered = render_saliency(gaussian_blur_5x5(map, o.sigma));
  if (rendered.constant) err << "warning: saliency map for '" << o.image_id << "' is constant; rendered as uniform 128\n";
  write_or_print(o.out, out, [&](std::ostream& s) { write_pgm(rendered.image, s); });
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  ReportConfig cfg;
  cfg.features = o.features;
  cfg.labels = o.labels;
  cfg.out_root = o.out_dir;
  cfg.run_name = o.run_name;
  cfg.seed = o.seed;
  cfg.n_reps = o.reps;
  cfg.ratio = o.ratio;
  cfg.policy = policy_of(o);
  cfg.perplexity = o.perplexity;
  cfg.tsne_iters = o.iters;
  cfg.learning_rate = o.learning_rate;
  cfg.threads = o.threads;
  const auto res = run_all(cfg, err);
  out << res.dir.string() << '\n';
  return res.complete ? kExitOk : kExitData;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Severity-score linear probes on frozen chest X-ray features", "cxrsev"};
  app.require_subcommand(1);
  Options o;

  const auto seed_opt = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "master seed")->capture_default_str();
  };
  const auto eval_opts = [&](CLI::App* c) {
    c->add_option("--reps", o.reps, "repetitions")->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--ratio", o.ratio, "train image fraction")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    c->add_option("--threads", o.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    seed_opt(c);
  };
  const auto policy_opt = [&](CLI::App* c) {
    c->add_option("--policy", o.policy, "rater aggregation")->capture_default_str()->check(CLI::IsMember({"mean", "median"}));
  };
  const std::vector<std::string> fs_names = {"none", "opacity1", "pneumonia4", "all18", "intermediate1024"};

  auto* validate_cmd = app.add_subcommand("validate", "check feature and label files");
  validate_cmd->add_option("--features", o.features)->check(CLI::ExistingFile);
  validate_cmd->add_option("--labels", o.labels)->check(CLI::ExistingFile);

  auto* cohort_cmd = app.add_subcommand("cohort", "cohort demographics");
  cohort_cmd->add_option("--features", o.features)->required()->check(CLI::ExistingFile);

  auto* fit_cmd = app.add_subcommand("fit", "fit a probe on every labeled image");
  fit_cmd->add_option("--features", o.features)->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--labels", o.labels)->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--feature-set", o.feature_set)->capture_default_str()->check(CLI::IsMember(fs_names));
  fit_cmd->add_option("--target", o.target)->capture_default_str()->check(CLI::IsMember({"extent", "opacity"}));
  fit_cmd->add_option("--out", o.out, "model file (default: stdout)");
  policy_opt(fit_cmd);

  auto* eval_cmd = app.add_subcommand("evaluate", "repeated patient-grouped evaluation");
  eval_cmd->add_option("--features", o.features)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--labels", o.labels)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--feature-set", o.feature_set)->capture_default_str()->check(CLI::IsMember(fs_names));
  eval_cmd->add_option("--target", o.target)->capture_default_str()->check(CLI::IsMember({"extent", "opacity"}));
  eval_cmd->add_option("--format", o.format)->capture_default_str()->check(CLI::IsMember({"markdown", "csv"}));
  eval_cmd->add_option("--per-rep", o.per_rep, "write per-repetition metrics here");
  eval_cmd->add_option("--scatter", o.scatter, "write repetition-0 held-out predictions here");
  policy_opt(eval_cmd);
  eval_opts(eval_cmd);

  auto* kappa_cmd = app.add_subcommand("kappa", "Fleiss' kappa of rater totals");
  kappa_cmd->add_option("--labels", o.labels)->required()->check(CLI::ExistingFile);
  kappa_cmd->add_option("--scale", o.scale)->capture_default_str()->check(CLI::IsMember({"extent", "opacity", "both"}));

  auto* tsne_cmd = app.add_subcommand("tsne", "t-SNE of the four pneumonia outputs");
  tsne_cmd->add_option("--features", o.features)->required()->check(CLI::ExistingFile);
  tsne_cmd->add_option("--model", o.model, "probe used for the predicted_extent column")->check(CLI::ExistingFile);
  tsne_cmd->add_option("--perplexity", o.perplexity)->capture_default_str()->check(CLI::PositiveNumber);
  tsne_cmd->add_option("--iters", o.iters)->capture_default_str()->check(CLI::PositiveNumber);
  tsne_cmd->add_option("--learning-rate", o.learning_rate)->capture_default_str()->check(CLI::PositiveNumber);
  tsne_cmd->add_option("--out", o.out, "embedding file (default: stdout)");
  seed_opt(tsne_cmd);

  auto* sal_cmd = app.add_subcommand("saliency", "compose, blur and render a saliency map");
  sal_cmd->add_option("--model", o.model)->required()->check(CLI::ExistingFile);
  sal_cmd->add_option("--grads-dir", o.grads_dir, "directory of <image_id>/<task>.xgrd")->required()->check(CLI::ExistingDirectory);
  sal_cmd->add_option("--image-id", o.image_id)->required();
  sal_cmd->add_option("--sigma", o.sigma)->capture_default_str()->check(CLI::PositiveNumber);
  sal_cmd->add_flag("--abs", o.abs, "take absolute value before blurring");
  sal_cmd->add_option("--out", o.out, "PGM output (default: stdout)")->required();

  auto* report_cmd = app.add_subcommand("report", "run the full study into a dated directory");
  report_cmd->add_option("--features", o.features)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--labels", o.labels)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out-dir", o.out_dir, "parent of the run directory")->required();
  report_cmd->add_option("--name", o.run_name, "run directory name (default: report-<UTC time>)");
  report_cmd->add_option("--perplexity", o.perplexity)->capture_default_str()->check(CLI::PositiveNumber);
  report_cmd->add_option("--iters", o.iters, "t-SNE iterations")->capture_default_str()->check(CLI::PositiveNumber);
  report_cmd->add_option("--learning-rate", o.learning_rate, "t-SNE step size")->capture_default_str()->check(CLI::PositiveNumber);
  policy_opt(report_cmd);
  eval_opts(report_cmd);

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return kExitUsage;
  }

  try {
    if (*validate_cmd) return cmd_validate(o, out, err);
    if (*cohort_cmd) return cmd_cohort(o, out);
    if (*fit_cmd) return cmd_fit(o, out, err);
    if (*eval_cmd) return cmd_evaluate(o, out, err);
    if (*kappa_cmd) return cmd_kappa(o, out);
    if (*tsne_cmd) return cmd_tsne(o, out, err);
    if (*sal_cmd) return cmd_saliency(o, out, err);
    if (*report_cmd) return cmd_report(o, out, err);
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace cxrsev
