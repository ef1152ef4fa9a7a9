#ifndef CXRSEV_CLI_HPP
#define CXRSEV_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "cxrsev/core_data.hpp"
#include "cxrsev/rng.hpp"

namespace cxrsev {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Entry point for the `cxrsev` tool. Data goes to `out`, diagnostics to `err`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct ReportConfig {
  std::filesystem::path features;
  std::filesystem::path labels;
  std::filesystem::path out_root = "reports";
  /// Subdirectory name; empty means "report-<UTC timestamp>".
  std::string run_name;
  std::uint64_t seed = kDefaultSeed;
  std::size_t n_reps = 50;
  double ratio = 0.5;
  AggregationPolicy policy = AggregationPolicy::mean;
  double perplexity = 30.0;
  std::size_t tsne_iters = 1000;
  double learning_rate = 200.0;
  unsigned threads = 1;
};

struct ReportOutcome {
  std::filesystem::path dir;
  bool complete = false;  // every step succeeded
};

/// Runs the whole study into one flat output directory:
/// table.md, table.csv, kappa.txt, embedding.csv, scatter.csv,
/// scatter_opacity.csv and manifest.txt. Input parse failures throw
/// DataError before anything is written; later step failures are recorded
/// in the manifest.
ReportOutcome run_all(const ReportConfig& config, std::ostream& log);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace cxrsev

#endif  // CXRSEV_CLI_HPP
