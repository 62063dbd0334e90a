#pragma once

#include "mrglmm/mcem.hpp"
#include "mrglmm/tuning.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mrglmm {

struct SimDesign {
  int n = 30;
  int p = 5;
  int N = 200;
  int T = 5;
  int r = 2;
  double s = 0.1;
  Family family = Family::gaussian();
  double theta_var = 4.0;
  double noise_var = 0.25;  // linear family only
  double b_value = 2.0;
  int replicates = 100;
  std::uint64_t master_seed = 1;
  // Place exactly round(s n^2) p nonzeros instead of independent Bernoulli(s) draws.
  bool exact_sparsity = false;
  DiagonalPolicy diagonal_policy = DiagonalPolicy::include;

  void validate() const;
};

struct SimInstance {
  LongitudinalNetworkDataset dataset;
  ModelParams truth;  // Theta = U U^T stored with V = U
};

// All randomness comes from counter streams keyed by (master_seed, replicate).
SimInstance generate(const SimDesign& design, int replicate);

struct MetricRow {
  double theta_err = 0.0;
  double b_err = 0.0;
  double sensitivity = 1.0;
  double specificity = 1.0;
  bool sensitivity_by_convention = false;  // truth B had no nonzeros
};

MetricRow evaluate(const ModelParams& fit, const ModelParams& truth);

struct ReplicateRow {
  int replicate = 0;
  std::string status = "ok";
  MetricRow metrics;
  double wall_time = 0.0;
  double inner_max_increase = 0.0;  // in-memory diagnostic, not written to CSV
};

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample sd, divisor n - 1; 0 for a single row
};

struct TableSummary {
  int ok = 0;
  int failed = 0;
  MetricSummary theta_err;
  MetricSummary b_err;
  MetricSummary sensitivity;
  MetricSummary specificity;
};

// Rows whose status is not "ok" are excluded and counted in `failed`.
TableSummary aggregate(const std::vector<ReplicateRow>& rows);

struct TableOptions {
  McemConfig mcem;               // r, s and the seed are set per replicate
  bool tuned = false;            // EBIC two-stage search instead of the design (r, s)
  TuningGrid grid;
  bool oracle_sigma_theta = true;  // fit with Sigma_theta = theta_var
  DiagonalPolicy fit_diagonal_policy = DiagonalPolicy::include;
  std::string out_dir;           // empty: keep results in memory only
  bool force = false;
  std::string config_hash;
};

struct TableResult {
  std::vector<ReplicateRow> rows;  // replicate order
  TableSummary summary;
  int skipped = 0;                 // replicates already present on disk
};

// Per-replicate seed for the E-step sampler.
std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate);

// generate -> fit (or tune) -> evaluate for every replicate. With out_dir set,
// replicates.csv is appended one row at a time and rows already present are
// kept unless `force`; summary.csv is rewritten from all rows.
TableResult run_table(const SimDesign& design, const TableOptions& options);

// Parses replicates.csv written by run_table (header comment lines allowed).
std::vector<ReplicateRow> read_replicate_rows(const std::string& path, std::string* header_comment = nullptr);

}  // namespace mrglmm
