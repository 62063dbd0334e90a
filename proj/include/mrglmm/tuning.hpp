#pragma once

#include "mrglmm/mcem.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace mrglmm {

struct TuningGrid {
  std::vector<int> r_candidates{1, 2, 3, 4};
  std::vector<double> s_candidates{0.01, 0.02, 0.05, 0.08, 0.1};
  double C = 0.5;

  void validate() const;
};

struct TuningCell {
  int stage = 1;
  int r = 0;
  double s = 0.0;
  double ebic = 0.0;        // +inf when the fit failed
  double loglik_hat = 0.0;
  std::size_t nonzeros = 0;
  int iterations = 0;
  bool converged = false;
  double inner_max_increase = 0.0;  // worst M-step objective increase over the fit
  std::string status = "ok";
};

// -2 l + [log(n^2 N) + C log(n^2 (p + 1))] * (2 n r + coef_dof)
double ebic(double loglik, int n, int N, int p, int r, double coef_dof, double C = 0.5);

// Same, with the nominal sparsity dof s * p * n^2.
double ebic_nominal(double loglik, int n, int N, int p, int r, double s, double C = 0.5);

struct RankSelection {
  int r_star = 0;
  std::vector<TuningCell> trace;
  std::vector<ModelParams> fits;  // parallel to trace; empty params when failed
};

struct SparsitySelection {
  double s_star = 0.0;
  std::vector<TuningCell> trace;
  ModelParams selected;
};

// Stage 1: s = 0 (B held at zero), EBIC over the rank grid; ties go to the smaller r.
RankSelection select_rank(const LongitudinalNetworkDataset& dataset, const Family& family, const TuningGrid& grid,
                          const McemConfig& config);

// Stage 2: rank fixed at r_star, EBIC over the sparsity grid, each fit warm
// started from `warm` (the stage-1 fit at r_star) when given.
SparsitySelection select_sparsity(const LongitudinalNetworkDataset& dataset, const Family& family, int r_star,
                                  const TuningGrid& grid, const McemConfig& config, const ModelParams* warm);

struct TuningReport {
  std::vector<TuningCell> stage1;
  std::vector<TuningCell> stage2;
  int r_star = 0;
  double s_star = 0.0;
  ModelParams selected;
};

TuningReport tune(const LongitudinalNetworkDataset& dataset, const Family& family, const TuningGrid& grid,
                  const McemConfig& config);

}  // namespace mrglmm
