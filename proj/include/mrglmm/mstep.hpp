#pragma once

#include "mrglmm/model.hpp"
#include "mrglmm/objective.hpp"
#include "mrglmm/sampler.hpp"

#include <array>
#include <cstddef>
#include <vector>

namespace mrglmm {

struct MstepConfig {
  double gamma = 1.0;     // factor-balance weight
  double s = 0.0;         // sparsity fraction
  double c0 = 1.0;        // initial curvature constant
  double eps_M = 1e-6;    // stop when every block moves less than this (squared Frobenius)
  int max_inner_iters = 500;
  std::array<double, 3> step_multipliers{1.0, 1.0, 1.0};  // U, V, B

  // Nonzero budget for B: round(s * n^2) per covariate slice, p slices.
  std::size_t budget(int n, int p) const;
  void validate() const;
};

struct GradientBundle {
  MatrixXd dU;
  MatrixXd dV;  // empty in symmetric mode
  CoefTensor dB;
};

double objective_F(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                   const MwgState& state, double gamma, const EntryMask& mask);

GradientBundle gradient(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                        const MwgState& state, double gamma, const EntryMask& mask);

// Keeps the k largest-magnitude entries; ties go to the smaller (j, j', l).
CoefTensor hard_threshold(const CoefTensor& B, std::size_t k);

// One sequential proximal-gradient sweep at a single constant c: U first,
// then V with its gradient taken at the new U, then B at the new (U, V).
struct ProximalStep {
  ModelParams params;
  GradientBundle used;  // gradient each block was moved along
};

ProximalStep proximal_step(const McObjective& objective, const ModelParams& params, double c,
                           const MstepConfig& config);

struct MstepResult {
  ModelParams params;
  double initial = 0.0;       // F at the (thresholded) starting point
  std::vector<double> trace;  // F after each accepted iteration

  // Largest step-to-step increase along initial, trace...; 0 for a monotone run.
  double max_increase() const;
  int iterations = 0;
  bool converged = false;
  std::array<double, 3> final_c{0.0, 0.0, 0.0};
};

MstepResult run_mstep(const ModelParams& params_init, const Family& family, const LongitudinalNetworkDataset& dataset,
                      const MwgState& state, const MstepConfig& config);

MstepResult run_mstep(const McObjective& objective, const ModelParams& params_init, const MstepConfig& config);

// Complete-data maximiser of sigma_e^2 for the Gaussian family (unfloored).
double update_sigma_e2(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                       const MwgState& state, const EntryMask& mask);

}  // namespace mrglmm
