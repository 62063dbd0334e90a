#pragma once

#include "mrglmm/model.hpp"
#include "mrglmm/mstep.hpp"
#include "mrglmm/sampler.hpp"

#include <string>
#include <vector>

namespace mrglmm {

enum class SigmaThetaMode { fixed, moment_refresh };

struct McemConfig {
  int r = 2;
  MwgConfig mwg;
  MstepConfig mstep;
  double eps_EM = 1e-4;       // relative objective change
  int stable_iters = 3;       // consecutive sub-tolerance changes to stop
  int max_outer_iters = 100;
  FactorMode mode = FactorMode::asymmetric;
  bool sigma_e2_update = true;
  SigmaThetaMode sigma_theta_mode = SigmaThetaMode::fixed;
  double sigma_theta = 1.0;   // used when sigma_theta_matrix is empty
  MatrixXd sigma_theta_matrix;
  int quad_points = 20;

  MatrixXd sigma_theta_for(int n) const;
  void validate(int n) const;
};

struct IterationRecord {
  double q1 = 0.0;
  double q2 = 0.0;
  double penalized = 0.0;  // q1 + q2 + balance penalty
  double loglik_hat = 0.0; // Gauss-Hermite observed log-likelihood at the M-step output
  double observed = 0.0;   // -loglik_hat + balance penalty; drives convergence and best-iterate choice
  double sigma_e2 = 0.0;
  double acceptance = 0.0;
  int inner_iterations = 0;
  bool inner_converged = false;
  double inner_max_increase = 0.0;  // 0 when the M-step trace never went up
};

struct FitReport {
  ModelParams params;                 // best-objective iterate
  std::vector<IterationRecord> trace;
  double loglik_hat = 0.0;
  bool converged = false;
  int iterations = 0;
  int best_iteration = 0;
  double wall_time = 0.0;
  double mean_acceptance = 0.0;
  std::vector<std::string> warnings;
};

// Rank-r truncated SVD of g(mean response); U = U0 S^1/2, V = V0 S^1/2, B = 0.
ModelParams initialize(const LongitudinalNetworkDataset& dataset, const Family& family, int r,
                       const MatrixXd& Sigma_theta);

// MCEM from the SVD start, or from `warm_start` when given.
FitReport fit(const LongitudinalNetworkDataset& dataset, const Family& family, const McemConfig& config,
              const ModelParams* warm_start = nullptr);

// Symmetric start from an asymmetric fit: Lambda_kk = sign(U_k . V_k),
// U = (U + V Lambda) / 2, B carried over.
ModelParams symmetric_start(const ModelParams& asym_fit, std::vector<std::string>* warnings = nullptr);

FitReport refine_symmetric(const LongitudinalNetworkDataset& dataset, const Family& family, const McemConfig& config,
                           const ModelParams& asym_fit);

// Observed log-likelihood by per-entry adaptive Gauss-Hermite quadrature.
double estimate_loglik(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                       int quad_points = 20);

// Closed-form marginal log-likelihood for the Gaussian family.
double gaussian_marginal_loglik(const ModelParams& params, const LongitudinalNetworkDataset& dataset);

struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;  // for the weight function exp(-x^2)
};

GaussHermiteRule gauss_hermite(int points);

}  // namespace mrglmm
