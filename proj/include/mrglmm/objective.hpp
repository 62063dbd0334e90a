#pragma once

#include "mrglmm/model.hpp"
#include "mrglmm/sampler.hpp"

#include <vector>

namespace mrglmm {

// Monte Carlo data term Q1 with the random-effect draws held fixed, plus the
// residual sums its gradients are built from:
//   R_e   = (1/M) sum_{m,i,t} r^(m)_{it,e}          (masked e only)
//   G_l,e = (1/M) sum_{m,i,t} r^(m)_{it,e} x_{itl}
// with r = (A - eta)/sigma_e^2 for Gaussian and r = A - sigmoid(eta) for logit.
// The Gaussian case is reduced exactly to per-entry sample means and
// centred sums of squares of the draws.
class McObjective {
 public:
  enum class Want { value, residuals, all };

  struct Evaluation {
    double q1 = 0.0;
    MatrixXd R;    // n x n, empty unless residuals requested
    CoefTensor G;  // n x n x p, empty unless Want::all
  };

  McObjective(const Family& family, const LongitudinalNetworkDataset& dataset, const MwgState& state,
              const EntryMask& mask);

  Evaluation evaluate(const ModelParams& params, Want want) const;

  // Mean over (m, i, t, masked entries) of (A - eta^(m))^2. Gaussian only.
  double mean_squared_residual(const ModelParams& params) const;

  const Family& family() const { return family_; }
  const EntryMask& mask() const { return mask_; }
  int n() const { return dataset_.n; }
  int p() const { return dataset_.p; }

 private:
  struct SubjectMoments {
    VectorXd mean;      // n^2, per-entry sample mean of theta
    VectorXd centred;   // n^2, sum_m (theta_m - mean)^2 (Gaussian)
    MatrixXd exp_draws; // M x n^2, exp(theta_m) (logistic)
  };

  Family family_;
  const LongitudinalNetworkDataset& dataset_;
  const MwgState& state_;
  EntryMask mask_;
  std::vector<SubjectMoments> moments_;
};

// gamma * ||U^T U - V^T V||_F^2; zero in symmetric mode.
double balance_penalty(const ModelParams& params, double gamma);

}  // namespace mrglmm
