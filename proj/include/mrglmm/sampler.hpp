#pragma once

#include "mrglmm/model.hpp"

#include <cstdint>
#include <vector>

namespace mrglmm {

struct MwgConfig {
  int M = 100;                 // recorded sweeps per subject
  int burn_in = 50;            // discarded sweeps before recording
  double proposal_sd = 1.0;    // initial random-walk scale
  std::uint64_t seed = 20240611;
  bool adapt = true;           // Robbins-Monro scale tuning, burn-in only
  double target_accept = 0.44;
  bool whole_matrix = false;   // propose all entries jointly (one accept/reject)

  void validate() const;
};

// Chains for one subject. Column e of `samples` holds entry e's M draws.
struct SubjectChain {
  std::uint64_t subject_id = 0;
  MatrixXd samples;          // M x n^2
  MatrixXd last;             // n x n state after the final sweep
  MatrixXd proposal_sd;      // n x n per-entry scales
  MatrixXd acceptance_rate;  // n x n, fraction accepted over recorded sweeps
};

struct MwgState {
  int n = 0;
  int M = 0;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  std::vector<SubjectChain> subjects;

  MatrixXd sample(int subject, int m) const;
  double mean_acceptance(const EntryMask& mask) const;
};

// Counter address of one sweep: (seed, epoch, subject, sweep). Each entry
// consumes the block at its own flat index, so chains are independent.
struct SweepAddress {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  std::uint64_t subject_id = 0;
  std::uint32_t sweep = 0;
};

struct SweepResult {
  MatrixXd theta;
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> accepted;
};

// One Metropolis-within-Gibbs sweep over the masked entries of theta_i.
// proposal_sd may be empty, in which case config.proposal_sd is used.
SweepResult mwg_sweep(const ModelParams& params, const Family& family, const SubjectRecord& subject,
                      const MatrixXd& current_theta, const MwgConfig& config, const EntryMask& mask,
                      const SweepAddress& address, const MatrixXd& proposal_sd = MatrixXd());

// E-step. With `warm` given, each chain resumes from its previous final state
// and scale; otherwise it starts from a standard-normal draw.
MwgState draw_samples(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                      const MwgConfig& config, std::uint32_t epoch = 0, const MwgState* warm = nullptr);

double q1(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
          const MwgState& state, const EntryMask& mask);

double q2(const MwgState& state, const MatrixXd& Sigma_theta, const EntryMask& mask);

struct EntryPosterior {
  MatrixXd mean;
  MatrixXd variance;
};

// Closed-form conditional posterior of theta_i for the Gaussian family.
std::vector<EntryPosterior> exact_gaussian_posterior(const ModelParams& params, const Family& family,
                                                     const LongitudinalNetworkDataset& dataset,
                                                     const MatrixXd& Sigma_theta);

}  // namespace mrglmm
