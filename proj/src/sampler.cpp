#include "mrglmm/sampler.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/objective.hpp"
#include "mrglmm/parallel.hpp"
#include "mrglmm/rng.hpp"

#include <algorithm>
#include <cmath>

namespace mrglmm {

void MwgConfig::validate() const {
  if (M < 1) throw InvalidArgument("mwg: M must be >= 1");
  if (burn_in < 0) throw InvalidArgument("mwg: burn_in must be >= 0");
  if (!(proposal_sd > 0.0)) throw InvalidArgument("mwg: proposal_sd must be positive");
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw InvalidArgument("mwg: target_accept must be in (0,1)");
}

MatrixXd MwgState::sample(int subject, int m) const {
  const MatrixXd& draws = subjects.at(static_cast<size_t>(subject)).samples;
  MatrixXd out(n, n);
  for (Eigen::Index e = 0; e < out.size(); ++e) out.data()[e] = draws(m, e);
  return out;
}

double MwgState::mean_acceptance(const EntryMask& mask) const {
  if (subjects.empty() || mask.count() == 0) return 0.0;
  double total = 0.0;
  for (const auto& s : subjects) {
    for (int e : mask.entries()) total += s.acceptance_rate.data()[e];
  }
  return total / (static_cast<double>(subjects.size()) * mask.count());
}

namespace {

constexpr double kMinScale = 1e-8;
constexpr double kMaxScale = 1e3;

inline double unit32(std::uint32_t x) { return (static_cast<double>(x) + 0.5) * 0x1.0p-32; }

inline std::uint32_t fold_id(std::uint64_t id) {
  return static_cast<std::uint32_t>(id) ^ static_cast<std::uint32_t>(id >> 32);
}

// Log conditional posterior of one entry of theta_i, up to theta-free terms.
class SubjectTarget {
 public:
  SubjectTarget(const ModelParams& params, const Family& family, const SubjectRecord& subject,
                const MatrixXd& Sigma_theta)
      : gaussian_(family.is_gaussian()),
        T_(subject.times()),
        n2_(static_cast<int>(Sigma_theta.size())),
        sigma_e2_(params.sigma_e2),
        prior_var_(Sigma_theta.data(), Sigma_theta.data() + Sigma_theta.size()) {
    if (gaussian_ && !(sigma_e2_ > 0.0)) throw InvalidArgument("sampler: sigma_e2 must be positive");
    const MatrixXd intercept = params.intercept();
    if (gaussian_) {
      s1_.assign(static_cast<size_t>(n2_), 0.0);
    } else {
      asum_.assign(static_cast<size_t>(n2_), 0.0);
      eta0_.resize(static_cast<size_t>(T_) * n2_);
    }
    for (int t = 0; t < T_; ++t) {
      const MatrixXd eta = intercept + params.B.contract(subject.covariates[t]);
      const double* A = subject.responses[t].data();
      for (int e = 0; e < n2_; ++e) {
        if (gaussian_) {
          s1_[e] += A[e] - eta.data()[e];
        } else {
          asum_[e] += A[e];
          eta0_[static_cast<size_t>(e) * T_ + t] = eta.data()[e];
        }
      }
    }
  }

  double log_target(int e, double th) const {
    const double v = prior_var_[e];
    const double prior = -th * th / (2.0 * v);
    if (gaussian_) {
      return (th * s1_[e] - 0.5 * T_ * th * th) / sigma_e2_ + prior;
    }
    double ll = th * asum_[e];
    const double* eta = eta0_.data() + static_cast<size_t>(e) * T_;
    for (int t = 0; t < T_; ++t) ll -= softplus(eta[t] + th);
    return ll + prior;
  }

  void check_prior(const EntryMask& mask) const {
    for (int e : mask.entries()) {
      if (!(prior_var_[e] > 0.0)) {
        throw InvalidArgument("sampler: random-intercept variance must be positive on every masked entry");
      }
    }
  }

 private:
  bool gaussian_;
  int T_;
  int n2_;
  double sigma_e2_;
  std::vector<double> prior_var_;
  std::vector<double> s1_;
  std::vector<double> asum_;
  std::vector<double> eta0_;  // entry-major, T per entry
};

struct Proposal {
  double xi;
  double log_u;
};

inline Proposal draw_proposal(const Philox4x32& gen, std::uint32_t sweep, std::uint32_t entry, std::uint32_t subject,
                              std::uint32_t hi, double scale) {
  const auto out = gen({sweep, entry, subject, hi});
  return {scale * box_muller(unit32(out[0]), unit32(out[1])), std::log(to_unit(out[2], out[3]))};
}

inline std::uint32_t sweep_hi(std::uint32_t epoch) {
  return (static_cast<std::uint32_t>(StreamTag::mwg_sweep) << 24) | (epoch & 0xFFFFFFu);
}

// Advances every masked entry by one Metropolis step; returns acceptance flags
// through `accepted` (indexed by flat entry).
void sweep_entries(const SubjectTarget& target, const EntryMask& mask, const Philox4x32& gen, std::uint32_t sweep,
                   std::uint32_t subject, std::uint32_t epoch, double* theta, double* log_target,
                   const double* scale, std::uint8_t* accepted, bool whole_matrix) {
  const std::uint32_t hi = sweep_hi(epoch);
  if (!whole_matrix) {
    for (int e : mask.entries()) {
      const Proposal prop = draw_proposal(gen, sweep, static_cast<std::uint32_t>(e), subject, hi, scale[e]);
      const double cand = theta[e] + prop.xi;
      const double lt = target.log_target(e, cand);
      const double delta = lt - log_target[e];
      const bool ok = delta >= 0.0 || prop.log_u < delta;
      if (ok) {
        theta[e] = cand;
        log_target[e] = lt;
      }
      accepted[e] = ok ? 1 : 0;
    }
    return;
  }
  std::vector<double> cand(static_cast<size_t>(mask.n()) * mask.n(), 0.0);
  std::vector<double> cand_lt(cand.size(), 0.0);
  double delta = 0.0;
  for (int e : mask.entries()) {
    const Proposal prop = draw_proposal(gen, sweep, static_cast<std::uint32_t>(e), subject, hi, scale[e]);
    cand[e] = theta[e] + prop.xi;
    cand_lt[e] = target.log_target(e, cand[e]);
    delta += cand_lt[e] - log_target[e];
  }
  const auto n2 = static_cast<std::uint32_t>(cand.size());
  const auto u_block = gen({sweep, n2, subject, hi});
  const double log_u = std::log(to_unit(u_block[0], u_block[1]));
  const bool ok = delta >= 0.0 || log_u < delta;
  for (int e : mask.entries()) {
    if (ok) {
      theta[e] = cand[e];
      log_target[e] = cand_lt[e];
    }
    accepted[e] = ok ? 1 : 0;
  }
}

void check_finite_targets(const std::vector<double>& lt, const EntryMask& mask, std::uint64_t subject_id) {
  for (int e : mask.entries()) {
    if (!std::isfinite(lt[e])) {
      throw NumericalError("sampler: non-finite log-density at the current state of subject " +
                           std::to_string(subject_id) + ", entry " + std::to_string(e));
    }
  }
}

}  // namespace

SweepResult mwg_sweep(const ModelParams& params, const Family& family, const SubjectRecord& subject,
                      const MatrixXd& current_theta, const MwgConfig& config, const EntryMask& mask,
                      const SweepAddress& address, const MatrixXd& proposal_sd) {
  const int n = mask.n();
  if (current_theta.rows() != n || current_theta.cols() != n) {
    throw InvalidArgument("mwg_sweep: theta must be n x n");
  }
  if (!current_theta.allFinite()) throw InvalidArgument("mwg_sweep: current theta is not finite");
  const SubjectTarget target(params, family, subject, params.Sigma_theta);
  target.check_prior(mask);

  SweepResult out{current_theta, decltype(SweepResult::accepted)::Zero(n, n)};
  std::vector<double> lt(static_cast<size_t>(n) * n, 0.0);
  for (int e : mask.entries()) lt[e] = target.log_target(e, out.theta.data()[e]);
  check_finite_targets(lt, mask, subject.id);

  const MatrixXd scale = proposal_sd.size() == 0 ? MatrixXd::Constant(n, n, config.proposal_sd) : proposal_sd;
  const Philox4x32 gen(address.seed);
  sweep_entries(target, mask, gen, address.sweep, fold_id(address.subject_id), address.epoch, out.theta.data(),
                lt.data(), scale.data(), out.accepted.data(), config.whole_matrix);
  return out;
}

MwgState draw_samples(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                      const MwgConfig& config, std::uint32_t epoch, const MwgState* warm) {
  config.validate();
  const int n = dataset.n;
  const int n2 = n * n;
  const EntryMask mask = dataset.mask();

  MwgState state;
  state.n = n;
  state.M = config.M;
  state.seed = config.seed;
  state.epoch = epoch;
  state.subjects.resize(dataset.subjects.size());

  const bool can_resume = warm != nullptr && warm->n == n && warm->subjects.size() == dataset.subjects.size();
  const Philox4x32 gen(config.seed);

  parallel_for(dataset.subject_count(), [&](int i) {
    const SubjectRecord& subject = dataset.subjects[static_cast<size_t>(i)];
    const std::uint32_t sid = fold_id(subject.id);
    const SubjectTarget target(params, family, subject, params.Sigma_theta);
    target.check_prior(mask);

    SubjectChain chain;
    chain.subject_id = subject.id;
    const SubjectChain* prev = nullptr;
    if (can_resume && warm->subjects[static_cast<size_t>(i)].subject_id == subject.id) {
      prev = &warm->subjects[static_cast<size_t>(i)];
    }
    MatrixXd theta = MatrixXd::Zero(n, n);
    if (prev != nullptr) {
      theta = prev->last;
      chain.proposal_sd = prev->proposal_sd;
    } else {
      const std::uint32_t hi = (static_cast<std::uint32_t>(StreamTag::mwg_init) << 24) | (epoch & 0xFFFFFFu);
      for (int e : mask.entries()) {
        const auto out = gen({0u, static_cast<std::uint32_t>(e), sid, hi});
        theta.data()[e] = box_muller(to_unit(out[0], out[1]), to_unit(out[2], out[3]));
      }
      chain.proposal_sd = MatrixXd::Constant(n, n, config.proposal_sd);
    }

    std::vector<double> lt(static_cast<size_t>(n2), 0.0);
    for (int e : mask.entries()) lt[e] = target.log_target(e, theta.data()[e]);
    check_finite_targets(lt, mask, subject.id);

    chain.samples = MatrixXd::Zero(config.M, n2);
    chain.acceptance_rate = MatrixXd::Zero(n, n);
    std::vector<std::uint8_t> accepted(static_cast<size_t>(n2), 0);
    const int total = config.burn_in + config.M;
    for (int s = 0; s < total; ++s) {
      sweep_entries(target, mask, gen, static_cast<std::uint32_t>(s), sid, epoch, theta.data(), lt.data(),
                    chain.proposal_sd.data(), accepted.data(), config.whole_matrix);
      if (s < config.burn_in) {
        if (config.adapt) {
          const double rate = 1.0 / std::sqrt(static_cast<double>(s) + 1.0);
          for (int e : mask.entries()) {
            double& sd = chain.proposal_sd.data()[e];
            sd = std::clamp(sd * std::exp(rate * (accepted[e] - config.target_accept)), kMinScale, kMaxScale);
          }
        }
        continue;
      }
      const int m = s - config.burn_in;
      for (int e : mask.entries()) {
        chain.samples(m, e) = theta.data()[e];
        chain.acceptance_rate.data()[e] += accepted[e];
      }
    }
    chain.acceptance_rate /= static_cast<double>(config.M);
    chain.last = theta;
    state.subjects[static_cast<size_t>(i)] = std::move(chain);
  });
  return state;
}

double q1(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
          const MwgState& state, const EntryMask& mask) {
  const McObjective objective(family, dataset, state, mask);
  return objective.evaluate(params, McObjective::Want::value).q1;
}

double q2(const MwgState& state, const MatrixXd& Sigma_theta, const EntryMask& mask) {
  if (state.M < 1) throw InvalidArgument("q2: state holds no samples");
  std::vector<double> per_subject(state.subjects.size(), 0.0);
  for (int e : mask.entries()) {
    if (!(Sigma_theta.data()[e] > 0.0)) throw InvalidArgument("q2: zero variance on a masked entry");
  }
  parallel_for(static_cast<int>(state.subjects.size()), [&](int i) {
    const SubjectChain& chain = state.subjects[static_cast<size_t>(i)];
    double total = 0.0;
    for (int e : mask.entries()) {
      const double v = Sigma_theta.data()[e];
      const double sq = chain.samples.col(e).squaredNorm();
      total += sq / (2.0 * v) + 0.5 * state.M * (kLog2Pi + std::log(v));
    }
    per_subject[static_cast<size_t>(i)] = total;
  });
  double total = 0.0;
  for (double v : per_subject) total += v;
  return total / state.M;
}

std::vector<EntryPosterior> exact_gaussian_posterior(const ModelParams& params, const Family& family,
                                                     const LongitudinalNetworkDataset& dataset,
                                                     const MatrixXd& Sigma_theta) {
  if (!family.is_gaussian()) {
    throw UnsupportedOperation("exact_gaussian_posterior: only defined for the Gaussian family");
  }
  const int n = dataset.n;
  const EntryMask mask = dataset.mask();
  const MatrixXd intercept = params.intercept();
  std::vector<EntryPosterior> out;
  out.reserve(dataset.subjects.size());
  for (const auto& subject : dataset.subjects) {
    MatrixXd resid = MatrixXd::Zero(n, n);
    for (int t = 0; t < subject.times(); ++t) {
      resid += subject.responses[t] - intercept - params.B.contract(subject.covariates[t]);
    }
    EntryPosterior post{MatrixXd::Zero(n, n), MatrixXd::Zero(n, n)};
    for (int e : mask.entries()) {
      const double prior = Sigma_theta.data()[e];
      if (!(prior > 0.0)) continue;
      const double var = 1.0 / (subject.times() / params.sigma_e2 + 1.0 / prior);
      post.variance.data()[e] = var;
      post.mean.data()[e] = var * resid.data()[e] / params.sigma_e2;
    }
    out.push_back(std::move(post));
  }
  return out;
}

}  // namespace mrglmm
