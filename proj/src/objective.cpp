#include "mrglmm/objective.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/parallel.hpp"

#include <cmath>

namespace mrglmm {

McObjective::McObjective(const Family& family, const LongitudinalNetworkDataset& dataset, const MwgState& state,
                         const EntryMask& mask)
    : family_(family), dataset_(dataset), state_(state), mask_(mask) {
  if (state.subjects.size() != dataset.subjects.size() || state.n != dataset.n) {
    throw InvalidArgument("objective: sampler state does not match the dataset");
  }
  if (state.M < 1) throw InvalidArgument("objective: sampler state holds no draws");
  const int n2 = dataset.n * dataset.n;
  moments_.resize(state.subjects.size());
  for (size_t i = 0; i < state.subjects.size(); ++i) {
    const MatrixXd& draws = state.subjects[i].samples;
    if (draws.rows() != state.M || draws.cols() != n2) {
      throw InvalidArgument("objective: sample bank has the wrong shape");
    }
    SubjectMoments& mom = moments_[i];
    mom.mean = draws.colwise().mean().transpose();
    if (family.is_gaussian()) {
      mom.centred = (draws.rowwise() - mom.mean.transpose()).colwise().squaredNorm().transpose();
    } else {
      mom.exp_draws = draws.array().exp().matrix();
    }
  }
}

McObjective::Evaluation McObjective::evaluate(const ModelParams& params, Want want) const {
  const int n = dataset_.n;
  const int n2 = n * n;
  const int p = dataset_.p;
  const int N = dataset_.subject_count();
  const int M = state_.M;
  const bool want_r = want != Want::value;
  const bool want_g = want == Want::all;
  const bool gaussian = family_.is_gaussian();
  const double s2 = params.sigma_e2;
  if (gaussian && !(s2 > 0.0)) throw InvalidArgument("objective: sigma_e2 must be positive");
  const double log_norm = 0.5 * (kLog2Pi + std::log(s2));
  const MatrixXd intercept = params.intercept();

  std::vector<double> values(static_cast<size_t>(N), 0.0);
  std::vector<VectorXd> r_parts(want_r ? static_cast<size_t>(N) : 0);
  std::vector<VectorXd> g_parts(want_g ? static_cast<size_t>(N) : 0);

  parallel_for(N, [&](int i) {
    const SubjectRecord& subject = dataset_.subjects[static_cast<size_t>(i)];
    const SubjectMoments& mom = moments_[static_cast<size_t>(i)];
    const MatrixXd& draws = state_.subjects[static_cast<size_t>(i)].samples;
    VectorXd r_sum;
    VectorXd g_sum;
    if (want_r) r_sum = VectorXd::Zero(n2);
    if (want_g) g_sum = VectorXd::Zero(static_cast<Eigen::Index>(n2) * p);
    VectorXd s(n2);
    double value = 0.0;
    for (int t = 0; t < subject.times(); ++t) {
      const MatrixXd eta0 = intercept + params.B.contract(subject.covariates[t]);
      const double* A = subject.responses[t].data();
      s.setZero();
      for (int e : mask_.entries()) {
        const double a = A[e];
        const double base = eta0.data()[e];
        if (gaussian) {
          const double d = a - base - mom.mean[e];
          value += (d * d + mom.centred[e] / M) / (2.0 * s2) + log_norm;
          s[e] = d / s2;
        } else {
          // softplus(base + theta) = log1p(e^base e^theta); sigmoid = w / (1 + w)
          const double* col = mom.exp_draws.col(e).data();
          const double eb = std::exp(base);
          double sp = 0.0;
          double sg = 0.0;
          for (int m = 0; m < M; ++m) {
            const double w = eb * col[m];
            if (w < 1e300) {
              sp += std::log1p(w);
              sg += w / (1.0 + w);
            } else {
              sp += base + draws(m, e);
              sg += 1.0;
            }
          }
          value += sp / M - a * (base + mom.mean[e]);
          s[e] = a - sg / M;
        }
      }
      if (want_r) r_sum += s;
      if (want_g) {
        const VectorXd& x = subject.covariates[t];
        for (int l = 0; l < p; ++l) {
          if (x[l] != 0.0) g_sum.segment(static_cast<Eigen::Index>(l) * n2, n2) += x[l] * s;
        }
      }
    }
    values[static_cast<size_t>(i)] = value;
    if (want_r) r_parts[static_cast<size_t>(i)] = std::move(r_sum);
    if (want_g) g_parts[static_cast<size_t>(i)] = std::move(g_sum);
  });

  Evaluation out;
  for (double v : values) out.q1 += v;
  if (want_r) {
    VectorXd r = VectorXd::Zero(n2);
    for (const auto& part : r_parts) r += part;
    out.R = Eigen::Map<const MatrixXd>(r.data(), n, n);
  }
  if (want_g) {
    out.G = CoefTensor(n, p);
    auto flat = out.G.flat();
    for (const auto& part : g_parts) flat += part;
  }
  return out;
}

double McObjective::mean_squared_residual(const ModelParams& params) const {
  if (!family_.is_gaussian()) {
    throw UnsupportedOperation("update_sigma_e2: only defined for the Gaussian family");
  }
  const int N = dataset_.subject_count();
  const int M = state_.M;
  const MatrixXd intercept = params.intercept();
  std::vector<double> sums(static_cast<size_t>(N), 0.0);
  parallel_for(N, [&](int i) {
    const SubjectRecord& subject = dataset_.subjects[static_cast<size_t>(i)];
    const SubjectMoments& mom = moments_[static_cast<size_t>(i)];
    double total = 0.0;
    for (int t = 0; t < subject.times(); ++t) {
      const MatrixXd eta0 = intercept + params.B.contract(subject.covariates[t]);
      const double* A = subject.responses[t].data();
      for (int e : mask_.entries()) {
        const double d = A[e] - eta0.data()[e] - mom.mean[e];
        total += d * d + mom.centred[e] / M;
      }
    }
    sums[static_cast<size_t>(i)] = total;
  });
  double total = 0.0;
  for (double v : sums) total += v;
  const double count = static_cast<double>(dataset_.total_observations()) * mask_.count();
  return count > 0.0 ? total / count : 0.0;
}

double balance_penalty(const ModelParams& params, double gamma) {
  if (params.mode == FactorMode::symmetric || gamma == 0.0) return 0.0;
  const MatrixXd S = params.U.transpose() * params.U - params.V.transpose() * params.V;
  return gamma * S.squaredNorm();
}

}  // namespace mrglmm
