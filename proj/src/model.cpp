#include "mrglmm/model.hpp"

#include "mrglmm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mrglmm {

double Family::link(double mu) const {
  if (is_gaussian()) {
    return mu;
  }
  return std::log(mu) - std::log1p(-mu);
}

double Family::inverse_link(double eta) const {
  return is_gaussian() ? eta : sigmoid(eta);
}

double Family::cumulant(double eta) const {
  return is_gaussian() ? 0.5 * eta * eta : softplus(eta);
}

std::string_view to_string(FamilyKind kind) {
  return kind == FamilyKind::gaussian_identity ? "gaussian" : "logistic";
}

FamilyKind family_from_string(std::string_view name) {
  if (name == "gaussian" || name == "gaussian_identity" || name == "linear") {
    return FamilyKind::gaussian_identity;
  }
  if (name == "logistic" || name == "bernoulli_logit" || name == "bernoulli") {
    return FamilyKind::bernoulli_logit;
  }
  throw InvalidArgument("unknown family '" + std::string(name) + "'");
}

std::string_view to_string(DiagonalPolicy policy) {
  return policy == DiagonalPolicy::include ? "include" : "exclude";
}

DiagonalPolicy diagonal_policy_from_string(std::string_view name) {
  if (name == "include") return DiagonalPolicy::include;
  if (name == "exclude") return DiagonalPolicy::exclude;
  throw InvalidArgument("unknown diagonal_policy '" + std::string(name) + "'");
}

EntryMask::EntryMask(int n, DiagonalPolicy policy) : n_(n), policy_(policy) {
  entries_.reserve(static_cast<size_t>(n) * n);
  for (int jp = 0; jp < n; ++jp) {
    for (int j = 0; j < n; ++j) {
      if (include(j, jp)) {
        entries_.push_back(j + n * jp);
      }
    }
  }
}

size_t CoefTensor::nonzeros() const {
  return static_cast<size_t>(std::count_if(data_.begin(), data_.end(), [](double v) { return v != 0.0; }));
}

double CoefTensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

MatrixXd CoefTensor::contract(const VectorXd& x) const {
  if (x.size() != p_) {
    throw InvalidArgument("covariate vector has length " + std::to_string(x.size()) + ", expected " +
                          std::to_string(p_));
  }
  MatrixXd out = MatrixXd::Zero(n_, n_);
  for (int l = 0; l < p_; ++l) {
    if (x[l] != 0.0) out.noalias() += x[l] * slice(l);
  }
  return out;
}

int LongitudinalNetworkDataset::total_observations() const {
  int total = 0;
  for (const auto& s : subjects) total += s.times();
  return total;
}

void LongitudinalNetworkDataset::validate(const Family& family) const {
  if (n < 1) throw InvalidArgument("dataset: n must be >= 1");
  if (p < 0) throw InvalidArgument("dataset: p must be >= 0");
  std::set<std::uint64_t> ids;
  for (size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    const std::string where = "dataset: subject " + std::to_string(s.id);
    if (!ids.insert(s.id).second) throw InvalidArgument(where + " id is duplicated");
    if (s.responses.empty()) throw InvalidArgument(where + " has no observations");
    if (s.responses.size() != s.covariates.size()) {
      throw InvalidArgument(where + " has " + std::to_string(s.responses.size()) + " responses but " +
                            std::to_string(s.covariates.size()) + " covariate vectors");
    }
    for (int t = 0; t < s.times(); ++t) {
      const auto& A = s.responses[t];
      if (A.rows() != n || A.cols() != n) {
        throw InvalidArgument(where + " time " + std::to_string(t) + ": response is " + std::to_string(A.rows()) +
                              "x" + std::to_string(A.cols()) + ", expected " + std::to_string(n) + "x" +
                              std::to_string(n));
      }
      if (s.covariates[t].size() != p) {
        throw InvalidArgument(where + " time " + std::to_string(t) + ": covariate length " +
                              std::to_string(s.covariates[t].size()) + ", expected " + std::to_string(p));
      }
      if (!A.allFinite() || !s.covariates[t].allFinite()) {
        throw InvalidArgument(where + " time " + std::to_string(t) + ": non-finite value");
      }
      if (!family.is_gaussian()) {
        for (int jp = 0; jp < n; ++jp) {
          for (int j = 0; j < n; ++j) {
            if (j == jp && diagonal_policy == DiagonalPolicy::exclude) continue;
            const double a = A(j, jp);
            if (a != 0.0 && a != 1.0) {
              throw InvalidArgument(where + " time " + std::to_string(t) + ": binary response has value " +
                                    std::to_string(a) + " at (" + std::to_string(j) + "," + std::to_string(jp) +
                                    ")");
            }
          }
        }
      }
    }
  }
}

MatrixXd ModelParams::intercept() const {
  if (mode == FactorMode::symmetric) {
    return U * Lambda.asDiagonal() * U.transpose();
  }
  return U * V.transpose();
}

void ModelParams::validate() const {
  const int nn = n();
  const int rr = r();
  if (rr < 1 || rr > nn) throw InvalidArgument("params: rank must satisfy 1 <= r <= n");
  if (mode == FactorMode::asymmetric) {
    if (V.rows() != nn || V.cols() != rr) throw InvalidArgument("params: V must be n x r");
  } else {
    if (Lambda.size() != rr) throw InvalidArgument("params: Lambda must have length r");
    for (Eigen::Index k = 0; k < Lambda.size(); ++k) {
      if (Lambda[k] != 1.0 && Lambda[k] != -1.0) throw InvalidArgument("params: Lambda entries must be +-1");
    }
  }
  if (B.n() != nn) throw InvalidArgument("params: B must be n x n x p");
  if (!(sigma_e2 > 0.0)) throw InvalidArgument("params: sigma_e2 must be positive");
  if (Sigma_theta.rows() != nn || Sigma_theta.cols() != nn) {
    throw InvalidArgument("params: Sigma_theta must be n x n");
  }
  if ((Sigma_theta.array() < 0.0).any()) throw InvalidArgument("params: Sigma_theta entries must be >= 0");
}

MatrixXd linear_predictor(const ModelParams& params, const MatrixXd& theta_i, const VectorXd& x_it) {
  const int n = params.n();
  if (theta_i.rows() != n || theta_i.cols() != n) {
    throw InvalidArgument("linear_predictor: theta_i must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  if (params.B.n() != n || (params.mode == FactorMode::asymmetric && params.V.rows() != n)) {
    throw InvalidArgument("linear_predictor: inconsistent parameter dimensions");
  }
  if (x_it.size() != params.p()) {
    throw InvalidArgument("linear_predictor: covariate length " + std::to_string(x_it.size()) + ", expected " +
                          std::to_string(params.p()));
  }
  return params.intercept() + theta_i + params.B.contract(x_it);
}

double entry_logdensity(const Family& family, double a, double eta, double sigma_e2) {
  if (family.is_gaussian()) {
    if (!(sigma_e2 > 0.0)) throw InvalidArgument("entry_logdensity: sigma_e2 must be positive");
    const double d = a - eta;
    return -d * d / (2.0 * sigma_e2) - 0.5 * (kLog2Pi + std::log(sigma_e2));
  }
  if (a != 0.0 && a != 1.0) throw InvalidArgument("entry_logdensity: Bernoulli response must be 0 or 1");
  return a * eta - softplus(eta);
}

double subject_loglik(const ModelParams& params, const Family& family, const SubjectRecord& subject,
                      const MatrixXd& theta_i, const EntryMask& mask) {
  double total = 0.0;
  for (int t = 0; t < subject.times(); ++t) {
    const MatrixXd eta = linear_predictor(params, theta_i, subject.covariates[t]);
    const MatrixXd& A = subject.responses[t];
    for (int e : mask.entries()) {
      total += entry_logdensity(family, A.data()[e], eta.data()[e], params.sigma_e2);
    }
  }
  return total;
}

double theta_logprior(const MatrixXd& theta_i, const MatrixXd& Sigma_theta, const EntryMask& mask) {
  if (theta_i.rows() != mask.n() || Sigma_theta.rows() != mask.n() || Sigma_theta.cols() != mask.n()) {
    throw InvalidArgument("theta_logprior: dimension mismatch");
  }
  double total = 0.0;
  for (int e : mask.entries()) {
    const double v = Sigma_theta.data()[e];
    if (!(v > 0.0)) throw InvalidArgument("theta_logprior: zero variance on a masked entry");
    const double th = theta_i.data()[e];
    total += -th * th / (2.0 * v) - 0.5 * (kLog2Pi + std::log(v));
  }
  return total;
}

}  // namespace mrglmm
