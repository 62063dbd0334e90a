#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mrglmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class FamilyKind { gaussian_identity, bernoulli_logit };

// Response distribution paired with its canonical link.
struct Family {
  FamilyKind kind = FamilyKind::gaussian_identity;

  bool is_gaussian() const { return kind == FamilyKind::gaussian_identity; }
  double link(double mu) const;          // g
  double inverse_link(double eta) const; // g^{-1} = psi'
  double cumulant(double eta) const;     // psi (unit dispersion)

  static Family gaussian() { return {FamilyKind::gaussian_identity}; }
  static Family logistic() { return {FamilyKind::bernoulli_logit}; }
};

std::string_view to_string(FamilyKind kind);
FamilyKind family_from_string(std::string_view name);

enum class DiagonalPolicy { exclude, include };

std::string_view to_string(DiagonalPolicy policy);
DiagonalPolicy diagonal_policy_from_string(std::string_view name);

// Which (j, j') cells of an n x n response enter the likelihood.
class EntryMask {
 public:
  EntryMask() = default;
  EntryMask(int n, DiagonalPolicy policy);

  bool include(int j, int jprime) const {
    return policy_ == DiagonalPolicy::include || j != jprime;
  }
  int n() const { return n_; }
  DiagonalPolicy policy() const { return policy_; }
  // Column-major flat indices e = j + n * j' of included cells, ascending.
  const std::vector<int>& entries() const { return entries_; }
  int count() const { return static_cast<int>(entries_.size()); }

 private:
  int n_ = 0;
  DiagonalPolicy policy_ = DiagonalPolicy::exclude;
  std::vector<int> entries_;
};

// n x n x p coefficient tensor stored as p column-major frontal slices.
class CoefTensor {
 public:
  CoefTensor() = default;
  CoefTensor(int n, int p) : n_(n), p_(p), data_(static_cast<size_t>(n) * n * p, 0.0) {}

  int n() const { return n_; }
  int p() const { return p_; }
  size_t size() const { return data_.size(); }

  double& operator()(int j, int jprime, int l) { return data_[index(j, jprime, l)]; }
  double operator()(int j, int jprime, int l) const { return data_[index(j, jprime, l)]; }

  Eigen::Map<MatrixXd> slice(int l) {
    return Eigen::Map<MatrixXd>(data_.data() + static_cast<size_t>(l) * n_ * n_, n_, n_);
  }
  Eigen::Map<const MatrixXd> slice(int l) const {
    return Eigen::Map<const MatrixXd>(data_.data() + static_cast<size_t>(l) * n_ * n_, n_, n_);
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Eigen::Map<VectorXd> flat() { return Eigen::Map<VectorXd>(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  Eigen::Map<const VectorXd> flat() const {
    return Eigen::Map<const VectorXd>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  size_t nonzeros() const;
  double squared_norm() const;

  // B x_3 x = sum_l x_l B_{:,:,l}
  MatrixXd contract(const VectorXd& x) const;

  size_t index(int j, int jprime, int l) const {
    return static_cast<size_t>(l) * n_ * n_ + static_cast<size_t>(jprime) * n_ + j;
  }

  bool operator==(const CoefTensor&) const = default;

 private:
  int n_ = 0;
  int p_ = 0;
  std::vector<double> data_;
};

struct SubjectRecord {
  std::uint64_t id = 0;
  std::vector<MatrixXd> responses;   // A_i1 .. A_iT
  std::vector<VectorXd> covariates;  // x_i1 .. x_iT

  int times() const { return static_cast<int>(responses.size()); }
};

struct LongitudinalNetworkDataset {
  int n = 0;
  int p = 0;
  DiagonalPolicy diagonal_policy = DiagonalPolicy::exclude;
  std::vector<SubjectRecord> subjects;

  int subject_count() const { return static_cast<int>(subjects.size()); }
  int total_observations() const;
  EntryMask mask() const { return EntryMask(n, diagonal_policy); }

  // Throws InvalidArgument when any shape or family-domain invariant fails.
  void validate(const Family& family) const;
};

enum class FactorMode { asymmetric, symmetric };

struct ModelParams {
  FactorMode mode = FactorMode::asymmetric;
  MatrixXd U;              // n x r
  MatrixXd V;              // n x r (asymmetric)
  VectorXd Lambda;         // r, entries +-1 (symmetric)
  CoefTensor B;            // n x n x p
  double sigma_e2 = 1.0;   // Gaussian dispersion
  MatrixXd Sigma_theta;    // n x n random-intercept variances

  int n() const { return static_cast<int>(U.rows()); }
  int r() const { return static_cast<int>(U.cols()); }
  int p() const { return B.p(); }

  // UV^T, or U diag(Lambda) U^T in symmetric mode.
  MatrixXd intercept() const;
  void validate() const;
};

MatrixXd linear_predictor(const ModelParams& params, const MatrixXd& theta_i, const VectorXd& x_it);

double entry_logdensity(const Family& family, double a, double eta, double sigma_e2);

double subject_loglik(const ModelParams& params, const Family& family, const SubjectRecord& subject,
                      const MatrixXd& theta_i, const EntryMask& mask);

double theta_logprior(const MatrixXd& theta_i, const MatrixXd& Sigma_theta, const EntryMask& mask);

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace mrglmm
