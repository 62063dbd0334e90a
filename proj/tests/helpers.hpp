#pragma once

#include "mrglmm/model.hpp"
#include "mrglmm/sampler.hpp"

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

namespace testutil {

using mrglmm::MatrixXd;
using mrglmm::VectorXd;

inline MatrixXd randn(std::mt19937_64& g, int rows, int cols, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  MatrixXd M(rows, cols);
  for (Eigen::Index q = 0; q < M.size(); ++q) M.data()[q] = nd(g);
  return M;
}

// Small random dataset with T_i drawn from {1, .., max_T}.
inline mrglmm::LongitudinalNetworkDataset random_dataset(std::mt19937_64& g, const mrglmm::Family& family, int n,
                                                         int p, int N, int max_T,
                                                         mrglmm::DiagonalPolicy policy =
                                                             mrglmm::DiagonalPolicy::exclude) {
  mrglmm::LongitudinalNetworkDataset d;
  d.n = n;
  d.p = p;
  d.diagonal_policy = policy;
  std::uniform_int_distribution<int> times(1, max_T);
  std::bernoulli_distribution coin(0.4);
  for (int i = 0; i < N; ++i) {
    mrglmm::SubjectRecord s;
    s.id = static_cast<std::uint64_t>(100 + 7 * i);
    const int T = times(g);
    for (int t = 0; t < T; ++t) {
      MatrixXd A = randn(g, n, n);
      if (!family.is_gaussian()) A = A.unaryExpr([&](double) { return coin(g) ? 1.0 : 0.0; });
      s.responses.push_back(A);
      s.covariates.push_back(randn(g, p, 1));
    }
    d.subjects.push_back(std::move(s));
  }
  return d;
}

inline mrglmm::ModelParams random_params(std::mt19937_64& g, int n, int r, int p, double b_sd = 0.5) {
  mrglmm::ModelParams P;
  P.U = randn(g, n, r, 0.7);
  P.V = randn(g, n, r, 0.7);
  P.B = mrglmm::CoefTensor(n, p);
  std::normal_distribution<double> nd(0.0, b_sd);
  for (double& b : P.B.data()) b = nd(g);
  P.sigma_e2 = 0.8;
  P.Sigma_theta = MatrixXd::Constant(n, n, 1.3);
  return P;
}

// Frozen draw bank filled from an independent generator.
inline mrglmm::MwgState frozen_state(std::mt19937_64& g, const mrglmm::LongitudinalNetworkDataset& d, int M,
                                     double sd = 0.8) {
  mrglmm::MwgState st;
  st.n = d.n;
  st.M = M;
  for (const auto& s : d.subjects) {
    mrglmm::SubjectChain c;
    c.subject_id = s.id;
    c.samples = randn(g, M, d.n * d.n, sd);
    c.last = MatrixXd::Zero(d.n, d.n);
    c.proposal_sd = MatrixXd::Ones(d.n, d.n);
    c.acceptance_rate = MatrixXd::Zero(d.n, d.n);
    st.subjects.push_back(std::move(c));
  }
  return st;
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("mrglmm_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str(const std::string& sub = "") const { return sub.empty() ? path.string() : (path / sub).string(); }
};

}  // namespace testutil
