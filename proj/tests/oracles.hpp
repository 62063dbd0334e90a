#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond the plain data types.

#include "mrglmm/model.hpp"
#include "mrglmm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <vector>

namespace oracle {

using mrglmm::MatrixXd;

// Q1 + gamma ||U^T U - V^T V||^2 evaluated naively in long double.
inline long double objective(const mrglmm::ModelParams& P, bool gaussian, const mrglmm::LongitudinalNetworkDataset& d,
                             const mrglmm::MwgState& st, double gamma) {
  const int n = d.n;
  const bool sym = P.mode == mrglmm::FactorMode::symmetric;
  long double total = 0.0L;
  for (size_t i = 0; i < d.subjects.size(); ++i) {
    const auto& s = d.subjects[i];
    for (int m = 0; m < st.M; ++m) {
      for (int t = 0; t < s.times(); ++t) {
        for (int j = 0; j < n; ++j) {
          for (int jp = 0; jp < n; ++jp) {
            if (d.diagonal_policy == mrglmm::DiagonalPolicy::exclude && j == jp) continue;
            long double eta = st.subjects[i].samples(m, j + n * jp);
            for (int k = 0; k < P.U.cols(); ++k) {
              eta += static_cast<long double>(P.U(j, k)) * (sym ? P.Lambda(k) * P.U(jp, k) : P.V(jp, k));
            }
            for (int l = 0; l < d.p; ++l) eta += static_cast<long double>(P.B(j, jp, l)) * s.covariates[t](l);
            const long double a = s.responses[t](j, jp);
            if (gaussian) {
              total += (a - eta) * (a - eta) / (2.0L * P.sigma_e2) +
                       0.5L * std::log(2.0L * 3.14159265358979323846264L * P.sigma_e2);
            } else {
              total += std::log1p(std::exp(eta)) - a * eta;
            }
          }
        }
      }
    }
  }
  total /= st.M;
  if (!sym && gamma != 0.0) {
    long double pen = 0.0L;
    const int r = static_cast<int>(P.U.cols());
    for (int a = 0; a < r; ++a) {
      for (int b = 0; b < r; ++b) {
        long double s = 0.0L;
        for (int j = 0; j < n; ++j) {
          s += static_cast<long double>(P.U(j, a)) * P.U(j, b) - static_cast<long double>(P.V(j, a)) * P.V(j, b);
        }
        pen += s * s;
      }
    }
    total += gamma * pen;
  }
  return total;
}

// Keeps the k largest magnitudes by a full sort; ties to smaller (j, j', l).
inline mrglmm::CoefTensor threshold_by_sort(const mrglmm::CoefTensor& B, size_t k) {
  struct Item {
    double mag;
    int j, jp, l;
  };
  std::vector<Item> items;
  for (int j = 0; j < B.n(); ++j) {
    for (int jp = 0; jp < B.n(); ++jp) {
      for (int l = 0; l < B.p(); ++l) items.push_back({std::abs(B(j, jp, l)), j, jp, l});
    }
  }
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    return std::tie(a.j, a.jp, a.l) < std::tie(b.j, b.jp, b.l);
  });
  mrglmm::CoefTensor out(B.n(), B.p());
  for (size_t q = 0; q < std::min(k, items.size()); ++q) {
    const auto& it = items[q];
    out(it.j, it.jp, it.l) = B(it.j, it.jp, it.l);
  }
  return out;
}

// Gaussian marginal log-likelihood by a dense Cholesky of each entry's
// T x T covariance sigma_e2 I + v 11^T.
inline double gaussian_marginal(const mrglmm::ModelParams& P, const mrglmm::LongitudinalNetworkDataset& d) {
  const int n = d.n;
  const MatrixXd Th = P.intercept();
  double total = 0.0;
  for (const auto& s : d.subjects) {
    const int T = s.times();
    for (int j = 0; j < n; ++j) {
      for (int jp = 0; jp < n; ++jp) {
        if (d.diagonal_policy == mrglmm::DiagonalPolicy::exclude && j == jp) continue;
        const double v = P.Sigma_theta(j, jp);
        MatrixXd C = MatrixXd::Constant(T, T, v);
        C.diagonal().array() += P.sigma_e2;
        Eigen::VectorXd r(T);
        for (int t = 0; t < T; ++t) {
          double eta = Th(j, jp);
          for (int l = 0; l < d.p; ++l) eta += P.B(j, jp, l) * s.covariates[t](l);
          r(t) = s.responses[t](j, jp) - eta;
        }
        const Eigen::LLT<MatrixXd> llt(C);
        const MatrixXd L = llt.matrixL();
        const double logdet = 2.0 * L.diagonal().array().log().sum();
        const double quad = r.dot(llt.solve(r));
        total += -0.5 * (T * std::log(2.0 * M_PI) + logdet + quad);
      }
    }
  }
  return total;
}

inline double mean(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Batch-means standard error of the mean for a correlated sequence.
inline double batch_se(const std::vector<double>& x, size_t batches = 50) {
  const size_t len = x.size() / batches;
  std::vector<double> means(batches, 0.0);
  for (size_t b = 0; b < batches; ++b) {
    for (size_t k = 0; k < len; ++k) means[b] += x[b * len + k];
    means[b] /= static_cast<double>(len);
  }
  const double m = mean(means);
  double ss = 0.0;
  for (double v : means) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(batches - 1) / static_cast<double>(batches));
}

}  // namespace oracle
