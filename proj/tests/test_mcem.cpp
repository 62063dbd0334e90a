#include "helpers.hpp"
#include "oracles.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/mcem.hpp"
#include "mrglmm/parallel.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <doctest.h>

#include <Eigen/SVD>

#include <cmath>
#include <limits>

using namespace mrglmm;
using testutil::randn;

namespace {

// Dataset whose every response is exactly `base` (Gaussian).
LongitudinalNetworkDataset constant_dataset(const MatrixXd& base, int N, int T, int p) {
  LongitudinalNetworkDataset d;
  d.n = static_cast<int>(base.rows());
  d.p = p;
  d.diagonal_policy = DiagonalPolicy::include;
  for (int i = 0; i < N; ++i) {
    SubjectRecord s;
    s.id = static_cast<std::uint64_t>(i);
    for (int t = 0; t < T; ++t) {
      s.responses.push_back(base);
      s.covariates.push_back(VectorXd::Zero(p));
    }
    d.subjects.push_back(s);
  }
  return d;
}

McemConfig small_config() {
  McemConfig cfg;
  cfg.r = 2;
  cfg.mwg.M = 10;
  cfg.mwg.burn_in = 10;
  cfg.max_outer_iters = 6;
  cfg.mstep.max_inner_iters = 30;
  cfg.mstep.s = 0.2;
  return cfg;
}

void check_same(const FitReport& a, const FitReport& b) {
  CHECK(a.params.U == b.params.U);
  CHECK(a.params.V == b.params.V);
  CHECK(a.params.B == b.params.B);
  CHECK(a.params.sigma_e2 == b.params.sigma_e2);
  CHECK(a.loglik_hat == b.loglik_hat);
  REQUIRE(a.trace.size() == b.trace.size());
  for (size_t k = 0; k < a.trace.size(); ++k) {
    CHECK(a.trace[k].penalized == b.trace[k].penalized);
    CHECK(a.trace[k].observed == b.trace[k].observed);
  }
}

// log of the entry integral by adaptive Gauss-Kronrod over the real line.
double entry_integral(const Family& fam, const std::vector<double>& a, const std::vector<double>& eta, double v,
                      double s2) {
  auto logf = [&](double u) {
    double s = -0.5 * std::log(2.0 * M_PI * v) - u * u / (2.0 * v);
    for (size_t t = 0; t < a.size(); ++t) s += entry_logdensity(fam, a[t], eta[t] + u, s2);
    return s;
  };
  double peak = -std::numeric_limits<double>::infinity();
  for (double u = -30.0; u <= 30.0; u += 0.01) peak = std::max(peak, logf(u));
  auto f = [&](double u) { return std::exp(logf(u) - peak); };
  const double inf = std::numeric_limits<double>::infinity();
  const double val = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, -inf, inf, 15, 1e-14);
  return peak + std::log(val);
}

}  // namespace

TEST_SUITE("mcem") {

TEST_CASE("initialization reproduces an exactly low-rank mean") {
  std::mt19937_64 g(30);
  const MatrixXd u = randn(g, 5, 1);
  const MatrixXd v = randn(g, 5, 1);
  const MatrixXd base = u * v.transpose();
  const auto d = constant_dataset(base, 3, 2, 1);
  const auto P = initialize(d, Family::gaussian(), 1, MatrixXd::Ones(5, 5));
  CHECK((P.intercept() - base).norm() < 1e-10);
  CHECK((P.U.transpose() * P.U - P.V.transpose() * P.V).norm() < 1e-10);
  CHECK(P.B.nonzeros() == 0);
  CHECK(P.sigma_e2 == doctest::Approx(1e-8).epsilon(0.5));

  const MatrixXd full = randn(g, 4, 4);
  const auto df = constant_dataset(full, 2, 1, 1);
  CHECK((initialize(df, Family::gaussian(), 4, MatrixXd::Ones(4, 4)).intercept() - full).norm() < 1e-10);
  CHECK_THROWS_AS(initialize(df, Family::gaussian(), 5, MatrixXd::Ones(4, 4)), InvalidArgument);
}

TEST_CASE("initialization matches an independent full SVD") {
  std::mt19937_64 g(31);
  for (const Family fam : {Family::gaussian(), Family::logistic()}) {
    const auto d = testutil::random_dataset(g, fam, 6, 2, 5, 3);
    MatrixXd mean = MatrixXd::Zero(6, 6);
    int total = 0;
    for (const auto& s : d.subjects) {
      for (const auto& A : s.responses) {
        mean += A;
        ++total;
      }
    }
    mean /= total;
    if (!fam.is_gaussian()) {
      const double delta = 1.0 / (2.0 * total);
      mean = mean.unaryExpr([&](double a) {
        const double c = std::min(std::max(a, delta), 1.0 - delta);
        return std::log(c / (1.0 - c));
      });
    }
    const Eigen::JacobiSVD<MatrixXd> svd(mean, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const int r = 2;
    const MatrixXd best = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
                          svd.matrixV().leftCols(r).transpose();
    const auto P = initialize(d, fam, r, MatrixXd::Ones(6, 6));
    CHECK((P.intercept() - best).norm() < 1e-8);
    CHECK(P.intercept().allFinite());
  }
}

TEST_CASE("empirical-logit clamp keeps all-zero cells finite") {
  LongitudinalNetworkDataset d;
  d.n = 3;
  d.p = 1;
  SubjectRecord s;
  s.id = 0;
  s.responses.push_back(MatrixXd::Zero(3, 3));
  s.covariates.push_back(VectorXd::Zero(1));
  d.subjects.push_back(s);
  const auto P = initialize(d, Family::logistic(), 1, MatrixXd::Ones(3, 3));
  CHECK(P.intercept().allFinite());
}

TEST_CASE("skipping the M-step returns the initialization") {
  std::mt19937_64 g(32);
  const auto d = testutil::random_dataset(g, Family::gaussian(), 4, 2, 4, 2);
  auto cfg = small_config();
  cfg.mstep.max_inner_iters = 0;
  cfg.max_outer_iters = 3;
  const auto rep = fit(d, Family::gaussian(), cfg);
  const auto init = initialize(d, Family::gaussian(), cfg.r, cfg.sigma_theta_for(4));
  CHECK(rep.params.U == init.U);
  CHECK(rep.params.V == init.V);
  CHECK(rep.params.B == init.B);
  CHECK(rep.params.sigma_e2 == init.sigma_e2);
}

TEST_CASE("fits are deterministic and invariant to subject order and threads") {
  std::mt19937_64 g(33);
  for (const Family fam : {Family::gaussian(), Family::logistic()}) {
    const auto d = testutil::random_dataset(g, fam, 4, 2, 5, 3);
    const auto cfg = small_config();
    const int saved = thread_count();
    set_thread_count(1);
    const auto a = fit(d, fam, cfg);
    set_thread_count(3);
    const auto b = fit(d, fam, cfg);
    auto shuffled = d;
    std::reverse(shuffled.subjects.begin(), shuffled.subjects.end());
    const auto c = fit(shuffled, fam, cfg);
    set_thread_count(saved);
    check_same(a, b);
    check_same(a, c);
    CHECK(a.iterations == static_cast<int>(a.trace.size()));
    CHECK(a.best_iteration >= 1);
    for (const auto& rec : a.trace) CHECK(rec.inner_max_increase == 0.0);
  }
}

TEST_CASE("symmetric start absorbs signs") {
  std::mt19937_64 g(34);
  auto P = testutil::random_params(g, 4, 2, 1);
  P.V = P.U;
  auto S = symmetric_start(P);
  CHECK(S.Lambda == VectorXd::Ones(2));
  CHECK(S.U == P.U);
  P.V = -P.U;
  S = symmetric_start(P);
  CHECK(S.Lambda == -VectorXd::Ones(2));
  CHECK((S.U - P.U).norm() == 0.0);
  P.V = MatrixXd::Zero(4, 2);
  std::vector<std::string> warnings;
  S = symmetric_start(P, &warnings);
  CHECK(S.Lambda == VectorXd::Ones(2));
  CHECK(warnings.size() == 2);
  CHECK_THROWS_AS(symmetric_start(S), InvalidArgument);
}

TEST_CASE("symmetric refinement is exactly symmetric and close to the asymmetric fit") {
  std::mt19937_64 g(35);
  const int n = 6;
  const MatrixXd U = randn(g, n, 2);
  LongitudinalNetworkDataset d;
  d.n = n;
  d.p = 1;
  d.diagonal_policy = DiagonalPolicy::include;
  std::normal_distribution<double> nd(0.0, 0.3);
  for (int i = 0; i < 8; ++i) {
    SubjectRecord s;
    s.id = static_cast<std::uint64_t>(i);
    for (int t = 0; t < 3; ++t) {
      MatrixXd A = U * U.transpose();
      for (Eigen::Index q = 0; q < A.size(); ++q) A.data()[q] += nd(g);
      s.responses.push_back(A);
      s.covariates.push_back(randn(g, 1, 1));
    }
    d.subjects.push_back(s);
  }
  McemConfig cfg = small_config();
  cfg.mstep.s = 0.0;
  cfg.mwg.M = 30;
  cfg.sigma_theta = 0.05;
  cfg.max_outer_iters = 10;
  const auto asym = fit(d, Family::gaussian(), cfg);
  const auto sym = refine_symmetric(d, Family::gaussian(), cfg, asym.params);
  const MatrixXd Th = sym.params.intercept();
  CHECK((Th - Th.transpose()).norm() == 0.0);
  const double a_obj = -asym.loglik_hat;
  const double s_obj = -sym.loglik_hat;
  CHECK(std::abs(s_obj - a_obj) <= 0.01 * std::abs(a_obj));
}

TEST_CASE("gauss-hermite rule integrates polynomials exactly") {
  for (int points : {1, 2, 5, 20, 40}) {
    const auto rule = gauss_hermite(points);
    double w = 0.0, x2 = 0.0, x4 = 0.0, odd = 0.0;
    for (int k = 0; k < points; ++k) {
      const double x = rule.nodes[k];
      w += rule.weights[k];
      x2 += rule.weights[k] * x * x;
      x4 += rule.weights[k] * x * x * x * x;
      odd += rule.weights[k] * x * x * x;
    }
    const double sp = std::sqrt(M_PI);
    CHECK(w == doctest::Approx(sp).epsilon(1e-13));
    CHECK(std::abs(odd) < 1e-12);
    if (points >= 2) CHECK(x2 == doctest::Approx(sp / 2.0).epsilon(1e-13));
    if (points >= 3) CHECK(x4 == doctest::Approx(3.0 * sp / 4.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(gauss_hermite(0), InvalidArgument);
}

TEST_CASE("gaussian observed likelihood matches a dense-Cholesky oracle") {
  std::mt19937_64 g(36);
  for (auto policy : {DiagonalPolicy::exclude, DiagonalPolicy::include}) {
    const auto d = testutil::random_dataset(g, Family::gaussian(), 4, 2, 5, 4, policy);
    auto P = testutil::random_params(g, 4, 2, 2);
    P.Sigma_theta = (randn(g, 4, 4).array().abs() + 0.2).matrix();
    const double ref = oracle::gaussian_marginal(P, d);
    CHECK(std::abs(estimate_loglik(P, Family::gaussian(), d, 20) - ref) < 1e-8);
    CHECK(std::abs(gaussian_marginal_loglik(P, d) - ref) < 1e-8);
  }
}

TEST_CASE("vanishing prior variance reduces to the conditional likelihood at zero") {
  std::mt19937_64 g(37);
  for (const Family fam : {Family::gaussian(), Family::logistic()}) {
    const auto d = testutil::random_dataset(g, fam, 3, 1, 3, 3);
    auto P = testutil::random_params(g, 3, 1, 1);
    P.Sigma_theta = MatrixXd::Constant(3, 3, 1e-10);
    double ref = 0.0;
    for (const auto& s : d.subjects) ref += subject_loglik(P, fam, s, MatrixXd::Zero(3, 3), d.mask());
    CHECK(std::abs(estimate_loglik(P, fam, d, 20) - ref) < 1e-6);
  }
}

TEST_CASE("logistic observed likelihood matches adaptive Gauss-Kronrod") {
  std::mt19937_64 g(38);
  const auto d = testutil::random_dataset(g, Family::logistic(), 3, 2, 3, 4);
  auto P = testutil::random_params(g, 3, 2, 2);
  P.Sigma_theta = MatrixXd::Constant(3, 3, 2.0);
  const MatrixXd Th = P.intercept();
  const EntryMask mask = d.mask();
  double ref = 0.0;
  for (const auto& s : d.subjects) {
    for (int e : mask.entries()) {
      std::vector<double> a, eta;
      for (int t = 0; t < s.times(); ++t) {
        a.push_back(s.responses[t].data()[e]);
        eta.push_back(Th.data()[e] + P.B.contract(s.covariates[t]).data()[e]);
      }
      ref += entry_integral(Family::logistic(), a, eta, 2.0, 1.0);
    }
  }
  CHECK(estimate_loglik(P, Family::logistic(), d, 20) == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("observed likelihood climbs along the EM path up to Monte Carlo noise") {
  std::mt19937_64 g(39);
  const int n = 5;
  const MatrixXd U = randn(g, n, 2);
  LongitudinalNetworkDataset d;
  d.n = n;
  d.p = 2;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    SubjectRecord s;
    s.id = static_cast<std::uint64_t>(i);
    const MatrixXd theta = randn(g, n, n, 0.5);
    for (int t = 0; t < 3; ++t) {
      const VectorXd x = randn(g, 2, 1);
      MatrixXd A = U * U.transpose() + theta;
      A(0, 1) += 2.0 * x(0);
      for (Eigen::Index q = 0; q < A.size(); ++q) A.data()[q] += 0.5 * nd(g);
      s.responses.push_back(A);
      s.covariates.push_back(x);
    }
    d.subjects.push_back(s);
  }
  McemConfig cfg;
  cfg.r = 2;
  cfg.mwg.M = 2000;
  cfg.mwg.burn_in = 100;
  cfg.mstep.s = 0.1;
  cfg.sigma_theta = 0.25;
  cfg.eps_EM = 1e-12;
  cfg.max_outer_iters = 12;
  const auto rep = fit(d, Family::gaussian(), cfg);
  std::vector<double> ll;
  for (const auto& rec : rep.trace) ll.push_back(rec.loglik_hat);
  // Noise level: spread of the settled second half of the path.
  std::vector<double> tail(ll.begin() + static_cast<long>(ll.size() / 2), ll.end());
  const double m = oracle::mean(tail);
  double ss = 0.0;
  for (double v : tail) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / static_cast<double>(tail.size() - 1));
  for (size_t k = 1; k < ll.size(); ++k) CHECK(ll[k] - ll[k - 1] > -3.0 * std::max(sd, 1e-9));
  CHECK(ll.back() > ll.front());
}

TEST_CASE("config validation") {
  McemConfig cfg;
  cfg.r = 0;
  CHECK_THROWS_AS(cfg.validate(5), InvalidArgument);
  cfg.r = 2;
  cfg.eps_EM = 0.0;
  CHECK_THROWS_AS(cfg.validate(5), InvalidArgument);
  cfg.eps_EM = 1e-4;
  cfg.sigma_theta_matrix = MatrixXd::Ones(3, 3);
  CHECK_THROWS_AS(cfg.sigma_theta_for(5), InvalidArgument);
}

}  // TEST_SUITE mcem
