#include "helpers.hpp"
#include "oracles.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/objective.hpp"
#include "mrglmm/parallel.hpp"
#include "mrglmm/sampler.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace mrglmm;
using testutil::randn;

namespace {

LongitudinalNetworkDataset single_entry(const Family&, const std::vector<double>& a, const std::vector<double>& x) {
  LongitudinalNetworkDataset d;
  d.n = 1;
  d.p = 1;
  d.diagonal_policy = DiagonalPolicy::include;
  SubjectRecord s;
  s.id = 1;
  for (size_t t = 0; t < a.size(); ++t) {
    s.responses.push_back(MatrixXd::Constant(1, 1, a[t]));
    s.covariates.push_back(VectorXd::Constant(1, x[t]));
  }
  d.subjects.push_back(s);
  return d;
}

ModelParams single_params(double u, double v, double b, double s2, double prior) {
  ModelParams P;
  P.U = MatrixXd::Constant(1, 1, u);
  P.V = MatrixXd::Constant(1, 1, v);
  P.B = CoefTensor(1, 1);
  P.B(0, 0, 0) = b;
  P.sigma_e2 = s2;
  P.Sigma_theta = MatrixXd::Constant(1, 1, prior);
  return P;
}

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("draws are identical across reruns and thread counts") {
  std::mt19937_64 g(1);
  for (const Family fam : {Family::gaussian(), Family::logistic()}) {
    const auto d = testutil::random_dataset(g, fam, 4, 2, 5, 3);
    const auto P = testutil::random_params(g, 4, 2, 2);
    MwgConfig cfg;
    cfg.M = 20;
    cfg.burn_in = 10;
    cfg.seed = 99;
    const int saved = thread_count();
    set_thread_count(1);
    const MwgState a = draw_samples(P, fam, d, cfg, 3);
    set_thread_count(4);
    const MwgState b = draw_samples(P, fam, d, cfg, 3);
    set_thread_count(saved);
    for (size_t i = 0; i < a.subjects.size(); ++i) {
      CHECK(a.subjects[i].samples == b.subjects[i].samples);
      CHECK(a.subjects[i].proposal_sd == b.subjects[i].proposal_sd);
    }
    const MwgState c = draw_samples(P, fam, d, cfg, 4);
    CHECK(c.subjects[0].samples != a.subjects[0].samples);
  }
}

TEST_CASE("chains are keyed by subject id, not position") {
  std::mt19937_64 g(2);
  const auto d = testutil::random_dataset(g, Family::gaussian(), 3, 1, 4, 2);
  const auto P = testutil::random_params(g, 3, 1, 1);
  auto shuffled = d;
  std::reverse(shuffled.subjects.begin(), shuffled.subjects.end());
  MwgConfig cfg;
  cfg.M = 5;
  cfg.burn_in = 5;
  const auto a = draw_samples(P, Family::gaussian(), d, cfg);
  const auto b = draw_samples(P, Family::gaussian(), shuffled, cfg);
  for (size_t i = 0; i < a.subjects.size(); ++i) {
    CHECK(a.subjects[i].samples == b.subjects[a.subjects.size() - 1 - i].samples);
  }
}

TEST_CASE("masked-out entries stay at zero and acceptance is a rate") {
  std::mt19937_64 g(3);
  const auto d = testutil::random_dataset(g, Family::logistic(), 4, 2, 3, 2);
  const auto P = testutil::random_params(g, 4, 2, 2);
  MwgConfig cfg;
  cfg.M = 30;
  cfg.burn_in = 30;
  const auto st = draw_samples(P, Family::logistic(), d, cfg);
  for (const auto& chain : st.subjects) {
    for (int j = 0; j < 4; ++j) {
      CHECK(chain.samples.col(j * 4 + j).isZero());
      CHECK(chain.last(j, j) == 0.0);
    }
    CHECK((chain.acceptance_rate.array() >= 0.0).all());
    CHECK((chain.acceptance_rate.array() <= 1.0).all());
  }
  const double acc = st.mean_acceptance(d.mask());
  CHECK(acc > 0.2);
  CHECK(acc < 0.7);
}

TEST_CASE("single sweep honours the mask and the counter address") {
  std::mt19937_64 g(4);
  const auto d = testutil::random_dataset(g, Family::gaussian(), 3, 1, 1, 2);
  const auto P = testutil::random_params(g, 3, 1, 1);
  const MatrixXd start = randn(g, 3, 3);
  MwgConfig cfg;
  const SweepAddress addr{5, 1, d.subjects[0].id, 0};
  const auto a = mwg_sweep(P, Family::gaussian(), d.subjects[0], start, cfg, d.mask(), addr);
  const auto b = mwg_sweep(P, Family::gaussian(), d.subjects[0], start, cfg, d.mask(), addr);
  CHECK(a.theta == b.theta);
  for (int j = 0; j < 3; ++j) CHECK(a.theta(j, j) == start(j, j));
  for (int j = 0; j < 3; ++j) {
    for (int jp = 0; jp < 3; ++jp) {
      if (j == jp) continue;
      CHECK((a.accepted(j, jp) == 1) == (a.theta(j, jp) != start(j, jp)));
    }
  }
  auto bad = P;
  bad.Sigma_theta(0, 1) = 0.0;
  CHECK_THROWS_AS(mwg_sweep(bad, Family::gaussian(), d.subjects[0], start, cfg, d.mask(), addr), InvalidArgument);
}

TEST_CASE("gaussian chain matches the conjugate posterior moments") {
  const auto d = single_entry(Family::gaussian(), {1.2, 0.4, 2.0}, {0.5, -1.0, 0.3});
  const auto P = single_params(0.8, 0.5, 0.6, 0.7, 2.0);
  MwgConfig cfg;
  cfg.M = 40000;
  cfg.burn_in = 500;
  cfg.seed = 12;
  const auto st = draw_samples(P, Family::gaussian(), d, cfg);
  const auto post = exact_gaussian_posterior(P, Family::gaussian(), d, P.Sigma_theta);
  const double mean_star = post[0].mean(0, 0);
  const double var_star = post[0].variance(0, 0);
  // independent evaluation of the conjugate formulas
  double resid = 0.0;
  for (int t = 0; t < 3; ++t) {
    resid += d.subjects[0].responses[t](0, 0) - 0.4 - 0.6 * d.subjects[0].covariates[t](0);
  }
  const double v = 1.0 / (3.0 / 0.7 + 1.0 / 2.0);
  CHECK(var_star == doctest::Approx(v).epsilon(1e-14));
  CHECK(mean_star == doctest::Approx(v * resid / 0.7).epsilon(1e-14));

  std::vector<double> x(st.subjects[0].samples.data(), st.subjects[0].samples.data() + cfg.M);
  std::vector<double> sq(x.size());
  double m = 0.0;
  for (double xi : x) m += xi;
  m /= static_cast<double>(x.size());
  for (size_t k = 0; k < x.size(); ++k) sq[k] = (x[k] - mean_star) * (x[k] - mean_star);
  double mv = 0.0;
  for (double s : sq) mv += s;
  mv /= static_cast<double>(sq.size());
  CHECK(std::abs(m - mean_star) < 4.0 * oracle::batch_se(x));
  CHECK(std::abs(mv - var_star) < 4.0 * oracle::batch_se(sq));
}

TEST_CASE("gaussian posterior is unsupported for the logistic family") {
  const auto d = single_entry(Family::logistic(), {1.0}, {0.0});
  const auto P = single_params(0.1, 0.1, 0.0, 1.0, 1.0);
  CHECK_THROWS_AS(exact_gaussian_posterior(P, Family::logistic(), d, P.Sigma_theta), UnsupportedOperation);
}

TEST_CASE("Q terms against naive loops over draws") {
  std::mt19937_64 g(8);
  for (const Family fam : {Family::gaussian(), Family::logistic()}) {
    const auto d = testutil::random_dataset(g, fam, 3, 2, 3, 3);
    const auto P = testutil::random_params(g, 3, 2, 2);
    const auto st = testutil::frozen_state(g, d, 4);
    const EntryMask mask = d.mask();
    double naive1 = 0.0, naive2 = 0.0;
    for (size_t i = 0; i < d.subjects.size(); ++i) {
      for (int m = 0; m < st.M; ++m) {
        const MatrixXd theta = st.sample(static_cast<int>(i), m);
        naive1 -= subject_loglik(P, fam, d.subjects[i], theta, mask);
        naive2 -= theta_logprior(theta, P.Sigma_theta, mask);
      }
    }
    CHECK(q1(P, fam, d, st, mask) == doctest::Approx(naive1 / st.M).epsilon(1e-11));
    CHECK(q2(st, P.Sigma_theta, mask) == doctest::Approx(naive2 / st.M).epsilon(1e-11));
  }
}

TEST_CASE("adaptation keeps scales in range and near the target rate") {
  std::mt19937_64 g(6);
  const auto d = testutil::random_dataset(g, Family::gaussian(), 3, 1, 2, 4);
  auto P = testutil::random_params(g, 3, 1, 1);
  MwgConfig cfg;
  cfg.M = 2000;
  cfg.burn_in = 2000;
  cfg.proposal_sd = 50.0;
  const auto st = draw_samples(P, Family::gaussian(), d, cfg);
  for (const auto& chain : st.subjects) {
    CHECK((chain.proposal_sd.array() >= 1e-8).all());
    CHECK((chain.proposal_sd.array() <= 1e3).all());
  }
  CHECK(std::abs(st.mean_acceptance(d.mask()) - 0.44) < 0.1);
}

TEST_CASE("warm start resumes from the previous state") {
  std::mt19937_64 g(7);
  const auto d = testutil::random_dataset(g, Family::gaussian(), 3, 1, 2, 2);
  const auto P = testutil::random_params(g, 3, 1, 1);
  MwgConfig cfg;
  cfg.M = 3;
  cfg.burn_in = 0;
  cfg.adapt = false;
  auto first = draw_samples(P, Family::gaussian(), d, cfg, 1);
  // Plant a far-away state: with tiny steps the next chain must stay near it.
  for (auto& chain : first.subjects) {
    chain.last = MatrixXd::Constant(3, 3, 7.0);
    chain.proposal_sd = MatrixXd::Constant(3, 3, 1e-6);
  }
  const auto second = draw_samples(P, Family::gaussian(), d, cfg, 2, &first);
  for (const auto& chain : second.subjects) {
    CHECK(std::abs(chain.samples(0, 1) - 7.0) < 1e-4);
    CHECK(chain.proposal_sd(0, 1) == 1e-6);
  }
}

}  // TEST_SUITE sampler
