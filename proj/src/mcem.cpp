#include "mrglmm/mcem.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/objective.hpp"
#include "mrglmm/parallel.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <optional>

namespace mrglmm {

MatrixXd McemConfig::sigma_theta_for(int n) const {
  if (sigma_theta_matrix.size() != 0) {
    if (sigma_theta_matrix.rows() != n || sigma_theta_matrix.cols() != n) {
      throw InvalidArgument("config: sigma_theta matrix must be n x n");
    }
    return sigma_theta_matrix;
  }
  return MatrixXd::Constant(n, n, sigma_theta);
}

void McemConfig::validate(int n) const {
  if (r < 1 || r > n) throw InvalidArgument("config: rank r must satisfy 1 <= r <= n");
  mwg.validate();
  mstep.validate();
  if (!(eps_EM > 0.0)) throw InvalidArgument("config: eps_EM must be positive");
  if (stable_iters < 1) throw InvalidArgument("config: stable_iters must be >= 1");
  if (max_outer_iters < 1) throw InvalidArgument("config: max_outer_iters must be >= 1");
  if (quad_points < 1) throw InvalidArgument("config: quad_points must be >= 1");
  if (sigma_theta_matrix.size() == 0 && !(sigma_theta > 0.0)) {
    throw InvalidArgument("config: sigma_theta must be positive");
  }
}

namespace {

constexpr double kVarianceFloor = 1e-8;

// Subjects sorted by id, so results do not depend on input order.
const LongitudinalNetworkDataset& canonical(const LongitudinalNetworkDataset& dataset,
                                            std::optional<LongitudinalNetworkDataset>& storage) {
  const bool sorted = std::is_sorted(dataset.subjects.begin(), dataset.subjects.end(),
                                     [](const auto& a, const auto& b) { return a.id < b.id; });
  if (sorted) return dataset;
  storage = dataset;
  std::sort(storage->subjects.begin(), storage->subjects.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return *storage;
}

void refresh_sigma_theta(const MwgState& state, const EntryMask& mask, MatrixXd& Sigma_theta) {
  const double denom = static_cast<double>(state.subjects.size()) * state.M;
  for (int e : mask.entries()) {
    double total = 0.0;
    for (const auto& chain : state.subjects) total += chain.samples.col(e).squaredNorm();
    Sigma_theta.data()[e] = std::max(total / denom, kVarianceFloor);
  }
}

FitReport run_em(const LongitudinalNetworkDataset& dataset, const Family& family, const McemConfig& config,
                 ModelParams params) {
  const auto start = std::chrono::steady_clock::now();
  const EntryMask mask = dataset.mask();
  const double gamma = params.mode == FactorMode::symmetric ? 0.0 : config.mstep.gamma;

  FitReport report;
  report.params = params;
  double best = std::numeric_limits<double>::infinity();
  double previous = 0.0;
  int stable = 0;
  MwgState state;

  for (int h = 1; h <= config.max_outer_iters; ++h) {
    state = draw_samples(params, family, dataset, config.mwg, static_cast<std::uint32_t>(h),
                         h > 1 ? &state : nullptr);
    if (config.sigma_theta_mode == SigmaThetaMode::moment_refresh) {
      refresh_sigma_theta(state, mask, params.Sigma_theta);
    }
    const McObjective objective(family, dataset, state, mask);
    MstepResult ms = run_mstep(objective, params, config.mstep);
    params = std::move(ms.params);
    if (family.is_gaussian() && config.sigma_e2_update && config.mstep.max_inner_iters > 0) {
      params.sigma_e2 = std::max(objective.mean_squared_residual(params), kVarianceFloor);
    }

    IterationRecord rec;
    rec.q1 = objective.evaluate(params, McObjective::Want::value).q1;
    rec.q2 = q2(state, params.Sigma_theta, mask);
    rec.penalized = rec.q1 + rec.q2 + balance_penalty(params, gamma);
    rec.sigma_e2 = params.sigma_e2;
    rec.acceptance = state.mean_acceptance(mask);
    rec.inner_iterations = ms.iterations;
    rec.inner_converged = ms.converged;
    rec.inner_max_increase = ms.max_increase();
    rec.loglik_hat = estimate_loglik(params, family, dataset, config.quad_points);
    rec.observed = -rec.loglik_hat + balance_penalty(params, gamma);
    if (!std::isfinite(rec.penalized) || !std::isfinite(rec.observed)) {
      throw NumericalError("mcem: objective diverged at iteration " + std::to_string(h), h);
    }
    report.trace.push_back(rec);
    report.mean_acceptance = rec.acceptance;

    if (rec.observed < best) {
      best = rec.observed;
      report.params = params;
      report.loglik_hat = rec.loglik_hat;
      report.best_iteration = h;
    }
    if (h > 1) {
      const double rel = std::abs(rec.observed - previous) / (std::abs(previous) + 1.0);
      stable = rel < config.eps_EM ? stable + 1 : 0;
      if (stable >= config.stable_iters) {
        report.converged = true;
        break;
      }
    }
    previous = rec.observed;
  }
  report.iterations = static_cast<int>(report.trace.size());
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

ModelParams initialize(const LongitudinalNetworkDataset& dataset, const Family& family, int r,
                       const MatrixXd& Sigma_theta) {
  const int n = dataset.n;
  if (r < 1 || r > n) throw InvalidArgument("initialize: rank r must satisfy 1 <= r <= n");
  const int total = dataset.total_observations();
  if (total == 0) throw InvalidArgument("initialize: dataset has no observations");

  MatrixXd mean = MatrixXd::Zero(n, n);
  for (const auto& s : dataset.subjects) {
    for (const auto& A : s.responses) mean += A;
  }
  mean /= static_cast<double>(total);
  MatrixXd target = mean;
  if (!family.is_gaussian()) {
    const double delta = 1.0 / (2.0 * total);
    target = mean.unaryExpr([&](double a) { return family.link(std::clamp(a, delta, 1.0 - delta)); });
  }
  if (!target.allFinite()) throw InvalidArgument("initialize: non-finite mean response");

  Eigen::BDCSVD<MatrixXd> svd(target, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd root = svd.singularValues().head(r).cwiseSqrt();

  ModelParams params;
  params.mode = FactorMode::asymmetric;
  params.U = svd.matrixU().leftCols(r) * root.asDiagonal();
  params.V = svd.matrixV().leftCols(r) * root.asDiagonal();
  params.B = CoefTensor(n, dataset.p);
  params.Sigma_theta = Sigma_theta;
  params.sigma_e2 = 1.0;
  if (family.is_gaussian()) {
    const MatrixXd theta0 = params.intercept();
    const EntryMask mask = dataset.mask();
    double ss = 0.0;
    for (const auto& s : dataset.subjects) {
      for (const auto& A : s.responses) {
        for (int e : mask.entries()) {
          const double d = A.data()[e] - theta0.data()[e];
          ss += d * d;
        }
      }
    }
    params.sigma_e2 = std::max(ss / (static_cast<double>(total) * std::max(mask.count(), 1)), kVarianceFloor);
  }
  return params;
}

FitReport fit(const LongitudinalNetworkDataset& dataset_in, const Family& family, const McemConfig& config,
              const ModelParams* warm_start) {
  config.validate(dataset_in.n);
  dataset_in.validate(family);
  std::optional<LongitudinalNetworkDataset> storage;
  const LongitudinalNetworkDataset& dataset = canonical(dataset_in, storage);
  const MatrixXd Sigma_theta = config.sigma_theta_for(dataset.n);

  ModelParams params;
  if (warm_start != nullptr) {
    params = *warm_start;
    params.Sigma_theta = Sigma_theta;
    if (params.n() != dataset.n || params.p() != dataset.p) {
      throw InvalidArgument("fit: warm start dimensions do not match the dataset");
    }
  } else {
    params = initialize(dataset, family, config.r, Sigma_theta);
  }
  params.validate();
  if (config.mode == FactorMode::symmetric && params.mode != FactorMode::symmetric) {
    throw InvalidArgument("fit: symmetric mode needs a symmetric start (use refine_symmetric)");
  }
  return run_em(dataset, family, config, std::move(params));
}

ModelParams symmetric_start(const ModelParams& asym, std::vector<std::string>* warnings) {
  if (asym.mode != FactorMode::asymmetric) {
    throw InvalidArgument("refine_symmetric: expected an asymmetric fit");
  }
  const int r = asym.r();
  ModelParams out = asym;
  out.mode = FactorMode::symmetric;
  out.Lambda = VectorXd::Ones(r);
  for (int k = 0; k < r; ++k) {
    const double dot = asym.U.col(k).dot(asym.V.col(k));
    if (dot < 0.0) {
      out.Lambda[k] = -1.0;
    } else if (dot == 0.0 && warnings != nullptr) {
      warnings->push_back("refine_symmetric: column " + std::to_string(k) +
                          " has zero inner product; sign set to +1");
    }
  }
  out.U = 0.5 * (asym.U + asym.V * out.Lambda.asDiagonal());
  out.V.resize(0, 0);
  return out;
}

FitReport refine_symmetric(const LongitudinalNetworkDataset& dataset_in, const Family& family,
                           const McemConfig& config, const ModelParams& asym_fit) {
  config.validate(dataset_in.n);
  dataset_in.validate(family);
  if (asym_fit.r() != config.r) throw InvalidArgument("refine_symmetric: rank differs from the asymmetric fit");
  std::optional<LongitudinalNetworkDataset> storage;
  const LongitudinalNetworkDataset& dataset = canonical(dataset_in, storage);
  std::vector<std::string> warnings;
  ModelParams params = symmetric_start(asym_fit, &warnings);
  params.Sigma_theta = config.sigma_theta_for(dataset.n);
  params.validate();
  FitReport report = run_em(dataset, family, config, std::move(params));
  report.warnings.insert(report.warnings.begin(), warnings.begin(), warnings.end());
  return report;
}

GaussHermiteRule gauss_hermite(int points) {
  if (points < 1) throw InvalidArgument("gauss_hermite: need at least one node");
  // Golub-Welsch for starting values, then Newton polish on the orthonormal
  // Hermite recurrence.
  MatrixXd J = MatrixXd::Zero(points, points);
  for (int k = 1; k < points; ++k) {
    J(k - 1, k) = J(k, k - 1) = std::sqrt(k / 2.0);
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(J);
  GaussHermiteRule rule;
  const double pim4 = 0.7511255444649425;  // pi^{-1/4}
  for (int k = 0; k < points; ++k) {
    double x = eig.eigenvalues()[k];
    double deriv = 1.0;
    for (int iter = 0; iter < 20; ++iter) {
      double p1 = pim4;
      double p2 = 0.0;
      for (int j = 1; j <= points; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = x * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
      }
      deriv = std::sqrt(2.0 * points) * p2;
      const double dx = p1 / deriv;
      x -= dx;
      if (std::abs(dx) <= 1e-15 * std::max(1.0, std::abs(x))) break;
    }
    rule.nodes.push_back(x);
    rule.weights.push_back(2.0 / (deriv * deriv));
  }
  return rule;
}

namespace {

const GaussHermiteRule& cached_rule(int points) {
  static std::mutex mutex;
  static std::map<int, GaussHermiteRule> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(points);
  if (it == cache.end()) it = cache.emplace(points, gauss_hermite(points)).first;
  return it->second;
}

// log of  int prod_t f(a_t | eta_t + u) N(u; 0, v) du  for one entry.
double entry_marginal(const Family& family, const double* a, const double* eta, int T, double v, double sigma_e2,
                      const GaussHermiteRule& rule) {
  auto loglik = [&](double u) {
    double s = 0.0;
    for (int t = 0; t < T; ++t) s += entry_logdensity(family, a[t], eta[t] + u, sigma_e2);
    return s;
  };
  if (!(v > 0.0)) return loglik(0.0);
  auto h = [&](double u) { return loglik(u) - u * u / (2.0 * v); };
  auto derivs = [&](double u, double& g, double& w) {
    g = -u / v;
    w = 1.0 / v;
    for (int t = 0; t < T; ++t) {
      if (family.is_gaussian()) {
        g += (a[t] - eta[t] - u) / sigma_e2;
        w += 1.0 / sigma_e2;
      } else {
        const double pi = sigmoid(eta[t] + u);
        g += a[t] - pi;
        w += pi * (1.0 - pi);
      }
    }
  };

  // Damped Newton for the mode of the (strictly concave) log integrand.
  double u = 0.0;
  double hu = h(u);
  double g = 0.0;
  double w = 1.0;
  for (int iter = 0; iter < 100; ++iter) {
    derivs(u, g, w);
    double step = g / w;
    double next = u + step;
    double hn = h(next);
    int halvings = 0;
    while (!(hn >= hu) && halvings < 60) {
      step *= 0.5;
      next = u + step;
      hn = h(next);
      ++halvings;
    }
    if (!(hn >= hu)) break;
    const bool done = std::abs(step) <= 1e-13 * (1.0 + std::abs(u));
    u = next;
    hu = hn;
    if (done) break;
  }
  derivs(u, g, w);
  const double tau = 1.0 / std::sqrt(w);
  const double scale = std::sqrt(2.0) * tau;

  double peak = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(rule.nodes.size());
  for (size_t k = 0; k < rule.nodes.size(); ++k) {
    const double x = rule.nodes[k];
    terms[k] = std::log(rule.weights[k]) + x * x + h(u + scale * x);
    peak = std::max(peak, terms[k]);
  }
  double acc = 0.0;
  for (double term : terms) acc += std::exp(term - peak);
  return peak + std::log(acc) + std::log(scale) - 0.5 * (kLog2Pi + std::log(v));
}

}  // namespace

double estimate_loglik(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                       int quad_points) {
  const GaussHermiteRule& rule = cached_rule(quad_points);
  const EntryMask mask = dataset.mask();
  const MatrixXd intercept = params.intercept();
  std::vector<double> per_subject(dataset.subjects.size(), 0.0);
  parallel_for(dataset.subject_count(), [&](int i) {
    const SubjectRecord& subject = dataset.subjects[static_cast<size_t>(i)];
    const int T = subject.times();
    std::vector<MatrixXd> eta(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) eta[t] = intercept + params.B.contract(subject.covariates[t]);
    std::vector<double> a(static_cast<size_t>(T));
    std::vector<double> e0(static_cast<size_t>(T));
    double total = 0.0;
    for (int e : mask.entries()) {
      for (int t = 0; t < T; ++t) {
        a[t] = subject.responses[t].data()[e];
        e0[t] = eta[t].data()[e];
      }
      total += entry_marginal(family, a.data(), e0.data(), T, params.Sigma_theta.data()[e], params.sigma_e2, rule);
    }
    per_subject[static_cast<size_t>(i)] = total;
  });
  double total = 0.0;
  for (double v : per_subject) total += v;
  return total;
}

double gaussian_marginal_loglik(const ModelParams& params, const LongitudinalNetworkDataset& dataset) {
  const EntryMask mask = dataset.mask();
  const MatrixXd intercept = params.intercept();
  const double s2 = params.sigma_e2;
  double total = 0.0;
  for (const auto& subject : dataset.subjects) {
    const int T = subject.times();
    MatrixXd sum = MatrixXd::Zero(dataset.n, dataset.n);
    MatrixXd sumsq = MatrixXd::Zero(dataset.n, dataset.n);
    for (int t = 0; t < T; ++t) {
      const MatrixXd r = subject.responses[t] - intercept - params.B.contract(subject.covariates[t]);
      sum += r;
      sumsq += r.cwiseAbs2();
    }
    for (int e : mask.entries()) {
      const double v = params.Sigma_theta.data()[e];
      const double denom = s2 + T * v;
      const double logdet = (T - 1) * std::log(s2) + std::log(denom);
      const double quad = (sumsq.data()[e] - v * sum.data()[e] * sum.data()[e] / denom) / s2;
      total += -0.5 * (T * kLog2Pi + logdet + quad);
    }
  }
  return total;
}

}  // namespace mrglmm
