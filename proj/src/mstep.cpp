#include "mrglmm/mstep.hpp"

#include "mrglmm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mrglmm {

std::size_t MstepConfig::budget(int n, int p) const {
  const auto per_slice = static_cast<std::size_t>(std::llround(s * static_cast<double>(n) * n));
  return per_slice * static_cast<std::size_t>(p);
}

void MstepConfig::validate() const {
  if (!(gamma >= 0.0)) throw InvalidArgument("mstep: gamma must be >= 0");
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidArgument("mstep: s must lie in [0, 1]");
  if (!(c0 > 0.0)) throw InvalidArgument("mstep: c0 must be positive");
  if (!(eps_M > 0.0)) throw InvalidArgument("mstep: eps_M must be positive");
  if (max_inner_iters < 0) throw InvalidArgument("mstep: max_inner_iters must be >= 0");
  for (double m : step_multipliers) {
    if (!(m > 0.0)) throw InvalidArgument("mstep: step multipliers must be positive");
  }
}

namespace {

constexpr double kMaxCurvature = 1152921504606846976.0;  // 2^60

MatrixXd balance_matrix(const ModelParams& params) {
  return params.U.transpose() * params.U - params.V.transpose() * params.V;
}

MatrixXd grad_U(const ModelParams& params, const MatrixXd& R, double gamma) {
  if (params.mode == FactorMode::symmetric) {
    return -(R + R.transpose()) * params.U * params.Lambda.asDiagonal();
  }
  MatrixXd g = -R * params.V;
  if (gamma != 0.0) g += 4.0 * gamma * params.U * balance_matrix(params);
  return g;
}

MatrixXd grad_V(const ModelParams& params, const MatrixXd& R, double gamma) {
  MatrixXd g = -R.transpose() * params.U;
  if (gamma != 0.0) g -= 4.0 * gamma * params.V * balance_matrix(params);
  return g;
}

CoefTensor grad_B(const CoefTensor& G) {
  CoefTensor g = G;
  g.flat() *= -1.0;
  return g;
}

double effective_gamma(const ModelParams& params, double gamma) {
  return params.mode == FactorMode::symmetric ? 0.0 : gamma;
}

struct Candidate {
  ModelParams params;
  double inner = 0.0;  // <g, d>
  double move = 0.0;   // ||d||^2
};

// Backtracking on one block: doubles c until
//   F(candidate) <= F + <g, d> + (c / (2 mult)) ||d||^2.
// Returns the squared move (0 when the block stays put).
template <class MakeCandidate>
double block_step(const McObjective& objective, double gamma, double mult, double eps_M, double& c,
                  ModelParams& params, McObjective::Evaluation& current, double& F, MakeCandidate make) {
  for (;;) {
    Candidate cand = make(mult / c);
    if (cand.move == 0.0) return 0.0;
    McObjective::Evaluation ev = objective.evaluate(cand.params, McObjective::Want::all);
    const double Fc = ev.q1 + balance_penalty(cand.params, gamma);
    const double bound = F + cand.inner + c / (2.0 * mult) * cand.move;
    if (std::isfinite(Fc) && Fc <= bound) {
      params = std::move(cand.params);
      current = std::move(ev);
      F = Fc;
      return cand.move;
    }
    if (cand.move < eps_M * 1e-6) {
      return 0.0;
    }
    c *= 2.0;
    if (c > kMaxCurvature) {
      throw NumericalError("mstep: backtracking exceeded the curvature cap 2^60");
    }
  }
}

}  // namespace

CoefTensor hard_threshold(const CoefTensor& B, std::size_t k) {
  const std::size_t total = B.size();
  if (k >= total) return B;
  CoefTensor out(B.n(), B.p());
  if (k == 0) return out;
  const int n = B.n();
  const int p = B.p();
  // Storage index -> lexicographic (j, j', l) rank for tie-breaking.
  auto lex = [&](std::size_t idx) {
    const std::size_t n2 = static_cast<std::size_t>(n) * n;
    const std::size_t l = idx / n2;
    const std::size_t rem = idx % n2;
    const std::size_t jp = rem / n;
    const std::size_t j = rem % n;
    return (j * n + jp) * p + l;
  };
  const auto& data = B.data();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(data[a]);
    const double mb = std::abs(data[b]);
    if (ma != mb) return ma > mb;
    return lex(a) < lex(b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
  for (std::size_t q = 0; q < k; ++q) out.data()[order[q]] = data[order[q]];
  return out;
}

double objective_F(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                   const MwgState& state, double gamma, const EntryMask& mask) {
  const McObjective objective(family, dataset, state, mask);
  return objective.evaluate(params, McObjective::Want::value).q1 +
         balance_penalty(params, effective_gamma(params, gamma));
}

GradientBundle gradient(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                        const MwgState& state, double gamma, const EntryMask& mask) {
  const McObjective objective(family, dataset, state, mask);
  const auto ev = objective.evaluate(params, McObjective::Want::all);
  const double g = effective_gamma(params, gamma);
  GradientBundle out;
  out.dU = grad_U(params, ev.R, g);
  if (params.mode == FactorMode::asymmetric) out.dV = grad_V(params, ev.R, g);
  out.dB = grad_B(ev.G);
  return out;
}

ProximalStep proximal_step(const McObjective& objective, const ModelParams& params, double c,
                           const MstepConfig& config) {
  if (!(c > 0.0)) throw InvalidArgument("proximal_step: c must be positive");
  const double gamma = effective_gamma(params, config.gamma);
  const auto& mult = config.step_multipliers;
  ProximalStep out{params, {}};
  ModelParams& P = out.params;

  auto ev = objective.evaluate(P, McObjective::Want::residuals);
  out.used.dU = grad_U(P, ev.R, gamma);
  P.U -= (mult[0] / c) * out.used.dU;

  if (P.mode == FactorMode::asymmetric) {
    ev = objective.evaluate(P, McObjective::Want::residuals);
    out.used.dV = grad_V(P, ev.R, gamma);
    P.V -= (mult[1] / c) * out.used.dV;
  }

  ev = objective.evaluate(P, McObjective::Want::all);
  out.used.dB = grad_B(ev.G);
  CoefTensor moved = P.B;
  moved.flat() -= (mult[2] / c) * out.used.dB.flat();
  P.B = hard_threshold(moved, config.budget(P.n(), P.p()));
  return out;
}

double MstepResult::max_increase() const {
  double worst = 0.0;
  double prev = initial;
  for (double f : trace) {
    worst = std::max(worst, f - prev);
    prev = f;
  }
  return worst;
}

MstepResult run_mstep(const McObjective& objective, const ModelParams& params_init, const MstepConfig& config) {
  config.validate();
  const std::size_t k = config.budget(params_init.n(), params_init.p());
  const double gamma = effective_gamma(params_init, config.gamma);
  const bool symmetric = params_init.mode == FactorMode::symmetric;
  const auto& mult = config.step_multipliers;

  MstepResult result;
  result.params = params_init;
  ModelParams& P = result.params;
  if (P.B.nonzeros() > k) P.B = hard_threshold(P.B, k);
  if (config.max_inner_iters == 0) return result;

  McObjective::Evaluation current = objective.evaluate(P, McObjective::Want::all);
  double F = current.q1 + balance_penalty(P, gamma);
  if (!std::isfinite(F)) throw NumericalError("mstep: objective is not finite at the starting point");
  result.initial = F;

  std::array<double, 3> c{config.c0, config.c0, config.c0};
  for (int it = 0; it < config.max_inner_iters; ++it) {
    std::array<double, 3> moves{0.0, 0.0, 0.0};

    moves[0] = block_step(objective, gamma, mult[0], config.eps_M, c[0], P, current, F, [&](double step) {
      const MatrixXd g = grad_U(P, current.R, gamma);
      Candidate cand{P, 0.0, 0.0};
      cand.params.U -= step * g;
      const MatrixXd d = cand.params.U - P.U;
      cand.inner = (g.array() * d.array()).sum();
      cand.move = d.squaredNorm();
      return cand;
    });

    if (!symmetric) {
      moves[1] = block_step(objective, gamma, mult[1], config.eps_M, c[1], P, current, F, [&](double step) {
        const MatrixXd g = grad_V(P, current.R, gamma);
        Candidate cand{P, 0.0, 0.0};
        cand.params.V -= step * g;
        const MatrixXd d = cand.params.V - P.V;
        cand.inner = (g.array() * d.array()).sum();
        cand.move = d.squaredNorm();
        return cand;
      });
    }

    if (k > 0) {
      moves[2] = block_step(objective, gamma, mult[2], config.eps_M, c[2], P, current, F, [&](double step) {
        const CoefTensor g = grad_B(current.G);
        CoefTensor moved = P.B;
        moved.flat() -= step * g.flat();
        Candidate cand{P, 0.0, 0.0};
        cand.params.B = hard_threshold(moved, k);
        const VectorXd d = cand.params.B.flat() - P.B.flat();
        cand.inner = g.flat().dot(d);
        cand.move = d.squaredNorm();
        return cand;
      });
    }

    result.trace.push_back(F);
    result.iterations = it + 1;
    if (std::max({moves[0], moves[1], moves[2]}) < config.eps_M) {
      result.converged = true;
      break;
    }
  }
  result.final_c = c;
  return result;
}

MstepResult run_mstep(const ModelParams& params_init, const Family& family, const LongitudinalNetworkDataset& dataset,
                      const MwgState& state, const MstepConfig& config) {
  const McObjective objective(family, dataset, state, dataset.mask());
  return run_mstep(objective, params_init, config);
}

double update_sigma_e2(const ModelParams& params, const Family& family, const LongitudinalNetworkDataset& dataset,
                       const MwgState& state, const EntryMask& mask) {
  if (!family.is_gaussian()) {
    throw UnsupportedOperation("update_sigma_e2: only defined for the Gaussian family");
  }
  const McObjective objective(family, dataset, state, mask);
  return objective.mean_squared_residual(params);
}

}  // namespace mrglmm
