#include "mrglmm/tuning.hpp"

#include "mrglmm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mrglmm {

void TuningGrid::validate() const {
  if (r_candidates.empty() || s_candidates.empty()) throw InvalidArgument("grid: candidate lists must be non-empty");
  if (!std::is_sorted(r_candidates.begin(), r_candidates.end()) ||
      !std::is_sorted(s_candidates.begin(), s_candidates.end())) {
    throw InvalidArgument("grid: candidate lists must be sorted ascending");
  }
  if (r_candidates.front() < 1) throw InvalidArgument("grid: rank candidates must be >= 1");
  if (s_candidates.front() < 0.0 || s_candidates.back() > 1.0) {
    throw InvalidArgument("grid: sparsity candidates must lie in [0, 1]");
  }
  if (!(C >= 0.0)) throw InvalidArgument("grid: C must be >= 0");
}

double ebic(double loglik, int n, int N, int p, int r, double coef_dof, double C) {
  const double n2 = static_cast<double>(n) * n;
  const double weight = std::log(n2 * N) + C * std::log(n2 * (p + 1.0));
  return -2.0 * loglik + weight * (2.0 * n * r + coef_dof);
}

double ebic_nominal(double loglik, int n, int N, int p, int r, double s, double C) {
  return ebic(loglik, n, N, p, r, s * p * static_cast<double>(n) * n, C);
}

namespace {

struct CellFit {
  TuningCell cell;
  ModelParams params;
};

CellFit fit_cell(const LongitudinalNetworkDataset& dataset, const Family& family, const McemConfig& base, int stage,
                 int r, double s, double C, const ModelParams* warm) {
  McemConfig config = base;
  config.r = r;
  config.mstep.s = s;
  CellFit out;
  out.cell.stage = stage;
  out.cell.r = r;
  out.cell.s = s;
  try {
    const FitReport report = fit(dataset, family, config, warm);
    out.params = report.params;
    out.cell.loglik_hat = report.loglik_hat;
    out.cell.nonzeros = report.params.B.nonzeros();
    out.cell.iterations = report.iterations;
    out.cell.converged = report.converged;
    for (const auto& rec : report.trace) {
      out.cell.inner_max_increase = std::max(out.cell.inner_max_increase, rec.inner_max_increase);
    }
    out.cell.ebic = ebic(report.loglik_hat, dataset.n, dataset.subject_count(), dataset.p, r,
                         static_cast<double>(out.cell.nonzeros), C);
    if (!std::isfinite(out.cell.ebic)) {
      out.cell.ebic = std::numeric_limits<double>::infinity();
      out.cell.status = "failed: non-finite EBIC";
    }
  } catch (const std::exception& ex) {
    out.cell.ebic = std::numeric_limits<double>::infinity();
    out.cell.status = std::string("failed: ") + ex.what();
  }
  return out;
}

// First strict minimum in grid order, so ties resolve to the smaller value.
size_t argmin(const std::vector<TuningCell>& cells) {
  size_t best = 0;
  for (size_t k = 1; k < cells.size(); ++k) {
    if (cells[k].ebic < cells[best].ebic) best = k;
  }
  return best;
}

}  // namespace

RankSelection select_rank(const LongitudinalNetworkDataset& dataset, const Family& family, const TuningGrid& grid,
                          const McemConfig& config) {
  grid.validate();
  RankSelection out;
  for (int r : grid.r_candidates) {
    CellFit cf = fit_cell(dataset, family, config, 1, r, 0.0, grid.C, nullptr);
    out.trace.push_back(cf.cell);
    out.fits.push_back(std::move(cf.params));
  }
  out.r_star = out.trace[argmin(out.trace)].r;
  return out;
}

SparsitySelection select_sparsity(const LongitudinalNetworkDataset& dataset, const Family& family, int r_star,
                                  const TuningGrid& grid, const McemConfig& config, const ModelParams* warm) {
  grid.validate();
  SparsitySelection out;
  std::vector<ModelParams> fits;
  for (double s : grid.s_candidates) {
    CellFit cf = fit_cell(dataset, family, config, 2, r_star, s, grid.C, warm);
    out.trace.push_back(cf.cell);
    fits.push_back(std::move(cf.params));
  }
  const size_t best = argmin(out.trace);
  out.s_star = out.trace[best].s;
  out.selected = std::move(fits[best]);
  return out;
}

TuningReport tune(const LongitudinalNetworkDataset& dataset, const Family& family, const TuningGrid& grid,
                  const McemConfig& config) {
  RankSelection stage1 = select_rank(dataset, family, grid, config);
  const ModelParams* warm = nullptr;
  for (size_t k = 0; k < stage1.trace.size(); ++k) {
    if (stage1.trace[k].r == stage1.r_star && std::isfinite(stage1.trace[k].ebic)) warm = &stage1.fits[k];
  }
  SparsitySelection stage2 = select_sparsity(dataset, family, stage1.r_star, grid, config, warm);
  TuningReport report;
  report.stage1 = std::move(stage1.trace);
  report.stage2 = std::move(stage2.trace);
  report.r_star = stage1.r_star;
  report.s_star = stage2.s_star;
  report.selected = std::move(stage2.selected);
  return report;
}

}  // namespace mrglmm
