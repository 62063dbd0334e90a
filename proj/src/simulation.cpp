#include "mrglmm/simulation.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace mrglmm {

void SimDesign::validate() const {
  if (n < 1 || p < 1 || N < 1 || T < 1) throw InvalidArgument("design: n, p, N and T must be positive");
  if (r < 1 || r > n) throw InvalidArgument("design: r must satisfy 1 <= r <= n");
  if (!(s >= 0.0 && s < 1.0)) throw InvalidArgument("design: s must lie in [0, 1)");
  if (!(theta_var >= 0.0)) throw InvalidArgument("design: theta_var must be >= 0");
  if (family.is_gaussian() && !(noise_var > 0.0)) throw InvalidArgument("design: noise_var must be positive");
  if (!std::isfinite(b_value)) throw InvalidArgument("design: b_value must be finite");
  if (replicates < 1) throw InvalidArgument("design: replicates must be >= 1");
}

SimInstance generate(const SimDesign& design, int replicate) {
  design.validate();
  if (replicate < 0) throw InvalidArgument("generate: replicate index must be >= 0");
  const int n = design.n;
  const int p = design.p;
  const auto rep = static_cast<std::uint32_t>(replicate);

  SimInstance out;
  ModelParams& truth = out.truth;
  truth.mode = FactorMode::asymmetric;
  {
    CounterStream stream(design.master_seed, StreamTag::sim_intercept, rep, 0);
    truth.U.resize(n, design.r);
    for (Eigen::Index q = 0; q < truth.U.size(); ++q) truth.U.data()[q] = stream.normal();
    truth.V = truth.U;
  }

  truth.B = CoefTensor(n, p);
  {
    CounterStream stream(design.master_seed, StreamTag::sim_coef, rep, 0);
    auto& data = truth.B.data();
    if (design.exact_sparsity) {
      // Partial Fisher-Yates over storage indices.
      const auto per_slice = static_cast<std::size_t>(std::llround(design.s * n * n));
      const std::size_t count = per_slice * static_cast<std::size_t>(p);
      std::vector<std::size_t> idx(data.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t q = 0; q < count; ++q) {
        const std::size_t remaining = idx.size() - q;
        auto pick = q + static_cast<std::size_t>(stream.uniform() * static_cast<double>(remaining));
        if (pick >= idx.size()) pick = idx.size() - 1;
        std::swap(idx[q], idx[pick]);
        data[idx[q]] = design.b_value;
      }
    } else {
      for (double& b : data) b = stream.bernoulli(design.s) ? design.b_value : 0.0;
    }
  }
  truth.sigma_e2 = design.family.is_gaussian() ? design.noise_var : 1.0;
  truth.Sigma_theta = MatrixXd::Constant(n, n, design.theta_var);

  const MatrixXd Theta = truth.U * truth.U.transpose();
  const double theta_sd = std::sqrt(design.theta_var);
  const double noise_sd = std::sqrt(design.noise_var);

  LongitudinalNetworkDataset& data = out.dataset;
  data.n = n;
  data.p = p;
  data.diagonal_policy = design.diagonal_policy;
  data.subjects.resize(static_cast<size_t>(design.N));
  for (int i = 0; i < design.N; ++i) {
    SubjectRecord& subject = data.subjects[static_cast<size_t>(i)];
    subject.id = static_cast<std::uint64_t>(i);
    const auto sid = static_cast<std::uint32_t>(i);
    CounterStream theta_stream(design.master_seed, StreamTag::sim_subject, rep, sid, 0);
    CounterStream x_stream(design.master_seed, StreamTag::sim_subject, rep, sid, 1);
    CounterStream y_stream(design.master_seed, StreamTag::sim_subject, rep, sid, 2);

    MatrixXd theta_i(n, n);
    for (Eigen::Index q = 0; q < theta_i.size(); ++q) theta_i.data()[q] = theta_sd * theta_stream.normal();
    const MatrixXd base = Theta + theta_i;

    for (int t = 0; t < design.T; ++t) {
      VectorXd x(p);
      for (int l = 0; l < p; ++l) x(l) = x_stream.normal();
      const MatrixXd eta = base + truth.B.contract(x);
      MatrixXd A(n, n);
      if (design.family.is_gaussian()) {
        for (Eigen::Index q = 0; q < A.size(); ++q) A.data()[q] = eta.data()[q] + noise_sd * y_stream.normal();
      } else {
        for (Eigen::Index q = 0; q < A.size(); ++q) A.data()[q] = y_stream.bernoulli(sigmoid(eta.data()[q])) ? 1.0 : 0.0;
      }
      subject.responses.push_back(std::move(A));
      subject.covariates.push_back(std::move(x));
    }
  }
  return out;
}

MetricRow evaluate(const ModelParams& fit, const ModelParams& truth) {
  if (fit.n() != truth.n() || fit.B.n() != truth.B.n() || fit.B.p() != truth.B.p()) {
    throw InvalidArgument("evaluate: fit and truth dimensions differ");
  }
  MetricRow row;
  row.theta_err = (fit.intercept() - truth.intercept()).norm();
  row.b_err = (fit.B.flat() - truth.B.flat()).norm();
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  const auto& est = fit.B.data();
  const auto& ref = truth.B.data();
  for (std::size_t q = 0; q < ref.size(); ++q) {
    const bool truly = ref[q] != 0.0;
    const bool found = est[q] != 0.0;
    if (truly) {
      found ? ++tp : ++fn;
    } else {
      found ? ++fp : ++tn;
    }
  }
  if (tp + fn == 0) {
    row.sensitivity = 1.0;
    row.sensitivity_by_convention = true;
  } else {
    row.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  row.specificity = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
  return row;
}

namespace {

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary out;
  if (values.empty()) return {std::nan(""), std::nan("")};
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  out.mean = m;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string cell(const MetricSummary& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f(%.2f)", m.mean, m.sd);
  return buf;
}

constexpr const char* kReplicateHeader = "replicate,status,theta_err,b_err,sensitivity,specificity,wall_time_s,notes";

std::string replicate_line(const ReplicateRow& row) {
  std::ostringstream os;
  os << row.replicate << ',' << row.status << ',' << fmt(row.metrics.theta_err) << ',' << fmt(row.metrics.b_err) << ','
     << fmt(row.metrics.sensitivity) << ',' << fmt(row.metrics.specificity) << ',' << fmt(row.wall_time) << ','
     << (row.metrics.sensitivity_by_convention ? "sensitivity_by_convention" : "");
  return os.str();
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string comment_line(const SimDesign& design, const TableOptions& options) {
  return "# config_hash=" + options.config_hash + " seed=" + std::to_string(design.master_seed);
}

void write_summary(const std::string& path, const SimDesign& design, const TableOptions& options,
                   const TableSummary& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << comment_line(design, options) << " sd=sample(n-1)\n";
  os << "n,p,N,T,r,s,family,selection,replicates_ok,replicates_failed,theta_err,b_err,sensitivity,specificity,"
        "theta_err_mean,theta_err_sd,b_err_mean,b_err_sd,sensitivity_mean,sensitivity_sd,specificity_mean,"
        "specificity_sd\n";
  os << design.n << ',' << design.p << ',' << design.N << ',' << design.T << ',' << design.r << ',' << fmt(design.s)
     << ',' << to_string(design.family.kind) << ',' << (options.tuned ? "tuned" : "oracle") << ',' << s.ok << ','
     << s.failed << ',' << cell(s.theta_err) << ',' << cell(s.b_err) << ',' << cell(s.sensitivity) << ','
     << cell(s.specificity) << ',' << fmt(s.theta_err.mean) << ',' << fmt(s.theta_err.sd) << ','
     << fmt(s.b_err.mean) << ',' << fmt(s.b_err.sd) << ',' << fmt(s.sensitivity.mean) << ','
     << fmt(s.sensitivity.sd) << ',' << fmt(s.specificity.mean) << ',' << fmt(s.specificity.sd) << '\n';
  if (!os) throw IoError("failed writing " + path);
}

ReplicateRow run_replicate(const SimDesign& design, const TableOptions& options, int k) {
  ReplicateRow row;
  row.replicate = k;
  const auto start = std::chrono::steady_clock::now();
  try {
    SimInstance inst = generate(design, k);
    inst.dataset.diagonal_policy = options.fit_diagonal_policy;
    McemConfig config = options.mcem;
    config.mwg.seed = replicate_seed(design.master_seed, k);
    if (options.oracle_sigma_theta) {
      config.sigma_theta_matrix.resize(0, 0);
      config.sigma_theta = design.theta_var;
    }
    ModelParams estimate;
    if (options.tuned) {
      TuningReport report = tune(inst.dataset, design.family, options.grid, config);
      for (const auto* stage : {&report.stage1, &report.stage2}) {
        for (const auto& cell : *stage) row.inner_max_increase = std::max(row.inner_max_increase, cell.inner_max_increase);
      }
      estimate = std::move(report.selected);
      if (estimate.U.size() == 0) throw NumericalError("every tuning cell failed");
    } else {
      config.r = design.r;
      config.mstep.s = design.s;
      FitReport report = fit(inst.dataset, design.family, config);
      for (const auto& rec : report.trace) row.inner_max_increase = std::max(row.inner_max_increase, rec.inner_max_increase);
      estimate = std::move(report.params);
    }
    row.metrics = evaluate(estimate, inst.truth);
    if (!std::isfinite(row.metrics.theta_err) || !std::isfinite(row.metrics.b_err)) {
      row.status = "failed";
    }
  } catch (const std::exception&) {
    row.status = "failed";
    row.metrics = MetricRow{std::nan(""), std::nan(""), std::nan(""), std::nan(""), false};
  }
  row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

}  // namespace

TableSummary aggregate(const std::vector<ReplicateRow>& rows) {
  TableSummary out;
  std::vector<double> te, be, se, sp;
  for (const auto& row : rows) {
    if (row.status != "ok") {
      ++out.failed;
      continue;
    }
    ++out.ok;
    te.push_back(row.metrics.theta_err);
    be.push_back(row.metrics.b_err);
    se.push_back(row.metrics.sensitivity);
    sp.push_back(row.metrics.specificity);
  }
  out.theta_err = summarize(te);
  out.b_err = summarize(be);
  out.sensitivity = summarize(se);
  out.specificity = summarize(sp);
  return out;
}

std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate) {
  // splitmix64 finalizer over (seed, replicate)
  std::uint64_t z = master_seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(replicate) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<ReplicateRow> read_replicate_rows(const std::string& path, std::string* header_comment) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::vector<ReplicateRow> rows;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (header_comment && header_comment->empty()) *header_comment = line;
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() < 7) throw IoError(path + " line " + std::to_string(lineno) + ": expected at least 7 fields");
    try {
      ReplicateRow row;
      row.replicate = std::stoi(f[0]);
      row.status = f[1];
      row.metrics.theta_err = std::stod(f[2]);
      row.metrics.b_err = std::stod(f[3]);
      row.metrics.sensitivity = std::stod(f[4]);
      row.metrics.specificity = std::stod(f[5]);
      row.wall_time = std::stod(f[6]);
      row.metrics.sensitivity_by_convention = f.size() > 7 && f[7] == "sensitivity_by_convention";
      rows.push_back(row);
    } catch (const std::logic_error&) {
      throw IoError(path + " line " + std::to_string(lineno) + ": malformed numeric field");
    }
  }
  return rows;
}

TableResult run_table(const SimDesign& design, const TableOptions& options) {
  design.validate();
  if (options.tuned) options.grid.validate();
  TableResult result;
  std::map<int, ReplicateRow> done;
  std::string rep_path;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create directory " + options.out_dir + ": " + ec.message());
    rep_path = (std::filesystem::path(options.out_dir) / "replicates.csv").string();
    const bool exists = std::filesystem::exists(rep_path);
    if (exists && !options.force) {
      std::string header;
      for (const auto& row : read_replicate_rows(rep_path, &header)) done[row.replicate] = row;
      if (header != comment_line(design, options)) {
        throw IoError(rep_path + " was written with a different config or seed; use --force to overwrite");
      }
    } else {
      std::ofstream os(rep_path, std::ios::trunc);
      if (!os) throw IoError("cannot write " + rep_path);
      os << comment_line(design, options) << '\n' << kReplicateHeader << '\n';
    }
  }

  for (int k = 0; k < design.replicates; ++k) {
    if (auto it = done.find(k); it != done.end()) {
      result.rows.push_back(it->second);
      ++result.skipped;
      continue;
    }
    ReplicateRow row = run_replicate(design, options, k);
    if (!rep_path.empty()) {
      std::ofstream os(rep_path, std::ios::app);
      os << replicate_line(row) << '\n';
      os.flush();
      if (!os) throw IoError("failed appending to " + rep_path);
    }
    result.rows.push_back(std::move(row));
  }
  result.summary = aggregate(result.rows);
  if (!options.out_dir.empty()) {
    write_summary((std::filesystem::path(options.out_dir) / "summary.csv").string(), design, options, result.summary);
  }
  return result;
}

}  // namespace mrglmm
