#include "mrglmm/cli.hpp"

#include "mrglmm/errors.hpp"
#include "mrglmm/io.hpp"
#include "mrglmm/parallel.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

namespace mrglmm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw InvalidArgument("config: '" + where + "' must be an object");
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key())) throw InvalidArgument("config: unknown key '" + item.key() + "' in " + where);
  }
}

template <class T>
void read_opt(const json& obj, const char* key, T& target, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidArgument("config: '" + where + "." + key + "' has the wrong type");
  }
}

const json& section(const json& config, const char* name) {
  static const json empty = json::object();
  return config.contains(name) ? config.at(name) : empty;
}

}  // namespace

void check_config(const json& config) {
  check_keys(config,
             {"version", "seed", "dataset", "out", "mode", "model", "mwg", "grid", "design", "selection",
              "asymmetric_params", "warm_start", "fit_diagonal_policy", "replicate", "fit", "truth"},
             "top level");
  if (!config.contains("version")) throw InvalidArgument("config: missing 'version'");
  if (!config.at("version").is_number_integer() || config.at("version").get<int>() != 1) {
    throw InvalidArgument("config: unsupported 'version' (expected 1)");
  }
  for (const char* name : {"model", "mwg", "grid", "design"}) {
    if (config.contains(name) && !config.at(name).is_object()) {
      throw InvalidArgument(std::string("config: '") + name + "' must be an object");
    }
  }
  if (config.contains("seed") && !config.at("seed").is_number_unsigned()) {
    throw InvalidArgument("config: 'seed' must be a non-negative integer");
  }
}

McemConfig mcem_from_json(const json& config) {
  McemConfig out;
  const json& model = section(config, "model");
  check_keys(model,
             {"r", "s", "gamma", "c0", "eps_M", "max_inner_iters", "step_multipliers", "eps_EM", "stable_iters",
              "max_outer_iters", "sigma_e2_update", "sigma_theta", "sigma_theta_mode", "quad_points",
              "oracle_sigma_theta"},
             "model");
  read_opt(model, "r", out.r, "model");
  read_opt(model, "s", out.mstep.s, "model");
  read_opt(model, "gamma", out.mstep.gamma, "model");
  read_opt(model, "c0", out.mstep.c0, "model");
  read_opt(model, "eps_M", out.mstep.eps_M, "model");
  read_opt(model, "max_inner_iters", out.mstep.max_inner_iters, "model");
  if (model.contains("step_multipliers")) {
    std::vector<double> m;
    read_opt(model, "step_multipliers", m, "model");
    if (m.size() != 3) throw InvalidArgument("config: 'model.step_multipliers' needs 3 entries (U, V, B)");
    out.mstep.step_multipliers = {m[0], m[1], m[2]};
  }
  read_opt(model, "eps_EM", out.eps_EM, "model");
  read_opt(model, "stable_iters", out.stable_iters, "model");
  read_opt(model, "max_outer_iters", out.max_outer_iters, "model");
  read_opt(model, "sigma_e2_update", out.sigma_e2_update, "model");
  read_opt(model, "sigma_theta", out.sigma_theta, "model");
  read_opt(model, "quad_points", out.quad_points, "model");
  if (model.contains("sigma_theta_mode")) {
    std::string mode;
    read_opt(model, "sigma_theta_mode", mode, "model");
    if (mode == "fixed") {
      out.sigma_theta_mode = SigmaThetaMode::fixed;
    } else if (mode == "moment_refresh") {
      out.sigma_theta_mode = SigmaThetaMode::moment_refresh;
    } else {
      throw InvalidArgument("config: 'model.sigma_theta_mode' must be fixed or moment_refresh");
    }
  }

  const json& mwg = section(config, "mwg");
  check_keys(mwg, {"M", "burn_in", "proposal_sd", "adapt", "target_accept", "whole_matrix"}, "mwg");
  read_opt(mwg, "M", out.mwg.M, "mwg");
  read_opt(mwg, "burn_in", out.mwg.burn_in, "mwg");
  read_opt(mwg, "proposal_sd", out.mwg.proposal_sd, "mwg");
  read_opt(mwg, "adapt", out.mwg.adapt, "mwg");
  read_opt(mwg, "target_accept", out.mwg.target_accept, "mwg");
  read_opt(mwg, "whole_matrix", out.mwg.whole_matrix, "mwg");
  if (config.contains("seed")) out.mwg.seed = config.at("seed").get<std::uint64_t>();
  out.mwg.validate();
  out.mstep.validate();
  return out;
}

TuningGrid grid_from_json(const json& config) {
  TuningGrid out;
  const json& grid = section(config, "grid");
  check_keys(grid, {"r", "s", "C"}, "grid");
  read_opt(grid, "r", out.r_candidates, "grid");
  read_opt(grid, "s", out.s_candidates, "grid");
  read_opt(grid, "C", out.C, "grid");
  out.validate();
  return out;
}

SimDesign design_from_json(const json& config) {
  SimDesign out;
  const json& design = section(config, "design");
  check_keys(design,
             {"n", "p", "N", "T", "r", "s", "family", "theta_var", "noise_var", "b_value", "replicates",
              "exact_sparsity", "diagonal_policy"},
             "design");
  read_opt(design, "n", out.n, "design");
  read_opt(design, "p", out.p, "design");
  read_opt(design, "N", out.N, "design");
  read_opt(design, "T", out.T, "design");
  read_opt(design, "r", out.r, "design");
  read_opt(design, "s", out.s, "design");
  read_opt(design, "theta_var", out.theta_var, "design");
  read_opt(design, "noise_var", out.noise_var, "design");
  read_opt(design, "b_value", out.b_value, "design");
  read_opt(design, "replicates", out.replicates, "design");
  read_opt(design, "exact_sparsity", out.exact_sparsity, "design");
  if (design.contains("family")) {
    std::string name;
    read_opt(design, "family", name, "design");
    out.family.kind = family_from_string(name);
  }
  if (design.contains("diagonal_policy")) {
    std::string name;
    read_opt(design, "diagonal_policy", name, "design");
    out.diagonal_policy = diagonal_policy_from_string(name);
  }
  if (config.contains("seed")) out.master_seed = config.at("seed").get<std::uint64_t>();
  out.validate();
  return out;
}

namespace {

struct Options {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
  bool force = false;
  std::string mode;
};

class UsageError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class NotConverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  Options opts;
  json input;      // config file as read
  json effective;  // with command-line overrides applied
  io::Stamp stamp;
  fs::path base;   // directory of the config file

  std::string path_field(const char* key, bool required) const {
    if (!effective.contains(key)) {
      if (required) throw UsageError(std::string("config: '") + key + "' is required for " + opts.command);
      return {};
    }
    if (!effective.at(key).is_string()) throw InvalidArgument(std::string("config: '") + key + "' must be a path");
    const fs::path p = effective.at(key).get<std::string>();
    return (p.is_absolute() ? p : base / p).string();
  }

  std::string out_dir() const {
    if (!opts.out.empty()) return opts.out;
    const std::string dir = path_field("out", false);
    if (dir.empty()) throw UsageError("an output directory is required (--out or config 'out')");
    return dir;
  }
};

json iteration_json(const IterationRecord& rec) {
  return {{"q1", rec.q1},
          {"q2", rec.q2},
          {"penalized", rec.penalized},
          {"loglik_hat", rec.loglik_hat},
          {"observed_objective", rec.observed},
          {"sigma_e2", rec.sigma_e2},
          {"acceptance", rec.acceptance},
          {"inner_iterations", rec.inner_iterations},
          {"inner_converged", rec.inner_converged},
          {"inner_max_increase", rec.inner_max_increase}};
}

json stamp_fields(const Context& ctx, const char* command) {
  return {{"version", 1}, {"command", command}, {"config_hash", ctx.stamp.config_hash}, {"seed", ctx.stamp.seed}};
}

json environment_stamp(const Context& ctx) {
  json env = stamp_fields(ctx, ctx.opts.command.c_str());
  env["threads"] = thread_count();
  env["compiler"] = __VERSION__;
  env["cplusplus"] = static_cast<long>(__cplusplus);
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
  env["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                         std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  env["cli11"] = CLI11_VERSION;
  return env;
}

void write_timing(const std::string& dir, const Context& ctx, double seconds) {
  json t = stamp_fields(ctx, ctx.opts.command.c_str());
  t["wall_time_s"] = seconds;
  t["threads"] = thread_count();
  io::write_json((fs::path(dir) / "timing.json").string(), t);
}

int cmd_simulate(const Context& ctx) {
  const SimDesign design = design_from_json(ctx.effective);
  int replicate = 0;
  read_opt(ctx.effective, "replicate", replicate, "top level");
  const std::string out = ctx.out_dir();
  const SimInstance inst = generate(design, replicate);
  io::write_dataset(out, inst.dataset, design.family, ctx.stamp);
  io::write_params(out, inst.truth, "truth_", ctx.stamp);
  std::cout << "simulate: wrote " << inst.dataset.subject_count() << " subjects, "
            << inst.truth.B.nonzeros() << " nonzero coefficients to " << out << '\n';
  return ok;
}

int cmd_fit(const Context& ctx) {
  const auto loaded = io::read_dataset(ctx.path_field("dataset", true));
  McemConfig config = mcem_from_json(ctx.effective);
  const std::string mode = ctx.effective.value("mode", std::string("asymmetric"));
  const std::string out = ctx.out_dir();

  FitReport report;
  if (mode == "symmetric-refine") {
    const std::string asym_path = ctx.path_field("asymmetric_params", false);
    if (asym_path.empty()) throw UsageError("--mode symmetric-refine requires 'asymmetric_params' in the config");
    const ModelParams asym = io::read_params(asym_path);
    config.r = asym.r();
    report = refine_symmetric(loaded.dataset, loaded.family, config, asym);
  } else if (mode == "asymmetric") {
    const std::string warm_path = ctx.path_field("warm_start", false);
    if (!warm_path.empty()) {
      const ModelParams warm = io::read_params(warm_path);
      config.r = warm.r();
      report = fit(loaded.dataset, loaded.family, config, &warm);
    } else {
      report = fit(loaded.dataset, loaded.family, config);
    }
  } else {
    throw UsageError("mode must be asymmetric or symmetric-refine");
  }

  io::write_params(out, report.params, "", ctx.stamp);
  json doc = stamp_fields(ctx, "fit");
  doc["config"] = ctx.input;
  doc["effective_config"] = ctx.effective;
  doc["mode"] = mode;
  doc["family"] = std::string(to_string(loaded.family.kind));
  doc["converged"] = report.converged;
  doc["iterations"] = report.iterations;
  doc["best_iteration"] = report.best_iteration;
  doc["loglik_hat"] = report.loglik_hat;
  doc["final_objective"] =
      report.best_iteration >= 1 ? report.trace[static_cast<size_t>(report.best_iteration - 1)].observed : 0.0;
  doc["mean_acceptance"] = report.mean_acceptance;
  doc["nonzeros"] = report.params.B.nonzeros();
  doc["sampler_seed"] = config.mwg.seed;
  json trace = json::array();
  for (const auto& rec : report.trace) trace.push_back(iteration_json(rec));
  doc["objective_trace"] = trace;
  doc["warnings"] = report.warnings;
  io::write_json((fs::path(out) / "report.json").string(), doc);
  write_timing(out, ctx, report.wall_time);
  std::cout << "fit: " << (report.converged ? "converged" : "did not converge") << " after " << report.iterations
            << " iterations; loglik_hat = " << io::format_double(report.loglik_hat) << '\n';
  if (!report.converged) throw NotConverged("fit did not converge within max_outer_iters");
  return ok;
}

int cmd_tune(const Context& ctx) {
  const auto start = std::chrono::steady_clock::now();
  const auto loaded = io::read_dataset(ctx.path_field("dataset", true));
  const McemConfig config = mcem_from_json(ctx.effective);
  const TuningGrid grid = grid_from_json(ctx.effective);
  const std::string out = ctx.out_dir();
  const TuningReport report = tune(loaded.dataset, loaded.family, grid, config);

  std::ostringstream csv;
  csv << ctx.stamp.comment() << '\n' << "stage,r,s,ebic,loglik_hat,status,nonzeros,converged\n";
  json cells = json::array();
  auto emit = [&](const TuningCell& cell) {
    std::string status = cell.status;
    for (char& ch : status) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    csv << cell.stage << ',' << cell.r << ',' << io::format_double(cell.s) << ',' << io::format_double(cell.ebic)
        << ',' << io::format_double(cell.loglik_hat) << ',' << status << ',' << cell.nonzeros << ','
        << (cell.converged ? 1 : 0) << '\n';
  };
  for (const auto& cell : report.stage1) emit(cell);
  for (const auto& cell : report.stage2) emit(cell);
  io::write_text((fs::path(out) / "tuning.csv").string(), csv.str());

  const TuningCell* chosen = nullptr;
  for (const auto& cell : report.stage2) {
    if (cell.s == report.s_star) chosen = &cell;
  }
  json sel = stamp_fields(ctx, "tune");
  sel["r"] = report.r_star;
  sel["s"] = report.s_star;
  sel["ebic"] = chosen ? chosen->ebic : 0.0;
  sel["loglik_hat"] = chosen ? chosen->loglik_hat : 0.0;
  sel["feasible"] = chosen && std::isfinite(chosen->ebic);
  sel["config"] = ctx.input;
  io::write_json((fs::path(out) / "selected.json").string(), sel);
  if (!chosen || !std::isfinite(chosen->ebic)) throw NumericalError("tune: every sparsity cell failed");
  io::write_params((fs::path(out) / "selected").string(), report.selected, "", ctx.stamp);
  write_timing(out, ctx, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  std::cout << "tune: selected r = " << report.r_star << ", s = " << report.s_star << '\n';
  return ok;
}

int cmd_replicate(const Context& ctx) {
  const auto start = std::chrono::steady_clock::now();
  const SimDesign design = design_from_json(ctx.effective);
  TableOptions options;
  options.mcem = mcem_from_json(ctx.effective);
  const std::string selection = ctx.effective.value("selection", std::string("oracle"));
  if (selection != "oracle" && selection != "tuned") throw InvalidArgument("config: 'selection' must be oracle or tuned");
  options.tuned = selection == "tuned";
  if (options.tuned) options.grid = grid_from_json(ctx.effective);
  read_opt(section(ctx.effective, "model"), "oracle_sigma_theta", options.oracle_sigma_theta, "model");
  if (ctx.effective.contains("fit_diagonal_policy")) {
    options.fit_diagonal_policy = diagonal_policy_from_string(ctx.effective.at("fit_diagonal_policy").get<std::string>());
  }
  options.out_dir = ctx.out_dir();
  options.force = ctx.opts.force;
  options.config_hash = ctx.stamp.config_hash;
  const TableResult result = run_table(design, options);
  io::write_json((fs::path(options.out_dir) / "environment.json").string(), environment_stamp(ctx));
  write_timing(options.out_dir, ctx, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  std::cout << "replicate: " << result.summary.ok << " ok, " << result.summary.failed << " failed, "
            << result.skipped << " already present\n";
  return ok;
}

int cmd_eval(const Context& ctx) {
  const ModelParams fitted = io::read_params(ctx.path_field("fit", true));
  const ModelParams truth = io::read_params(ctx.path_field("truth", true), "truth_");
  const MetricRow row = evaluate(fitted, truth);
  json doc = stamp_fields(ctx, "eval");
  doc["theta_err"] = row.theta_err;
  doc["b_err"] = row.b_err;
  doc["sensitivity"] = row.sensitivity;
  doc["specificity"] = row.specificity;
  doc["sensitivity_by_convention"] = row.sensitivity_by_convention;
  const std::string out = ctx.opts.out.empty() && !ctx.effective.contains("out") ? std::string() : ctx.out_dir();
  if (!out.empty()) {
    fs::create_directories(out);
    io::write_json((fs::path(out) / "metrics.json").string(), doc);
  }
  std::cout << doc.dump(2) << '\n';
  return ok;
}

int dispatch(const Options& opts) {
  Context ctx;
  ctx.opts = opts;
  ctx.input = io::read_json(opts.config_path);
  check_config(ctx.input);
  ctx.base = fs::absolute(opts.config_path).parent_path();
  ctx.effective = ctx.input;
  if (opts.seed) ctx.effective["seed"] = *opts.seed;
  if (!ctx.effective.contains("seed")) ctx.effective["seed"] = 1;
  if (!opts.mode.empty()) ctx.effective["mode"] = opts.mode;
  ctx.stamp.seed = ctx.effective.at("seed").get<std::uint64_t>();
  ctx.stamp.config_hash = io::config_hash(ctx.effective);

  if (opts.command == "simulate") return cmd_simulate(ctx);
  if (opts.command == "fit") return cmd_fit(ctx);
  if (opts.command == "tune") return cmd_tune(ctx);
  if (opts.command == "replicate") return cmd_replicate(ctx);
  if (opts.command == "eval") return cmd_eval(ctx);
  throw UsageError("unknown command " + opts.command);
}

int resolve_threads(const Options& opts) {
  if (opts.threads) return *opts.threads;
  if (const char* env = std::getenv("MRGLMM_THREADS")) {
    try {
      const int t = std::stoi(env);
      if (t >= 1) return t;
    } catch (const std::exception&) {
    }
    throw UsageError("MRGLMM_THREADS must be a positive integer");
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Matrix-response GLMM for longitudinal networks"};
  app.name(args.empty() ? "mrglmm" : args[0]);
  app.require_subcommand(1);
  Options opts;
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"simulate", "Generate a synthetic dataset and its truth parameters"},
      {"fit", "Fit by Monte Carlo EM"},
      {"tune", "Two-stage EBIC search over rank, then sparsity"},
      {"replicate", "Replicated simulation study with a mean(sd) summary table"},
      {"eval", "Compare fitted parameters against truth"}};
  std::uint64_t seed = 0;
  int threads = 0;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Master seed (overrides config)");
    sub->add_option("--threads", threads, "Worker threads (default: MRGLMM_THREADS or hardware)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", opts.out, "Output directory");
    sub->add_flag("--force", opts.force, "Overwrite existing replicate results");
    sub->add_option("--mode", opts.mode, "Fit mode")->check(CLI::IsMember({"asymmetric", "symmetric-refine"}));
    sub->callback([&opts, name = std::string(name)] { opts.command = name; });
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : invalid_input;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->count("--threads")) opts.threads = threads;
  }

  try {
    if (const int t = resolve_threads(opts); t > 0) set_thread_count(t);
    return dispatch(opts);
  } catch (const NotConverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return not_converged;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical_failure;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return invalid_input;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return invalid_input;
  } catch (const UnsupportedOperation& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return invalid_input;
  } catch (const json::exception& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return invalid_input;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return numerical_failure;
  }
}

}  // namespace mrglmm::cli
