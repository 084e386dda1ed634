// Command-line driver: simulate | fit | diagnose | forecast | evaluate |
// print-config.  Exit status 0 on success, 2 on validation problems (bad
// flags, unreadable files, mixed-run artifacts), 3 when the sampler aborts.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fertcast/io.hpp"

namespace fs = std::filesystem;
using namespace fertcast;

namespace {

void write_file(const fs::path& p, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(p);
  if (!os) throw std::invalid_argument("cannot write " + p.string());
  body(os);
  os.flush();
  if (!os) throw std::invalid_argument("failed while writing " + p.string());
}

std::ifstream open_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path);
  return in;
}

struct DataArgs {
  std::string data;      // canonical CSV carrying both counts
  std::string births;    // HFD-style whitespace pair
  std::string exposure;
};

void add_data_options(CLI::App* cmd, DataArgs& a) {
  cmd->add_option("--data", a.data, "dataset CSV (cohort,age_label,births,exposure)");
  cmd->add_option("--births", a.births, "HFD-style cohort birth counts");
  cmd->add_option("--exposure", a.exposure, "HFD-style cohort exposure");
}

FertilityDataset load_data(const DataArgs& a) {
  if (!a.data.empty()) {
    if (!a.births.empty() || !a.exposure.empty()) {
      throw std::invalid_argument("--data replaces --births/--exposure; give one or the other");
    }
    auto in = open_file(a.data);
    return read_dataset_csv(in);
  }
  if (a.births.empty() || a.exposure.empty()) {
    throw std::invalid_argument("provide --data, or both --births and --exposure");
  }
  auto bi = open_file(a.births);
  const RawTable bt = parse_table(bi);
  auto ei = open_file(a.exposure);
  const RawTable et = parse_table(ei);
  if (!bt.skipped_lines.empty()) {
    std::cerr << "note: " << a.births << ": skipped " << bt.skipped_lines.size()
              << " metadata line(s) above the header\n";
  }
  if (!et.skipped_lines.empty()) {
    std::cerr << "note: " << a.exposure << ": skipped " << et.skipped_lines.size()
              << " metadata line(s) above the header\n";
  }
  return build_dataset(bt, et, AgeGrid::standard());
}

// Sampler/model flags shared by fit and evaluate; only flags the user passed
// override the config file.
struct RunFlags {
  std::string config;
  std::uint64_t seed = 0;
  int chains = 0, iters = 0, warmup = 0, thin = 0;
  std::string family1, family2;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "flat key=value configuration file");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--chains", f.chains, "number of chains");
  cmd->add_option("--iters", f.iters, "iterations per chain (warmup included)");
  cmd->add_option("--warmup", f.warmup, "warmup iterations per chain");
  cmd->add_option("--thin", f.thin, "thinning factor for retained draws");
  cmd->add_option("--family1", f.family1, "first mixture component family");
  cmd->add_option("--family2", f.family2, "second mixture component family");
}

RunConfig resolve_config(const CLI::App* cmd, const RunFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) {
    auto in = open_file(f.config);
    cfg = parse_config(in);
  }
  if (cmd->count("--seed")) cfg.seed = f.seed;
  if (cmd->count("--chains")) cfg.chains = f.chains;
  if (cmd->count("--iters")) cfg.iterations = f.iters;
  if (cmd->count("--warmup")) cfg.warmup = f.warmup;
  if (cmd->count("--thin")) cfg.thin = f.thin;
  if (cmd->count("--family1")) cfg.family1 = f.family1;
  if (cmd->count("--family2")) cfg.family2 = f.family2;
  return cfg;
}

Draws sample_posterior(const FertilityDataset& ds, const RunConfig& cfg) {
  const ModelConfig mc = cfg.model_config(ds.grid);
  const Model model(ds, mc);
  TargetModel target = make_target(model);
  target.param_names =
      param_names(ParamLayout{ds.n_cohorts(), mc.spline_size}, ds.first_cohort());
  return run_chains(target, cfg.sampler_config());
}

std::string divergence_summary(const Draws& draws) {
  std::ostringstream ss;
  for (int c = 0; c < draws.n_chains(); ++c) {
    if (c) ss << '/';
    ss << draws.post_divergences[c];
  }
  return ss.str();
}

int cmd_fit(const CLI::App* cmd, const RunFlags& flags, const DataArgs& data,
            const std::string& out_dir) {
  const RunConfig cfg = resolve_config(cmd, flags);
  const FertilityDataset ds = load_data(data);
  const Draws draws = sample_posterior(ds, cfg);
  const RunManifest manifest = make_manifest(cfg, ds);
  const std::string id = manifest.run_id();

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_file(dir / "config.cfg", [&](std::ostream& os) { emit_config(os, cfg); });
  write_file(dir / "data.csv", [&](std::ostream& os) { write_dataset_csv(os, ds, id); });
  write_file(dir / "draws.csv", [&](std::ostream& os) { write_draws_csv(os, draws, id); });
  write_file(dir / "stats.csv", [&](std::ostream& os) { write_stats_csv(os, draws, id); });
  write_file(dir / "manifest.json", [&](std::ostream& os) { write_manifest_json(os, manifest); });

  std::cout << "fit: " << ds.n_cohorts() << " cohorts, " << draws.n_params << " parameters, "
            << draws.n_chains() << " chain(s) x " << draws.n_retained()
            << " retained draws; post-warmup divergences " << divergence_summary(draws)
            << "\nwrote " << out_dir << "\n";
  return 0;
}

struct RunArtifacts {
  RunConfig cfg;
  FertilityDataset ds;
  Draws draws;
  std::vector<ChainStatsRow> stats;
  RunManifest manifest;
};

RunArtifacts read_run(const std::string& dir_arg) {
  const fs::path dir(dir_arg);
  RunArtifacts run;
  {
    auto in = open_file((dir / "manifest.json").string());
    run.manifest = read_manifest_json(in);
  }
  {
    auto in = open_file((dir / "config.cfg").string());
    run.cfg = parse_config(in);
    require_same_run("config.cfg", config_hash(run.cfg), run.manifest.config_hash);
  }
  {
    auto in = open_file((dir / "data.csv").string());
    run.ds = read_dataset_csv(in);
    require_same_run("data.csv", dataset_fingerprint(run.ds), run.manifest.dataset_fingerprint);
  }
  const std::string id = run.manifest.run_id();
  {
    std::string found;
    auto in = open_file((dir / "draws.csv").string());
    run.draws = read_draws_csv(in, &found);
    require_same_run("draws.csv", found, id);
  }
  {
    std::string found;
    auto in = open_file((dir / "stats.csv").string());
    run.stats = read_stats_csv(in, &found);
    require_same_run("stats.csv", found, id);
  }
  return run;
}

int cmd_diagnose(const std::string& dir, std::string out) {
  const RunArtifacts run = read_run(dir);
  const ModelConfig mc = run.cfg.model_config(run.ds.grid);
  const DiagnosticsReport rep = diagnose_run(run.draws, run.stats, run.ds, mc);
  if (out.empty()) out = (fs::path(dir) / "diagnostics.json").string();
  write_file(out, [&](std::ostream& os) {
    write_diagnostics_json(os, rep, run.manifest.run_id());
  });

  std::cout << "max split R-hat " << rep.max_rhat;
  if (rep.loo_available) {
    std::cout << "; LOOIC " << rep.looic << " (max Pareto k " << rep.max_pareto_k << ", "
              << rep.flagged.size() << " flagged cell(s))";
  }
  std::cout << "; " << rep.modes.n_groups << " mode(s), selected chains";
  for (int c : rep.modes.selected_chains) std::cout << ' ' << c;
  std::cout << "\nwrote " << out << "\n";
  return 0;
}

int cmd_forecast(const CLI::App* cmd, const std::string& dir, int horizon_flag,
                 std::string out) {
  const RunArtifacts run = read_run(dir);
  const int horizon = cmd->count("--horizon") ? horizon_flag : run.cfg.horizon;
  const ModelConfig mc = run.cfg.model_config(run.ds.grid);
  const ForecastDraws fd = posterior_rates(run.draws, run.ds, mc, horizon, run.cfg.seed);
  const auto exposure = default_exposure_schedule(run.ds, horizon);
  const PredictiveDraws pd = predictive_rate_draws(fd, exposure, run.cfg.seed);
  const ForecastSummary summary = summarize(fd, &pd);

  if (out.empty()) out = (fs::path(dir) / "forecast.csv").string();
  const fs::path meta_path = fs::path(out).parent_path() / "forecast_meta.json";
  write_file(out, [&](std::ostream& os) {
    write_forecast_csv(os, summary, run.ds.grid, run.manifest.run_id());
  });
  write_file(meta_path, [&](std::ostream& os) {
    write_forecast_meta_json(os, run.cfg, run.manifest, horizon, summary);
  });

  std::cout << "forecast horizon " << horizon << ": " << (fd.n_observed + horizon)
            << " cohorts x " << fd.n_cells << " cells from " << fd.n_draws
            << " draws\nwrote " << out << " and " << meta_path.string() << "\n";
  return 0;
}

int cmd_evaluate(const CLI::App* cmd, const RunFlags& flags, const DataArgs& data,
                 int jumpoff_flag, int holdout_flag, const std::string& out_dir) {
  RunConfig cfg = resolve_config(cmd, flags);
  if (cmd->count("--jumpoff")) cfg.jumpoff = jumpoff_flag;
  if (cmd->count("--holdout-years")) cfg.holdout_years = holdout_flag;

  const FertilityDataset full = load_data(data);
  const int t0 = cfg.jumpoff != 0 ? cfg.jumpoff : full.max_period() - cfg.holdout_years;
  const HoldoutSplit hs = split(full, t0, cfg.holdout_years);

  const Draws draws = sample_posterior(hs.fit, cfg);

  int max_eval_cohort = hs.eval.front().cohort;
  for (const auto& e : hs.eval) max_eval_cohort = std::max(max_eval_cohort, e.cohort);
  const int last_fit_cohort = hs.fit.cohorts.back().cohort;
  const int horizon = std::max(0, max_eval_cohort - last_fit_cohort);

  const ModelConfig mc = cfg.model_config(full.grid);
  const ForecastDraws fd = posterior_rates(draws, hs.fit, mc, horizon, cfg.seed);
  auto exposure = default_exposure_schedule(hs.fit, horizon);
  for (const auto& e : hs.eval) {
    exposure[e.cohort - hs.fit.first_cohort()][e.cell] = e.exposure;
  }
  const PredictiveDraws pd = predictive_rate_draws(fd, exposure, cfg.seed);
  const ForecastSummary summary = summarize(fd, &pd);

  const auto observed = observed_rates(hs.eval);
  const int n_cells = static_cast<int>(hs.eval.size());
  std::vector<EvaluationRow> rows;
  {
    EvaluationRow r;
    r.model = "mixture_" + cfg.family1 + "_" + cfg.family2;
    r.rmse = rmse(summary_point_forecasts(summary, hs.eval), observed);
    const auto [lo50, hi50] = summary_interval(summary, hs.eval, 0.5, true);
    const auto [lo90, hi90] = summary_interval(summary, hs.eval, 0.9, true);
    r.coverage50 = coverage(lo50, hi50, observed);
    r.coverage90 = coverage(lo90, hi90, observed);
    r.n_cells = n_cells;
    rows.push_back(std::move(r));
  }
  for (const char* name : {"freeze_rate", "freeze_slope"}) {
    EvaluationRow r;
    r.model = name;
    const auto fc = std::string(name) == "freeze_rate" ? freeze_rate(hs.fit, hs.eval, t0)
                                                       : freeze_slope(hs.fit, hs.eval, t0);
    r.rmse = rmse(fc, observed);
    r.n_cells = n_cells;
    rows.push_back(std::move(r));
  }

  const RunManifest manifest = make_manifest(cfg, full);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_file(dir / "config.cfg", [&](std::ostream& os) { emit_config(os, cfg); });
  write_file(dir / "report.csv", [&](std::ostream& os) {
    write_report_csv(os, rows, manifest.run_id());
  });
  write_file(dir / "manifest.json", [&](std::ostream& os) { write_manifest_json(os, manifest); });

  std::cout << "holdout: fit through " << t0 << ", evaluating " << (t0 + 1) << ".."
            << (t0 + cfg.holdout_years) << " (" << n_cells << " cells, " << hs.n_beyond
            << " beyond the data, " << hs.n_zero_exposure << " without exposure)\n";
  for (const auto& r : rows) {
    std::cout << r.model << ": rmse " << r.rmse;
    if (!std::isnan(r.coverage50)) {
      std::cout << ", 50% coverage " << r.coverage50 << ", 90% coverage " << r.coverage90;
    }
    std::cout << "\n";
  }
  std::cout << "wrote " << out_dir << "\n";
  return 0;
}

int cmd_simulate(const std::string& out, std::uint64_t seed, int n_cohorts, int first_cohort,
                 double exposure_per_age, double dispersion, const std::string& family1,
                 const std::string& family2) {
  if (n_cohorts < 1) throw std::invalid_argument("--cohorts must be at least 1");
  if (!(exposure_per_age > 0.0)) throw std::invalid_argument("--exposure must be positive");
  if (!(dispersion > 0.0)) throw std::invalid_argument("--dispersion must be positive");
  RunConfig rc;
  rc.family1 = family1;
  rc.family2 = family2;
  const ModelConfig mc = rc.model_config();

  // a gently drifting schedule: falling quantum, later and slightly wider
  std::vector<SimulatedCohort> cohorts;
  for (int c = 0; c < n_cohorts; ++c) {
    SimulatedCohort sc;
    sc.params.theta = 2.1 * std::exp(-0.004 * c);
    sc.params.psi = 1.0 / (1.0 + std::exp(-(0.4 + 0.006 * c)));
    sc.params.mu_sum = 54.0 + 0.08 * c;
    sc.params.mu_diff = 7.0;
    sc.params.tau1 = 4.0;
    sc.params.tau2 = 6.0 + 0.01 * c;
    for (const auto& cell : mc.grid.cells) {
      sc.exposure.push_back(exposure_per_age * cell.n_ages());
    }
    cohorts.push_back(std::move(sc));
  }
  const auto ds = simulate_dataset(first_cohort, cohorts,
                                   std::vector<double>(mc.spline_size, std::log(dispersion)),
                                   mc, seed);
  write_file(out, [&](std::ostream& os) { write_dataset_csv(os, ds); });
  std::cout << "simulated " << n_cohorts << " cohorts (" << first_cohort << ".."
            << (first_cohort + n_cohorts - 1) << "), exposure " << exposure_per_age
            << " per age-year, dispersion " << dispersion << "\nwrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian cohort fertility forecasting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  auto* fit = app.add_subcommand("fit", "sample the posterior and persist the run");
  RunFlags fit_flags;
  DataArgs fit_data;
  std::string fit_out;
  add_run_flags(fit, fit_flags);
  add_data_options(fit, fit_data);
  fit->add_option("--out", fit_out, "run directory to create")->required();

  auto* diagnose = app.add_subcommand("diagnose", "convergence and fit diagnostics for a run");
  std::string diag_dir, diag_out;
  diagnose->add_option("run", diag_dir, "run directory from fit")->required();
  diagnose->add_option("--out", diag_out, "diagnostics JSON path (default <run>/diagnostics.json)");

  auto* forecast = app.add_subcommand("forecast", "summarize posterior rates, extending cohorts");
  std::string fc_dir, fc_out;
  int fc_horizon = 0;
  forecast->add_option("run", fc_dir, "run directory from fit")->required();
  forecast->add_option("--horizon", fc_horizon, "cohorts to extend beyond the data");
  forecast->add_option("--out", fc_out, "forecast CSV path (default <run>/forecast.csv)");

  auto* evaluate = app.add_subcommand("evaluate", "holdout comparison against frozen baselines");
  RunFlags ev_flags;
  DataArgs ev_data;
  std::string ev_out;
  int ev_jumpoff = 0, ev_holdout = 0;
  add_run_flags(evaluate, ev_flags);
  add_data_options(evaluate, ev_data);
  evaluate->add_option("--jumpoff", ev_jumpoff, "last period fitted on (default: data end minus the holdout)");
  evaluate->add_option("--holdout-years", ev_holdout, "periods held back for evaluation");
  evaluate->add_option("--out", ev_out, "output directory")->required();

  auto* simulate = app.add_subcommand("simulate", "write a synthetic dataset");
  std::string sim_out, sim_family1 = "gamma", sim_family2 = "gamma";
  std::uint64_t sim_seed = 0;
  int sim_cohorts = 40, sim_first = 1960;
  double sim_exposure = 2.0e4, sim_dispersion = 50.0;
  simulate->add_option("--out", sim_out, "dataset CSV path")->required();
  simulate->add_option("--seed", sim_seed, "random seed");
  simulate->add_option("--cohorts", sim_cohorts, "number of cohorts");
  simulate->add_option("--first-cohort", sim_first, "first cohort year");
  simulate->add_option("--exposure", sim_exposure, "exposure per single age-year");
  simulate->add_option("--dispersion", sim_dispersion, "negative binomial dispersion");
  simulate->add_option("--family1", sim_family1, "first mixture component family");
  simulate->add_option("--family2", sim_family2, "second mixture component family");

  auto* print_config = app.add_subcommand("print-config", "emit the default configuration");
  std::string pc_out;
  print_config->add_option("--out", pc_out, "write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*fit) return cmd_fit(fit, fit_flags, fit_data, fit_out);
    if (*diagnose) return cmd_diagnose(diag_dir, diag_out);
    if (*forecast) return cmd_forecast(forecast, fc_dir, fc_horizon, fc_out);
    if (*evaluate) {
      return cmd_evaluate(evaluate, ev_flags, ev_data, ev_jumpoff, ev_holdout, ev_out);
    }
    if (*simulate) {
      return cmd_simulate(sim_out, sim_seed, sim_cohorts, sim_first, sim_exposure,
                          sim_dispersion, sim_family1, sim_family2);
    }
    if (*print_config) {
      if (pc_out.empty()) {
        emit_config(std::cout, RunConfig{});
      } else {
        write_file(pc_out, [](std::ostream& os) { emit_config(os, RunConfig{}); });
        std::cout << "wrote " << pc_out << "\n";
      }
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "sampler error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
