// Command-line surface: simulate | fit | detect | monitor | evaluate.
//
// Every command reads a JSON run configuration (defaults < config file <
// command-line flags) and writes line-delimited JSON records; `simulate`
// writes the panel itself as CSV. Exit code 0 on success; on failure a
// machine-readable error record is emitted and the exit code is nonzero.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "cpdet/cpfilter.hpp"
#include "cpdet/io.hpp"
#include "cpdet/model.hpp"
#include "cpdet/monitor.hpp"
#include "cpdet/onlineem.hpp"
#include "cpdet/simlab.hpp"

namespace {

using cpdet::io::json;
using cpdet::io::RunConfig;

struct OutputSink {
  std::ofstream file;
  std::ostream* stream = nullptr;

  explicit OutputSink(const std::string& path) {
    if (path.empty() || path == "-") {
      stream = &std::cout;
    } else {
      file.open(path);
      if (!file) throw std::runtime_error("cannot open output '" + path + "'");
      stream = &file;
    }
  }
};

cpdet::SmcOptions smc_options(const RunConfig& c) {
  cpdet::SmcOptions o;
  o.B = c.B;
  o.systematic = c.systematic_resampling;
  o.d_max = c.d_max;
  return o;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error("config: " + msg);
}

void validate_common(const RunConfig& c) {
  require(c.lambda > 0.0 && c.lambda < 1.0, "lambda must lie in (0,1)");
  require(c.B >= 1, "B must be >= 1");
  require(c.kstar >= 0, "kstar must be >= 0");
  require(c.delta > 0.0 && c.delta < 1.0, "delta must lie in (0,1)");
  require(c.n_min >= 0, "n_min must be >= 0");
  require(c.passes >= 1, "passes must be >= 1");
  require(c.d_max >= 0, "d_max must be >= 0");
  c.gamma.validate();
}

int cmd_simulate(const RunConfig& c) {
  validate_common(c);
  require(c.family == "sim", "simulate supports the sim family");
  require(!c.output.empty() && c.output != "-", "simulate requires an output path for the CSV panel");
  cpdet::SimSpec spec;
  spec.N = c.sim_N;
  spec.T = c.sim_T;
  spec.P = c.P;
  spec.S = c.sim_S;
  spec.theta = cpdet::io::make_theta(c);
  spec.lambda = c.lambda;
  spec.seed = c.seed;
  spec.missing_rate = c.missing_rate;
  const cpdet::SimScenario sc = cpdet::generate(spec);
  cpdet::io::write_csv(c.output, sc.panel);
  if (!c.truth_output.empty()) {
    OutputSink sink(c.truth_output);
    cpdet::io::RecordWriter w(*sink.stream, c.hash(), c.seed);
    json rec;
    rec["type"] = "truth";
    rec["N"] = spec.N;
    rec["T"] = spec.T;
    rec["P"] = spec.P;
    rec["changepoints"] = sc.truth.changepoints;
    rec["theta"] = cpdet::io::theta_to_json(spec.theta);
    w.write(rec);
  }
  return 0;
}

int cmd_detect(const RunConfig& c) {
  validate_common(c);
  require(!c.input.empty(), "detect requires an input CSV");
  const auto ingested = cpdet::io::ingest_csv(c.input);
  const cpdet::ModelSpec spec = cpdet::io::make_model_spec(c);
  const cpdet::Theta theta = cpdet::io::make_theta(c);
  require(spec.P == ingested.panel.P(), "panel has " + std::to_string(ingested.panel.P()) +
                                            " variables but the model expects " + std::to_string(spec.P));
  const cpdet::BoundModel bound = cpdet::bind_design(spec, theta);

  OutputSink sink(c.output);
  cpdet::io::RecordWriter w(*sink.stream, c.hash(), c.seed);
  w.write({{"type", "meta"}, {"command", "detect"}, {"N", ingested.panel.N()}, {"T", ingested.panel.T()}});

  const auto on_activity = [&](int n, const cpdet::ParticleSet&, const std::map<int, double>& filt) {
    json posterior = json::object();
    for (const auto& [d, p] : filt) posterior[std::to_string(d)] = p;
    const auto it = filt.find(1);
    const double p_cp = it == filt.end() ? 0.0 : it->second;
    w.write({{"type", "activity"},
             {"n", n},
             {"p_changepoint", p_cp},
             {"alert", p_cp > c.delta},
             {"posterior", posterior}});
  };
  cpdet::run_between_online(bound, ingested.panel, smc_options(c), c.seed, on_activity);
  return 0;
}

int cmd_fit(const RunConfig& c) {
  validate_common(c);
  require(!c.input.empty(), "fit requires an input CSV");
  require(c.family != "custom", "fit requires a family with an M-step (sim or warmup)");
  const auto ingested = cpdet::io::ingest_csv(c.input);
  const cpdet::ModelSpec spec = cpdet::io::make_model_spec(c);
  const cpdet::Theta init = cpdet::io::make_theta(c);
  require(spec.P == ingested.panel.P(), "panel variable count does not match the model");

  cpdet::OnlineEmOptions opts;
  opts.smc = smc_options(c);
  opts.gamma = c.gamma;
  opts.n_min = c.n_min;
  opts.passes = c.passes;

  OutputSink sink(c.output);
  cpdet::io::RecordWriter w(*sink.stream, c.hash(), c.seed);
  w.write({{"type", "meta"},
           {"command", "fit"},
           {"N", ingested.panel.N()},
           {"passes", c.passes},
           {"theta_init", cpdet::io::theta_to_json(init)}});

  cpdet::OnlineEmEngine engine(spec, init, opts, c.seed);
  for (int pass = 1; pass <= c.passes; ++pass) engine.run_pass(ingested.panel);
  for (const auto& e : engine.trace().entries)
    w.write({{"type", "theta"}, {"pass", e.pass}, {"n", e.n}, {"theta", cpdet::io::theta_to_json(e.theta)}});
  return 0;
}

int cmd_monitor(const RunConfig& c) {
  validate_common(c);
  require(!c.input.empty(), "monitor requires an input CSV");
  const auto ingested = cpdet::io::ingest_csv(c.input);
  const int N = ingested.panel.N();
  const int n = c.activity > 0 ? c.activity : N;
  require(n >= 1 && n <= N, "activity index out of range");
  const cpdet::ModelSpec spec = cpdet::io::make_model_spec(c);
  const cpdet::Theta theta = cpdet::io::make_theta(c);
  require(spec.P == ingested.panel.P(), "panel variable count does not match the model");
  const cpdet::BoundModel bound = cpdet::bind_design(spec, theta);

  // Predicted delay distribution for activity n, from its fully observed past.
  std::mt19937_64 rng(c.seed);
  cpdet::PotentialCache cache;
  cpdet::ParticleSet ps = cpdet::init_particles(c.B);
  for (int m = 2; m <= n; ++m)
    ps = cpdet::predict_and_resample(ps, bound, ingested.panel, &cache, rng, smc_options(c));

  OutputSink sink(c.output);
  cpdet::io::RecordWriter w(*sink.stream, c.hash(), c.seed);
  w.write({{"type", "meta"}, {"command", "monitor"}, {"activity", n}, {"kstar", c.kstar}});

  cpdet::Monitor mon(ps, bound, ingested.panel, n, c.kstar);
  for (int t = 1; t <= ingested.panel.T(); ++t) {
    mon.step_at(t, ingested.panel.obs(n, t));
    w.write({{"type", "monitor"},
             {"n", n},
             {"t", t},
             {"p_changepoint", mon.p_changepoint()},
             {"alert", mon.alert(c.delta)}});
  }
  return 0;
}

int cmd_evaluate(const RunConfig& c) {
  validate_common(c);
  require(c.family == "sim", "evaluate supports the sim family");
  require(c.replications >= 1, "replications must be >= 1");
  for (double d : c.deltas) require(d > 0.0 && d < 1.0, "deltas must lie in (0,1)");
  std::vector<int> t_cuts = c.within_t_cuts;
  if (c.within && t_cuts.empty()) t_cuts = {c.sim_T / 3, 2 * c.sim_T / 3};
  for (int t : t_cuts) require(t >= 1 && t <= c.sim_T, "within_t_cuts must lie in 1..T");

  cpdet::SweepConfig cfg;
  cfg.base.N = c.sim_N;
  cfg.base.T = c.sim_T;
  cfg.base.P = c.P;
  cfg.base.S = c.sim_S;
  cfg.base.theta = cpdet::io::make_theta(c);
  cfg.base.lambda = c.lambda;
  cfg.base.seed = c.seed;
  cfg.base.missing_rate = c.missing_rate;
  cfg.smc = smc_options(c);
  cfg.deltas = c.deltas;
  cfg.replications = c.replications;
  cfg.within_t_cuts = t_cuts;
  cfg.kstar = c.kstar;

  const cpdet::DetectionReport report = cpdet::sweep(cfg);

  OutputSink sink(c.output);
  cpdet::io::RecordWriter w(*sink.stream, c.hash(), c.seed);
  w.write({{"type", "meta"},
           {"command", "evaluate"},
           {"replications", c.replications},
           {"N", c.sim_N},
           {"T", c.sim_T},
           {"S", c.sim_S}});
  for (const auto& row : report.rows) {
    json rec{{"type", "report"},
             {"delta", row.delta},
             {"sens_median", row.sens_median},
             {"sens_q05", row.sens_q05},
             {"sens_q95", row.sens_q95},
             {"spec_median", row.spec_median},
             {"spec_q05", row.spec_q05},
             {"spec_q95", row.spec_q95},
             {"sens_reps", row.sens_reps},
             {"spec_reps", row.spec_reps}};
    rec["t_cut"] = row.t_cut.has_value() ? json(*row.t_cut) : json(nullptr);
    w.write(rec);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online changepoint detection for sequences of multivariate time series"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "JSON configuration file");

  // Flag overrides; only values the user supplies replace the file config.
  std::optional<double> lambda, delta, g_kappa, g_c, missing_rate;
  std::optional<int> B, kstar, n_min, passes, d_max, activity, sim_N, sim_T, sim_S, P, reps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> input, output, truth_output, family;
  app.add_option("--family", family, "Model family: sim | warmup | custom");
  app.add_option("--P", P, "Observed variables per time point");
  app.add_option("--lambda", lambda, "Changepoint prior probability");
  app.add_option("--B", B, "Particle count");
  app.add_option("--kstar", kstar, "Monitor lookahead horizon");
  app.add_option("--delta", delta, "Alert threshold");
  app.add_option("--gamma-kappa", g_kappa, "Step-size exponent");
  app.add_option("--gamma-c", g_c, "Step-size offset");
  app.add_option("--n-min", n_min, "Burn-in activities before the first M-step");
  app.add_option("--passes", passes, "Passes over the activity sequence");
  app.add_option("--d-max", d_max, "Optional delay cap (0 = unbounded)");
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--input", input, "Input CSV panel");
  app.add_option("--output", output, "Output path ('-' = stdout)");
  app.add_option("--truth-output", truth_output, "Where simulate writes the true segmentation");
  app.add_option("--activity", activity, "Activity to monitor");
  app.add_option("--N", sim_N, "Simulated activities");
  app.add_option("--T", sim_T, "Simulated time points");
  app.add_option("--S", sim_S, "Simulated changepoints");
  app.add_option("--replications", reps, "Sweep replications");
  app.add_option("--missing-rate", missing_rate, "Per-cell dropout probability in simulate");
  bool within = false;
  app.add_flag("--within", within, "Also evaluate mid-activity detection (cuts default to T/3, 2T/3)");

  auto* sub_simulate = app.add_subcommand("simulate", "Generate a synthetic panel CSV");
  auto* sub_fit = app.add_subcommand("fit", "Online EM parameter estimation");
  auto* sub_detect = app.add_subcommand("detect", "Between-online changepoint detection");
  auto* sub_monitor = app.add_subcommand("monitor", "Within-online changepoint monitoring");
  auto* sub_evaluate = app.add_subcommand("evaluate", "Replicated detection-quality sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (family) cfg.family = *family;
    if (P) cfg.P = *P;
    if (lambda) cfg.lambda = *lambda;
    if (B) cfg.B = *B;
    if (kstar) cfg.kstar = *kstar;
    if (delta) cfg.delta = *delta;
    if (g_kappa) cfg.gamma.kappa = *g_kappa;
    if (g_c) cfg.gamma.c = *g_c;
    if (n_min) cfg.n_min = *n_min;
    if (passes) cfg.passes = *passes;
    if (d_max) cfg.d_max = *d_max;
    if (seed) cfg.seed = *seed;
    if (input) cfg.input = *input;
    if (output) cfg.output = *output;
    if (truth_output) cfg.truth_output = *truth_output;
    if (activity) cfg.activity = *activity;
    if (sim_N) cfg.sim_N = *sim_N;
    if (sim_T) cfg.sim_T = *sim_T;
    if (sim_S) cfg.sim_S = *sim_S;
    if (reps) cfg.replications = *reps;
    if (missing_rate) cfg.missing_rate = *missing_rate;
    if (within) cfg.within = true;

    if (sub_simulate->parsed()) return cmd_simulate(cfg);
    if (sub_fit->parsed()) return cmd_fit(cfg);
    if (sub_detect->parsed()) return cmd_detect(cfg);
    if (sub_monitor->parsed()) return cmd_monitor(cfg);
    if (sub_evaluate->parsed()) return cmd_evaluate(cfg);
    return 1;
  } catch (const std::exception& e) {
    json err{{"type", "error"}, {"message", e.what()}};
    std::cout << err.dump() << std::endl;
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
