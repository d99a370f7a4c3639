#pragma once

// Synthetic scenario generation and detection-quality evaluation: seeded
// panel generation from the Sim family's generative equations, confusion
// rates against the true segmentation, and threshold sweeps over replications
// for both between-online (end of activity) and within-online (mid-activity)
// detection.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cpdet/cpfilter.hpp"
#include "cpdet/model.hpp"
#include "cpdet/monitor.hpp"
#include "cpdet/numutil.hpp"

namespace cpdet {

struct SimSpec {
  int N = 1000;
  int T = 120;
  int P = 2;
  int S = 50;  // number of changepoints among activities 2..N
  Theta theta = Theta::sim(1.0, 0.05, 5.0, 0.8);
  double lambda = 0.5;
  std::uint64_t seed = 1;
  double missing_rate = 0.0;  // per-cell dropout probability
};

struct SimScenario {
  SimSpec spec;
  SegmentIndex truth;
  std::vector<MatrixXd> segment_states;   // per segment: M x T
  std::vector<MatrixXd> activity_states;  // per activity: K x T
  ActivityPanel panel;
};

namespace detail {

// Symmetric PSD square root; tolerates zero variances (noiseless limits).
inline MatrixXd psd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline VectorXd gaussian(const MatrixXd& sqrt_cov, std::mt19937_64& rng) {
  std::normal_distribution<double> norm(0.0, 1.0);
  VectorXd z(sqrt_cov.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = norm(rng);
  return sqrt_cov * z;
}

// S distinct values drawn uniformly without replacement from 2..N.
inline std::vector<int> draw_changepoints(int N, int S, std::mt19937_64& rng) {
  std::vector<int> candidates;
  for (int n = 2; n <= N; ++n) candidates.push_back(n);
  for (int i = 0; i < S; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<int> cps(candidates.begin(), candidates.begin() + S);
  std::sort(cps.begin(), cps.end());
  return cps;
}

}  // namespace detail

// Generates a panel from the Sim-family equations: segment states follow the
// paired level/slope transition restarted from zero at each changepoint,
// activity states are AR(1), and observations load both plus measurement
// noise. Zero variances are allowed (unlike fitting) so noiseless limits can
// be generated. Fully reproducible from the seed.
inline SimScenario generate(const SimSpec& spec) {
  if (spec.S >= spec.N) throw std::invalid_argument("generate: need S < N");
  if (spec.N < 1 || spec.T < 1 || spec.P < 1) throw std::invalid_argument("generate: invalid dimensions");
  std::mt19937_64 rng(spec.seed);

  const ModelSpec ms = ModelSpec::sim(spec.P, spec.lambda);
  const double rho = spec.theta.rho();
  const MatrixXd t_act = rho * MatrixXd::Identity(spec.P, spec.P);
  const MatrixXd sqrt_psi = detail::psd_sqrt(spec.theta.Psi);
  const MatrixXd sqrt_delta = detail::psd_sqrt(spec.theta.Delta);
  const MatrixXd sqrt_sigma = detail::psd_sqrt(spec.theta.Sigma);

  SimScenario sc;
  sc.spec = spec;
  sc.truth = SegmentIndex::from_changepoints(detail::draw_changepoints(spec.N, spec.S, rng), spec.N);
  sc.panel = ActivityPanel(spec.N, spec.T, spec.P);

  const int n_segments = static_cast<int>(sc.truth.segments().size());
  for (int s = 0; s < n_segments; ++s) {
    MatrixXd alpha(ms.M, spec.T);
    VectorXd prev = VectorXd::Zero(ms.M);  // alpha_0 = 0
    for (int t = 1; t <= spec.T; ++t) {
      prev = ms.T_S * prev + detail::gaussian(sqrt_psi, rng);
      alpha.col(t - 1) = prev;
    }
    sc.segment_states.push_back(std::move(alpha));
  }

  for (int n = 1; n <= spec.N; ++n) {
    MatrixXd alpha(ms.K, spec.T);
    VectorXd prev = VectorXd::Zero(ms.K);
    for (int t = 1; t <= spec.T; ++t) {
      prev = t_act * prev + detail::gaussian(sqrt_delta, rng);
      alpha.col(t - 1) = prev;
    }
    sc.activity_states.push_back(std::move(alpha));
  }

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto segments = sc.truth.segments();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (int n = segments[s].first; n <= segments[s].last; ++n) {
      for (int t = 1; t <= spec.T; ++t) {
        const VectorXd y = ms.Z_S * sc.segment_states[s].col(t - 1) +
                           ms.Z_A * sc.activity_states[static_cast<std::size_t>(n - 1)].col(t - 1) +
                           detail::gaussian(sqrt_sigma, rng);
        for (int p = 1; p <= spec.P; ++p) sc.panel.set(n, t, p, y(p - 1));
      }
    }
  }
  if (spec.missing_rate > 0.0) {
    for (int n = 1; n <= spec.N; ++n)
      for (int t = 1; t <= spec.T; ++t)
        for (int p = 1; p <= spec.P; ++p)
          if (unif(rng) < spec.missing_rate) sc.panel.set_missing(n, t, p);
  }
  return sc;
}

// Confusion rates over activities 2..N (activity 1 is a segment start by
// construction and is excluded from classification). When a class is empty
// its rate is vacuously 1.
inline std::pair<double, double> score(const std::set<int>& detected, const SegmentIndex& truth,
                                       int N) {
  for (int n : detected)
    if (n < 2 || n > N) throw std::invalid_argument("score: detected index out of range");
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (int n = 2; n <= N; ++n) {
    const bool is_cp = truth.is_changepoint(n);
    const bool hit = detected.count(n) > 0;
    if (is_cp && hit) ++tp;
    if (is_cp && !hit) ++fn;
    if (!is_cp && hit) ++fp;
    if (!is_cp && !hit) ++tn;
  }
  const double sens = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 1.0;
  const double spec = (tn + fp) > 0 ? static_cast<double>(tn) / (tn + fp) : 1.0;
  return {sens, spec};
}

struct SweepConfig {
  SimSpec base;
  SmcOptions smc;
  std::vector<double> deltas{0.3, 0.5, 0.7, 0.9};
  int replications = 5;
  std::vector<int> within_t_cuts;  // empty = between-online only
  int kstar = 0;
  std::uint64_t seed = 1;
  bool parallel = true;
};

struct DetectionReport {
  struct Row {
    double delta = 0.0;
    std::optional<int> t_cut;  // empty for between-online detection
    double sens_median = 0.0, sens_q05 = 0.0, sens_q95 = 0.0;
    double spec_median = 0.0, spec_q05 = 0.0, spec_q95 = 0.0;
    std::vector<double> sens_reps, spec_reps;
  };
  std::vector<Row> rows;
};

namespace detail {

struct RepOutcome {
  // keyed by (delta index, t-cut index + 1); 0 = between-online
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> rates;
};

inline RepOutcome run_replication(const SweepConfig& cfg, int rep) {
  SimSpec spec = cfg.base;
  spec.seed = cfg.base.seed + 7919ULL * static_cast<std::uint64_t>(rep);
  const SimScenario sc = generate(spec);
  const BoundModel bound = bind_design(ModelSpec::sim(spec.P, spec.lambda), spec.theta);

  // p(D_n = 1 | ...) at the end of each activity, and at each within cut.
  std::vector<double> p_between;
  std::vector<std::vector<double>> p_within(cfg.within_t_cuts.size());

  const auto on_activity = [&](int n, const ParticleSet& ps, const std::map<int, double>&) {
    if (cfg.within_t_cuts.empty()) return;
    Monitor mon(ps, bound, sc.panel, n, cfg.kstar);
    const int t_max = *std::max_element(cfg.within_t_cuts.begin(), cfg.within_t_cuts.end());
    for (int t = 1; t <= std::min(t_max, sc.panel.T()); ++t) {
      mon.step(sc.panel.obs(n, t));
      for (std::size_t c = 0; c < cfg.within_t_cuts.size(); ++c)
        if (cfg.within_t_cuts[c] == t) p_within[c].push_back(mon.p_changepoint());
    }
  };

  const auto res = run_between_online(bound, sc.panel, cfg.smc,
                                      spec.seed + 0x9e3779b97f4a7c15ULL, on_activity);
  p_between = res.p_changepoint;

  RepOutcome out;
  for (std::size_t di = 0; di < cfg.deltas.size(); ++di) {
    const double delta = cfg.deltas[di];
    std::set<int> detected;
    for (int n = 2; n <= spec.N; ++n)
      if (p_between[static_cast<std::size_t>(n - 1)] > delta) detected.insert(n);
    out.rates[{di, 0}] = score(detected, sc.truth, spec.N);

    for (std::size_t c = 0; c < cfg.within_t_cuts.size(); ++c) {
      std::set<int> det_w;
      for (int n = 2; n <= spec.N; ++n)
        if (p_within[c][static_cast<std::size_t>(n - 1)] > delta) det_w.insert(n);
      out.rates[{di, c + 1}] = score(det_w, sc.truth, spec.N);
    }
  }
  return out;
}

}  // namespace detail

// Runs the replicated threshold sweep. Replications own isolated generator
// and engine seeds and may run concurrently; the report is deterministic for
// a fixed configuration.
inline DetectionReport sweep(const SweepConfig& cfg) {
  if (cfg.replications < 1) throw std::invalid_argument("sweep: need at least one replication");
  for (int t : cfg.within_t_cuts)
    if (t < 1 || t > cfg.base.T) throw std::invalid_argument("sweep: within-online cut outside 1..T");
  std::vector<detail::RepOutcome> outcomes(static_cast<std::size_t>(cfg.replications));
  if (cfg.parallel && cfg.replications > 1) {
    std::vector<std::future<detail::RepOutcome>> futs;
    futs.reserve(static_cast<std::size_t>(cfg.replications));
    for (int r = 0; r < cfg.replications; ++r)
      futs.push_back(std::async(std::launch::async, [&cfg, r] { return detail::run_replication(cfg, r); }));
    for (int r = 0; r < cfg.replications; ++r) outcomes[static_cast<std::size_t>(r)] = futs[static_cast<std::size_t>(r)].get();
  } else {
    for (int r = 0; r < cfg.replications; ++r) outcomes[static_cast<std::size_t>(r)] = detail::run_replication(cfg, r);
  }

  DetectionReport report;
  const std::size_t n_cuts = cfg.within_t_cuts.size();
  for (std::size_t di = 0; di < cfg.deltas.size(); ++di) {
    for (std::size_t c = 0; c <= n_cuts; ++c) {
      DetectionReport::Row row;
      row.delta = cfg.deltas[di];
      if (c > 0) row.t_cut = cfg.within_t_cuts[c - 1];
      for (const auto& oc : outcomes) {
        const auto& [sens, spec] = oc.rates.at({di, c});
        row.sens_reps.push_back(sens);
        row.spec_reps.push_back(spec);
      }
      row.sens_median = median(row.sens_reps);
      row.sens_q05 = quantile(row.sens_reps, 0.05);
      row.sens_q95 = quantile(row.sens_reps, 0.95);
      row.spec_median = median(row.spec_reps);
      row.spec_q05 = quantile(row.spec_reps, 0.05);
      row.spec_q95 = quantile(row.spec_reps, 0.95);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

}  // namespace cpdet
