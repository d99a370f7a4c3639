#pragma once

// Online EM over the delay-augmented model: per-activity contributions to the
// expected complete-data sufficient statistics, the stochastic-approximation
// recursion that propagates them along the delay chain, aggregation under the
// filtered delay posterior, and the closed-form maximization maps for the
// built-in families. A batch EM over exact delay posteriors is provided for
// validation on small panels.
//
// Sufficient statistics are flat vectors with a family-specific layout; every
// component is an accumulator (including event and cell counts), so the
// convex-combination recursion applies to all of them uniformly.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cpdet/cpfilter.hpp"
#include "cpdet/kalman.hpp"
#include "cpdet/model.hpp"
#include "cpdet/numutil.hpp"
#include "cpdet/segment.hpp"

namespace cpdet {

// Layout of the Sim-family statistic vector.
namespace simstat {
constexpr int kCp = 0;        // changepoint events
constexpr int kCont = 1;      // continuation events
constexpr int kObsSse = 2;    // sum of expected squared measurement residuals
constexpr int kObsN = 3;      // observed scalar cells
constexpr int kSegQuad = 4;   // sum_t tr(W^-1 E[xi xi']) with W = I_P (x) Psi0
constexpr int kSegN = 5;      // M per transition
constexpr int kS00 = 6;       // sum tr E[a_t a_t'] over activity blocks
constexpr int kS01 = 7;       // sum tr E[a_{t+1} a_t']
constexpr int kS11 = 8;       // sum tr E[a_{t+1} a_{t+1}']
constexpr int kActN = 9;      // K per activity transition
constexpr int kDim = 10;
}  // namespace simstat

// Layout of the Warmup-family statistic vector (P=2, M=3, K=2).
namespace wustat {
constexpr int kCp = 0;
constexpr int kCont = 1;
constexpr int kObsSse = 2;   // vech 2x2 (3 entries), fully-observed vectors only
constexpr int kObsN = 5;
constexpr int kPsi = 6;      // vech 3x3 (6 entries)
constexpr int kPsiN = 12;
constexpr int kC00 = 13;     // vech 2x2
constexpr int kC10 = 16;     // full 2x2, column-major (cross moments are not symmetric)
constexpr int kC11 = 20;     // vech 2x2
constexpr int kActN = 23;
constexpr int kDim = 24;
}  // namespace wustat

inline int suffstats_dim(Family f) {
  switch (f) {
    case Family::Sim: return simstat::kDim;
    case Family::Warmup: return wustat::kDim;
    case Family::Custom: break;
  }
  throw std::invalid_argument("suffstats: custom families have no statistic layout");
}

namespace detail {

inline void vech_add(const MatrixXd& m, double sign, VectorXd& stats, int offset) {
  int k = offset;
  for (int j = 0; j < m.cols(); ++j)
    for (int i = j; i < m.rows(); ++i) stats(k++) += sign * m(i, j);
}

inline MatrixXd unvech(const VectorXd& stats, int offset, int n) {
  MatrixXd m(n, n);
  int k = offset;
  for (int j = 0; j < n; ++j)
    for (int i = j; i < n; ++i) {
      m(i, j) = stats(k);
      m(j, i) = stats(k);
      ++k;
    }
  return m;
}

inline void full_add(const MatrixXd& m, double sign, VectorXd& stats, int offset) {
  int k = offset;
  for (int j = 0; j < m.cols(); ++j)
    for (int i = 0; i < m.rows(); ++i) stats(k++) += sign * m(i, j);
}

inline MatrixXd unfull(const VectorXd& stats, int offset, int n) {
  MatrixXd m(n, n);
  int k = offset;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) m(i, j) = stats(k++);
  return m;
}

// Clamp eigenvalues from below so the matrix is strictly positive definite.
inline MatrixXd spd_floor(MatrixXd m, double eps = 1e-10) {
  symmetrize(m);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  VectorXd ev = es.eigenvalues().cwiseMax(eps);
  MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  symmetrize(out);
  return out;
}

// E[(a_{t+1} - T a_t)(a_{t+1} - T a_t)'] restricted to one diagonal state
// block, from smoothed moments.
inline MatrixXd noise_quad_block(const SmootherResult& sm, int t_idx, int off, int dim,
                                 const MatrixXd& trans) {
  const MatrixXd m00 = sm.cov[static_cast<std::size_t>(t_idx)].block(off, off, dim, dim) +
                       sm.mean[static_cast<std::size_t>(t_idx)].segment(off, dim) *
                           sm.mean[static_cast<std::size_t>(t_idx)].segment(off, dim).transpose();
  const MatrixXd m11 = sm.cov[static_cast<std::size_t>(t_idx + 1)].block(off, off, dim, dim) +
                       sm.mean[static_cast<std::size_t>(t_idx + 1)].segment(off, dim) *
                           sm.mean[static_cast<std::size_t>(t_idx + 1)].segment(off, dim).transpose();
  const MatrixXd m10 = sm.lag_one[static_cast<std::size_t>(t_idx)].block(off, off, dim, dim) +
                       sm.mean[static_cast<std::size_t>(t_idx + 1)].segment(off, dim) *
                           sm.mean[static_cast<std::size_t>(t_idx)].segment(off, dim).transpose();
  MatrixXd a = m11 - m10 * trans.transpose() - trans * m10.transpose() + trans * m00 * trans.transpose();
  symmetrize(a);
  return a;
}

}  // namespace detail

// Adds (sign times) the expected complete-data statistics of the stacked
// segment model for activities j..n, smoothed against the panel, into stats.
inline void accumulate_segment_stats(const BoundModel& b, const ActivityPanel& panel, int j, int n,
                                     const SmootherResult& sm, double sign, VectorXd& stats) {
  const int m = n - j + 1;
  const int T = static_cast<int>(sm.mean.size());
  const int M = b.M, K = b.K, P = b.P;

  MatrixXd psi0_inv;
  if (b.family == Family::Sim) {
    MatrixXd psi0(2, 2);
    psi0 << 1.0 / 3.0, 0.5, 0.5, 1.0;
    psi0_inv = kron(MatrixXd::Identity(P, P), psi0.inverse());
  }

  for (int t = 1; t <= T; ++t) {
    const VectorXd& mu = sm.mean[static_cast<std::size_t>(t - 1)];
    const MatrixXd& v = sm.cov[static_cast<std::size_t>(t - 1)];
    for (int i = 0; i < m; ++i) {
      const int act = j + i;
      const int off = M + i * K;
      const VectorXd mu_s = mu.head(M);
      const VectorXd mu_a = mu.segment(off, K);
      const MatrixXd v_ss = v.topLeftCorner(M, M);
      const MatrixXd v_sa = v.block(0, off, M, K);
      const MatrixXd v_aa = v.block(off, off, K, K);

      if (b.family == Family::Sim) {
        for (int p = 1; p <= P; ++p) {
          if (!panel.observed(act, t, p)) continue;
          const double y = panel.value(act, t, p);
          const Eigen::RowVectorXd zs = b.Z_S.row(p - 1);
          const Eigen::RowVectorXd za = b.Z_A.row(p - 1);
          const double zmu = zs.dot(mu_s) + za.dot(mu_a);
          const double zvz = (zs * v_ss).dot(zs) + 2.0 * (zs * v_sa).dot(za) + (za * v_aa).dot(za);
          const double r = y - zmu;
          stats(simstat::kObsSse) += sign * (r * r + zvz);
          stats(simstat::kObsN) += sign;
        }
      } else {
        PartialObs o = panel.obs(act, t);
        if (o.n_observed() != P) continue;  // partially observed vectors are skipped
        const VectorXd r = o.value - (b.Z_S * mu_s + b.Z_A * mu_a);
        MatrixXd err = r * r.transpose() + b.Z_S * v_ss * b.Z_S.transpose() +
                       b.Z_S * v_sa * b.Z_A.transpose() +
                       (b.Z_S * v_sa * b.Z_A.transpose()).transpose() +
                       b.Z_A * v_aa * b.Z_A.transpose();
        symmetrize(err);
        detail::vech_add(err, sign, stats, wustat::kObsSse);
        stats(wustat::kObsN) += sign;
      }
    }
  }

  for (int t = 1; t <= T - 1; ++t) {
    const MatrixXd seg_quad = detail::noise_quad_block(sm, t - 1, 0, M, b.T_S);
    if (b.family == Family::Sim) {
      stats(simstat::kSegQuad) += sign * (psi0_inv * seg_quad).trace();
      stats(simstat::kSegN) += sign * M;
    } else {
      detail::vech_add(seg_quad, sign, stats, wustat::kPsi);
      stats(wustat::kPsiN) += sign;
    }
    for (int i = 0; i < m; ++i) {
      const int off = M + i * K;
      const VectorXd& mu0 = sm.mean[static_cast<std::size_t>(t - 1)];
      const VectorXd& mu1 = sm.mean[static_cast<std::size_t>(t)];
      const MatrixXd c00 = sm.cov[static_cast<std::size_t>(t - 1)].block(off, off, K, K) +
                           mu0.segment(off, K) * mu0.segment(off, K).transpose();
      const MatrixXd c11 = sm.cov[static_cast<std::size_t>(t)].block(off, off, K, K) +
                           mu1.segment(off, K) * mu1.segment(off, K).transpose();
      const MatrixXd c10 = sm.lag_one[static_cast<std::size_t>(t - 1)].block(off, off, K, K) +
                           mu1.segment(off, K) * mu0.segment(off, K).transpose();
      if (b.family == Family::Sim) {
        stats(simstat::kS00) += sign * c00.trace();
        stats(simstat::kS01) += sign * c10.trace();
        stats(simstat::kS11) += sign * c11.trace();
        stats(simstat::kActN) += sign * K;
      } else {
        detail::vech_add(c00, sign, stats, wustat::kC00);
        detail::full_add(c10, sign, stats, wustat::kC10);
        detail::vech_add(c11, sign, stats, wustat::kC11);
        stats(wustat::kActN) += sign;
      }
    }
  }
}

// Contribution of activity n at delay d: the difference of expected
// complete-data statistics between the segment smoothed with activities j..n
// and with j..n-1 (the plain statistics when d = 1), plus the changepoint or
// continuation event indicator.
inline VectorXd individual_contribution(const BoundModel& b, const ActivityPanel& panel, int n,
                                        int d) {
  if (d < 1 || d > n) throw std::invalid_argument("individual_contribution: delay out of range");
  const int j = n - d + 1;
  VectorXd stats = VectorXd::Zero(suffstats_dim(b.family));

  {
    const StateSpaceInstance inst = assemble(b, n - j + 1);
    const auto obs = stacked_series(panel, j, n, panel.T());
    accumulate_segment_stats(b, panel, j, n, smooth(inst, obs), +1.0, stats);
  }
  if (d == 1) {
    stats(0) += 1.0;  // changepoint event (kCp shares index 0 in both layouts)
  } else {
    stats(1) += 1.0;
    const StateSpaceInstance inst = assemble(b, n - j);
    const auto obs = stacked_series(panel, j, n - 1, panel.T());
    accumulate_segment_stats(b, panel, j, n - 1, smooth(inst, obs), -1.0, stats);
  }
  return stats;
}

// Stochastic-approximation update of the per-delay statistics: each delay in
// the new support mixes (1-gamma) of its predecessors' statistics (through
// the backward kernel) with gamma of the fresh contribution. Affine in the
// statistic inputs.
inline std::map<int, VectorXd> update_suffstats(
    const std::map<int, VectorXd>& prev_stats, const std::map<int, VectorXd>& incr,
    double gamma_n, const std::function<std::map<int, double>(int)>& backward) {
  std::map<int, VectorXd> out;
  for (const auto& [d, iota] : incr) {
    const auto kernel = backward(d);
    if (kernel.empty()) throw std::runtime_error("update_suffstats: backward kernel has no mass");
    VectorXd mixed = VectorXd::Zero(iota.size());
    for (const auto& [d_prev, w] : kernel) {
      auto it = prev_stats.find(d_prev);
      if (it == prev_stats.end())
        throw std::runtime_error("update_suffstats: predecessor delay missing from statistics");
      mixed += w * it->second;
    }
    out[d] = (1.0 - gamma_n) * mixed + gamma_n * iota;
  }
  return out;
}

// Probability-weighted average of the per-delay statistics under the filtered
// delay posterior.
inline VectorXd aggregate_Q(const std::map<int, VectorXd>& stats,
                            const std::map<int, double>& filtered) {
  if (stats.empty()) throw std::invalid_argument("aggregate_Q: empty statistics");
  VectorXd q = VectorXd::Zero(stats.begin()->second.size());
  for (const auto& [d, w] : filtered) {
    auto it = stats.find(d);
    if (it == stats.end()) throw std::runtime_error("aggregate_Q: posterior delay missing from statistics");
    q += w * it->second;
  }
  return q;
}

constexpr double kArClamp = 1.0 - 1e-6;
constexpr double kVarFloor = 1e-10;

// Closed-form maximization map for the built-in families. The Warmup family
// couples the AR coefficient with a full activity-noise covariance, solved by
// a short coordinate ascent (each sweep is exact given the other block);
// warm_start seeds that ascent.
inline Theta maximize(Family family, const VectorXd& q, const Theta* warm_start = nullptr) {
  if (family == Family::Sim) {
    using namespace simstat;
    if (q.size() != kDim) throw std::invalid_argument("maximize: statistic dimension mismatch");
    if (q(kObsN) <= 0 || q(kSegN) <= 0 || q(kActN) <= 0 || q(kS00) <= 0)
      throw std::runtime_error("maximize: singular moment blocks");
    const double se2 = std::max(q(kObsSse) / q(kObsN), kVarFloor);
    const double sa2 = std::max(q(kSegQuad) / q(kSegN), kVarFloor);
    double rho = q(kS01) / q(kS00);
    rho = std::clamp(rho, -kArClamp, kArClamp);
    const double sd2 =
        std::max((q(kS11) - 2.0 * rho * q(kS01) + rho * rho * q(kS00)) / q(kActN), kVarFloor);
    const int p = warm_start != nullptr ? static_cast<int>(warm_start->Sigma.rows()) : 2;
    return Theta::sim(se2, sa2, sd2, rho, p);
  }
  if (family == Family::Warmup) {
    using namespace wustat;
    if (q.size() != kDim) throw std::invalid_argument("maximize: statistic dimension mismatch");
    if (q(kObsN) <= 0 || q(kPsiN) <= 0 || q(kActN) <= 0)
      throw std::runtime_error("maximize: singular moment blocks");
    const MatrixXd sigma = detail::spd_floor(detail::unvech(q, kObsSse, 2) / q(kObsN));
    const MatrixXd psi = detail::spd_floor(detail::unvech(q, kPsi, 3) / q(kPsiN));
    const MatrixXd c00 = detail::unvech(q, kC00, 2);
    const MatrixXd c10 = detail::unfull(q, kC10, 2);
    const MatrixXd c11 = detail::unvech(q, kC11, 2);

    MatrixXd e22 = MatrixXd::Zero(2, 2);
    e22(1, 1) = 1.0;
    MatrixXd t0 = MatrixXd::Zero(2, 2);
    t0(0, 0) = 1.0;

    double rho = warm_start != nullptr ? warm_start->rho_sp() : 0.0;
    MatrixXd delta = warm_start != nullptr ? warm_start->Delta
                                           : detail::spd_floor(c11 / q(kActN));
    for (int sweep = 0; sweep < 10; ++sweep) {
      const MatrixXd di = delta.inverse();
      const double denom = (di * e22 * c00 * e22).trace();
      if (denom <= 0) throw std::runtime_error("maximize: singular moment blocks");
      rho = ((di * c10 * e22).trace() - (di * t0 * c00 * e22).trace()) / denom;
      rho = std::clamp(rho, -kArClamp, kArClamp);
      const MatrixXd t = t0 + rho * e22;
      MatrixXd a = c11 - t * c10.transpose() - c10 * t.transpose() + t * c00 * t.transpose();
      delta = detail::spd_floor(a / q(kActN));
    }
    return Theta::warmup(sigma, psi, delta, rho);
  }
  throw std::invalid_argument("maximize: unsupported family");
}

// Step sizes gamma_n = (n + c)^(-kappa); kappa in (0.5, 1] and c >= 1 give
// 0 < gamma_n < 1 with divergent sum and summable squares.
struct GammaSchedule {
  double kappa = 0.7;
  double c = 1.0;

  void validate() const {
    if (!(kappa > 0.5 && kappa <= 1.0)) throw std::invalid_argument("GammaSchedule: kappa must lie in (0.5, 1]");
    if (c < 1.0) throw std::invalid_argument("GammaSchedule: c must be >= 1");
  }
  [[nodiscard]] double operator()(long n) const { return std::pow(static_cast<double>(n) + c, -kappa); }
};

struct EstimateTrace {
  struct Entry {
    int pass = 1;
    int n = 0;
    Theta theta;
  };
  std::vector<Entry> entries;
};

struct OnlineEmOptions {
  SmcOptions smc;
  GammaSchedule gamma;
  int n_min = 10;  // activities before the first M-step
  int passes = 1;
};

// Between-online engine with parameter learning: per completed activity it
// advances the particle cloud, folds the activity's contribution into the
// per-delay statistics, aggregates them under the filtered posterior, and
// re-maximizes. Parameter updates are frozen during the burn-in window.
class OnlineEmEngine {
 public:
  OnlineEmEngine(ModelSpec spec, Theta init, OnlineEmOptions opts, std::uint64_t seed)
      : spec_(std::move(spec)),
        theta_(std::move(init)),
        opts_(opts),
        rng_(seed) {
    opts_.gamma.validate();
    bound_ = bind_design(spec_, theta_);
    ps_ = init_particles(opts_.smc.B);
  }

  // Processes activities 1..N of the panel once. May be called repeatedly:
  // each pass is a fresh online-EM run (particle cloud, statistics and step
  // sizes restart) warm-started at the current estimate, which is how the
  // repeated-EM convergence scheme is realized.
  void run_pass(const ActivityPanel& panel) {
    ++pass_;
    pass_step_ = 0;
    ps_ = init_particles(opts_.smc.B);
    stats_.clear();
    cache_.clear();
    for (int n = 1; n <= panel.N(); ++n) step(panel, n);
  }

  // One between-online step: activity n of the current pass has completed.
  void step(const ActivityPanel& panel, int n) {
    ++total_step_;
    ++pass_step_;
    if (n == 1) {
      ps_ = init_particles(opts_.smc.B);
      stats_.clear();
      stats_[1] = individual_contribution(bound_, panel, 1, 1);
      filtered_ = filtered_posterior(ps_, bound_, panel, &cache_);
    } else {
      const ParticleSet prev = std::move(ps_);
      const std::map<int, VectorXd> prev_stats = std::move(stats_);
      ps_ = predict_and_resample(prev, bound_, panel, &cache_, rng_, opts_.smc);

      std::map<int, VectorXd> incr;
      for (const auto& [d, w] : ps_.support_weights())
        incr[d] = individual_contribution(bound_, panel, n, d);

      const double gamma_n = opts_.gamma(pass_step_);
      stats_ = update_suffstats(prev_stats, incr, gamma_n, [&](int d_n) {
        return backward_kernel(prev, d_n, bound_, panel, &cache_);
      });
      filtered_ = filtered_posterior(ps_, bound_, panel, &cache_);
    }

    if (pass_step_ > opts_.n_min) {
      const VectorXd q = aggregate_Q(stats_, filtered_);
      theta_ = maximize(spec_.family, q, &theta_);
      bound_ = bind_design(spec_, theta_);
      cache_.clear();  // cached marginals belong to the previous parameter
    } else {
      cache_.trim(1, n - 1);
    }
    trace_.entries.push_back({pass_, n, theta_});
  }

  [[nodiscard]] const Theta& theta() const { return theta_; }
  [[nodiscard]] const ParticleSet& particles() const { return ps_; }
  [[nodiscard]] const std::map<int, double>& filtered() const { return filtered_; }
  [[nodiscard]] const EstimateTrace& trace() const { return trace_; }
  [[nodiscard]] const BoundModel& bound() const { return bound_; }

 private:
  ModelSpec spec_;
  Theta theta_;
  OnlineEmOptions opts_;
  BoundModel bound_;
  ParticleSet ps_;
  std::map<int, VectorXd> stats_;
  std::map<int, double> filtered_;
  PotentialCache cache_;
  EstimateTrace trace_;
  std::mt19937_64 rng_;
  long total_step_ = 0;  // across passes
  long pass_step_ = 0;   // within the pass: step-size schedule and burn-in
  int pass_ = 0;
};

struct BatchEmResult {
  std::vector<Theta> thetas;    // iterates, starting with the initial value
  std::vector<double> logliks;  // observed-data log-likelihood at each iterate
};

// Batch EM for validation. Without a fixed segmentation the E-step uses exact
// smoothed delay marginals (forward-backward over the delay chain), so the
// panel must satisfy the exact-enumeration guard. With a fixed segmentation
// the delay chain is conditioned away and the panel size is unrestricted.
inline BatchEmResult batch_em(const ModelSpec& spec, const Theta& init, const ActivityPanel& panel,
                              int iterations, const SegmentIndex* fixed_segments = nullptr) {
  const int N = panel.N();
  BatchEmResult out;
  Theta theta = init;
  for (int it = 0; it <= iterations; ++it) {
    const BoundModel b = bind_design(spec, theta);
    PotentialCache cache;
    VectorXd q = VectorXd::Zero(suffstats_dim(spec.family));
    double loglik = 0.0;

    if (fixed_segments != nullptr) {
      for (const auto& seg : fixed_segments->segments()) {
        const StateSpaceInstance inst = assemble(b, seg.length());
        const auto obs = stacked_series(panel, seg.first, seg.last, panel.T());
        const FilterResult fr = filter(inst, obs);
        loglik += fr.loglik;
        accumulate_segment_stats(b, panel, seg.first, seg.last, smooth(inst, fr), +1.0, q);
      }
    } else {
      const ExactDelayPosterior exact = exact_enumeration(b, panel, &cache);
      loglik = exact.log_marginal;

      // Backward pass over the delay chain; beta[n-1][d-1] in log scale.
      std::vector<std::vector<double>> log_beta(static_cast<std::size_t>(N));
      log_beta[static_cast<std::size_t>(N - 1)].assign(static_cast<std::size_t>(N), 0.0);
      for (int n = N - 1; n >= 1; --n) {
        auto& row = log_beta[static_cast<std::size_t>(n - 1)];
        row.assign(static_cast<std::size_t>(n), 0.0);
        const auto& next = log_beta[static_cast<std::size_t>(n)];
        const double lg1 = log_potential(b, panel, n + 1, 1, &cache);
        for (int d = 1; d <= n; ++d) {
          const double stay = std::log1p(-b.lambda) +
                              log_potential(b, panel, n + 1, d + 1, &cache) +
                              next[static_cast<std::size_t>(d)];
          const double jump = std::log(b.lambda) + lg1 + next[0];
          row[static_cast<std::size_t>(d - 1)] = log_sum_exp({stay, jump});
        }
      }

      for (int n = 1; n <= N; ++n) {
        std::vector<double> logw(static_cast<std::size_t>(n));
        for (int d = 1; d <= n; ++d) {
          const double f = exact.filtered[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(d - 1)];
          logw[static_cast<std::size_t>(d - 1)] =
              (f > 0 ? std::log(f) : kNegInf) + log_beta[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(d - 1)];
        }
        normalize_log_weights(logw);
        for (int d = 1; d <= n; ++d) {
          const double w = logw[static_cast<std::size_t>(d - 1)];
          if (w < 1e-14) continue;
          q += w * individual_contribution(b, panel, n, d);
        }
      }
    }

    out.thetas.push_back(theta);
    out.logliks.push_back(loglik);
    if (it == iterations) break;
    theta = maximize(spec.family, q, &theta);
  }
  return out;
}

}  // namespace cpdet
