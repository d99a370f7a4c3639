#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cpdet/onlineem.hpp"
#include "cpdet/simlab.hpp"

using namespace cpdet;

namespace {

BoundModel sim_bound(double lambda = 0.5, int P = 2) {
  return bind_design(ModelSpec::sim(P, lambda), Theta::sim(1.0, 0.05, 5.0, 0.8, P));
}

ActivityPanel small_panel(int N, int T, int S, std::uint64_t seed, int P = 2) {
  SimSpec spec;
  spec.N = N;
  spec.T = T;
  spec.P = P;
  spec.S = S;
  spec.seed = seed;
  return generate(spec).panel;
}

// Expected complete-data statistics of a single activity under the model law
// itself: measurement residuals are the measurement noise, state-noise
// quadratics are the state noise, and the activity second moments follow the
// variance recursion from the initial condition.
VectorXd analytic_sim_stats(double se2, double sa2, double sd2, double rho, int P, int T,
                            double v1) {
  VectorXd q = VectorXd::Zero(simstat::kDim);
  q(simstat::kCp) = 1.0;
  q(simstat::kObsSse) = se2 * P * T;
  q(simstat::kObsN) = P * T;
  const int M = 2 * P;
  q(simstat::kSegQuad) = sa2 * M * (T - 1);
  q(simstat::kSegN) = M * (T - 1);
  double v = v1;
  for (int t = 1; t <= T - 1; ++t) {
    q(simstat::kS00) += P * v;
    q(simstat::kS01) += P * rho * v;
    const double v_next = rho * rho * v + sd2;
    q(simstat::kS11) += P * v_next;
    v = v_next;
  }
  q(simstat::kActN) = P * (T - 1);
  return q;
}

TEST(Maximize, AnalyticStatsAreAFixedPoint) {
  const auto q = analytic_sim_stats(1.0, 0.05, 5.0, 0.8, 2, 30, ModelSpec::kDiffuseVariance);
  const Theta th = maximize(Family::Sim, q);
  EXPECT_NEAR(th.sigma_eps2(), 1.0, 1e-10);
  EXPECT_NEAR(th.sigma_alpha2(), 0.05, 1e-10);
  EXPECT_NEAR(th.sigma_d2(), 5.0, 1e-9);
  EXPECT_NEAR(th.rho(), 0.8, 1e-12);
}

TEST(Maximize, ScaleEquivariantInVarianceComponents) {
  const double c2 = 9.0;  // data scaled by c = 3
  const auto q = analytic_sim_stats(c2 * 1.0, c2 * 0.05, c2 * 5.0, 0.8, 2, 30, 100.0);
  const Theta th = maximize(Family::Sim, q);
  EXPECT_NEAR(th.sigma_eps2(), 9.0, 1e-9);
  EXPECT_NEAR(th.sigma_d2(), 45.0, 1e-8);
  EXPECT_NEAR(th.rho(), 0.8, 1e-12);
}

TEST(Maximize, ZeroCrossMomentGivesZeroAr) {
  auto q = analytic_sim_stats(1.0, 0.05, 5.0, 0.8, 2, 20, 10.0);
  q(simstat::kS01) = 0.0;
  EXPECT_EQ(maximize(Family::Sim, q).rho(), 0.0);
}

TEST(Maximize, SingularBlocksRejected) {
  VectorXd q = VectorXd::Zero(simstat::kDim);
  EXPECT_THROW(maximize(Family::Sim, q), std::runtime_error);
  EXPECT_THROW(maximize(Family::Custom, VectorXd::Zero(4)), std::invalid_argument);
}

TEST(Maximize, WarmupAnalyticFixedPoint) {
  MatrixXd sigma(2, 2), delta(2, 2), psi(3, 3);
  sigma << 1.5, 0.3, 0.3, 0.8;
  delta << 2.0, -0.4, -0.4, 1.2;
  psi << 0.4, 0.1, 0.0, 0.1, 0.3, 0.05, 0.0, 0.05, 0.6;
  const double rho_sp = 0.55;
  const Theta truth = Theta::warmup(sigma, psi, delta, rho_sp);
  const int T = 25;

  VectorXd q = VectorXd::Zero(wustat::kDim);
  q(wustat::kCp) = 1.0;
  detail::vech_add(sigma * T, +1.0, q, wustat::kObsSse);
  q(wustat::kObsN) = T;
  detail::vech_add(psi * (T - 1), +1.0, q, wustat::kPsi);
  q(wustat::kPsiN) = T - 1;
  MatrixXd t_a = MatrixXd::Identity(2, 2);
  t_a(1, 1) = rho_sp;
  MatrixXd v = 10.0 * MatrixXd::Identity(2, 2);
  for (int t = 1; t <= T - 1; ++t) {
    detail::vech_add(v, +1.0, q, wustat::kC00);
    detail::full_add(t_a * v, +1.0, q, wustat::kC10);
    const MatrixXd v_next = t_a * v * t_a.transpose() + delta;
    detail::vech_add(v_next, +1.0, q, wustat::kC11);
    v = v_next;
  }
  q(wustat::kActN) = T - 1;

  const Theta th = maximize(Family::Warmup, q, &truth);
  EXPECT_LT((th.Sigma - sigma).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((th.Psi - psi).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((th.Delta - delta).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(th.rho_sp(), rho_sp, 1e-9);

  // A cold coordinate ascent reaches the same optimum.
  const Theta cold = maximize(Family::Warmup, q, nullptr);
  EXPECT_NEAR(cold.rho_sp(), rho_sp, 1e-6);
  EXPECT_LT((cold.Delta - delta).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Contribution, ChangepointBranchIsSingleActivityStats) {
  const auto b = sim_bound();
  const auto panel = small_panel(3, 8, 1, 5);
  const VectorXd iota = individual_contribution(b, panel, 2, 1);
  EXPECT_EQ(iota(simstat::kCp), 1.0);
  EXPECT_EQ(iota(simstat::kCont), 0.0);
  VectorXd direct = VectorXd::Zero(simstat::kDim);
  const auto inst = assemble(b, 1);
  const auto obs = stacked_series(panel, 2, 2, 8);
  accumulate_segment_stats(b, panel, 2, 2, smooth(inst, obs), +1.0, direct);
  EXPECT_LT((iota.tail(simstat::kDim - 2) - direct.tail(simstat::kDim - 2)).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_EQ(iota(simstat::kObsN), 16.0);  // T*P fresh cells
}

TEST(Contribution, IncrementsTelescopeToSegmentStats) {
  const auto b = sim_bound();
  const auto panel = small_panel(5, 6, 0, 9);
  // One segment 1..4: delays 1,2,3,4.
  VectorXd acc = VectorXd::Zero(simstat::kDim);
  for (int n = 1; n <= 4; ++n) acc += individual_contribution(b, panel, n, n);
  VectorXd direct = VectorXd::Zero(simstat::kDim);
  const auto inst = assemble(b, 4);
  const auto obs = stacked_series(panel, 1, 4, 6);
  accumulate_segment_stats(b, panel, 1, 4, smooth(inst, obs), +1.0, direct);
  direct(simstat::kCp) += 1.0;
  direct(simstat::kCont) += 3.0;
  EXPECT_LT((acc - direct).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Contribution, DecoupledModelIsDelayInvariant) {
  auto b = sim_bound();
  b.Z_S.setZero();
  const auto panel = small_panel(5, 6, 0, 13);
  const VectorXd i2 = individual_contribution(b, panel, 4, 2);
  const VectorXd i3 = individual_contribution(b, panel, 4, 3);
  const VectorXd i4 = individual_contribution(b, panel, 4, 4);
  EXPECT_LT((i2 - i3).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((i3 - i4).cwiseAbs().maxCoeff(), 1e-8);
  // The data-dependent components match the changepoint branch too.
  const VectorXd i1 = individual_contribution(b, panel, 4, 1);
  for (int k : {simstat::kObsSse, simstat::kObsN, simstat::kS00, simstat::kS01, simstat::kS11,
                simstat::kActN})
    EXPECT_NEAR(i1(k), i2(k), 1e-8) << "component " << k;
}

TEST(UpdateSuffstats, FullStepForgetsHistory) {
  std::map<int, VectorXd> prev{{1, VectorXd::Constant(3, 100.0)}};
  std::map<int, VectorXd> incr{{2, VectorXd::Constant(3, 7.0)}};
  const auto out = update_suffstats(prev, incr, 1.0, [](int) {
    return std::map<int, double>{{1, 1.0}};
  });
  EXPECT_EQ(out.at(2), VectorXd::Constant(3, 7.0));
}

TEST(UpdateSuffstats, PointMassKernelDoesNotMix) {
  std::map<int, VectorXd> prev{{2, VectorXd::Constant(2, 10.0)}, {5, VectorXd::Constant(2, -4.0)}};
  std::map<int, VectorXd> incr{{3, VectorXd::Constant(2, 1.0)}};
  const auto out = update_suffstats(prev, incr, 0.25, [](int d) {
    return std::map<int, double>{{d - 1, 1.0}};
  });
  EXPECT_LT((out.at(3) - (0.75 * VectorXd::Constant(2, 10.0) + 0.25 * VectorXd::Constant(2, 1.0)))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(UpdateSuffstats, AffineInStatistics) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> norm(0.0, 1.0);
  auto rand_vec = [&] {
    VectorXd v(4);
    for (int i = 0; i < 4; ++i) v(i) = norm(rng);
    return v;
  };
  std::map<int, VectorXd> prev{{1, rand_vec()}, {2, rand_vec()}};
  std::map<int, VectorXd> incr{{1, rand_vec()}, {3, rand_vec()}};
  const auto backward = [](int d) {
    if (d > 1) return std::map<int, double>{{d - 1, 1.0}};
    return std::map<int, double>{{1, 0.3}, {2, 0.7}};
  };
  const double c = 13.7;
  auto scaled_prev = prev;
  auto scaled_incr = incr;
  for (auto& [d, v] : scaled_prev) v *= c;
  for (auto& [d, v] : scaled_incr) v *= c;
  const auto base = update_suffstats(prev, incr, 0.4, backward);
  const auto scaled = update_suffstats(scaled_prev, scaled_incr, 0.4, backward);
  for (const auto& [d, v] : base)
    EXPECT_LT((scaled.at(d) - c * v).cwiseAbs().maxCoeff(), 1e-12 * c);
}

TEST(UpdateSuffstats, ScalarForgettingMatchesDirectRecursion) {
  // Deterministic chain (no changepoints): the recursion collapses to
  // exponential forgetting of the per-activity statistic.
  GammaSchedule gamma{0.7, 1.0};
  std::map<int, VectorXd> stats{{1, VectorXd::Constant(1, 2.0)}};
  double direct = 2.0;
  for (int n = 2; n <= 12; ++n) {
    const double iota = std::sin(static_cast<double>(n));
    std::map<int, VectorXd> incr{{n, VectorXd::Constant(1, iota)}};
    stats = update_suffstats(stats, incr, gamma(n), [](int d) {
      return std::map<int, double>{{d - 1, 1.0}};
    });
    direct = (1.0 - gamma(n)) * direct + gamma(n) * iota;
    EXPECT_NEAR(stats.at(n)(0), direct, 1e-10);
  }
}

TEST(AggregateQ, WeightedAverage) {
  std::map<int, VectorXd> stats{{1, VectorXd::Constant(2, 4.0)}, {3, VectorXd::Constant(2, 8.0)}};
  EXPECT_EQ(aggregate_Q(stats, {{1, 1.0}}), VectorXd::Constant(2, 4.0));
  const VectorXd mean = aggregate_Q(stats, {{1, 0.5}, {3, 0.5}});
  EXPECT_LT((mean - VectorXd::Constant(2, 6.0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gamma, ScheduleConditions) {
  GammaSchedule g{0.7, 1.0};
  g.validate();
  EXPECT_THROW((GammaSchedule{0.5, 1.0}).validate(), std::invalid_argument);
  EXPECT_THROW((GammaSchedule{0.7, 0.5}).validate(), std::invalid_argument);
  double sum = 0.0;
  for (long n = 1; n <= 1000000; ++n) {
    const double v = g(n);
    if (n < 100) EXPECT_LT(v, 1.0);
    sum += v;
  }
  EXPECT_GT(sum, 100.0);                    // divergent partial sums
  EXPECT_LT(g(100000) * g(100000), 1e-6);   // squared terms vanish in the tail
}

// Draws a panel from the heart-rate/speed model under a known segmentation.
ActivityPanel warmup_panel(int N, int T, const SegmentIndex& truth, const Theta& theta,
                           std::uint64_t seed) {
  const auto spec = ModelSpec::warmup(0.5);
  const auto b = bind_design(spec, theta);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> norm(0.0, 1.0);
  auto draw = [&](const MatrixXd& cov) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    VectorXd z(cov.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = norm(rng);
    return VectorXd(es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * z);
  };
  ActivityPanel panel(N, T, 2);
  for (const auto& seg : truth.segments()) {
    std::vector<VectorXd> seg_state(static_cast<std::size_t>(T));
    VectorXd s = b.a1_S + draw(b.P1_S);
    for (int t = 1; t <= T; ++t) {
      seg_state[static_cast<std::size_t>(t - 1)] = s;
      s = b.T_S * s + draw(b.Psi);
    }
    for (int n = seg.first; n <= seg.last; ++n) {
      VectorXd a = b.a1_A + draw(b.P1_A);
      for (int t = 1; t <= T; ++t) {
        const VectorXd y = b.Z_S * seg_state[static_cast<std::size_t>(t - 1)] + b.Z_A * a + draw(b.Sigma);
        panel.set(n, t, 1, y(0));
        panel.set(n, t, 2, y(1));
        a = b.T_A * a + draw(b.Delta);
      }
    }
  }
  return panel;
}

TEST(BatchEm, WarmupFamilyLoglikMonotone) {
  MatrixXd sigma(2, 2), delta(2, 2), psi(3, 3);
  sigma << 2.0, 0.3, 0.3, 0.5;
  delta << 1.5, -0.2, -0.2, 0.9;
  psi << 0.3, 0.0, 0.0, 0.0, 0.02, 0.0, 0.0, 0.0, 0.2;
  const Theta truth = Theta::warmup(sigma, psi, delta, 0.6);
  const auto seg = SegmentIndex::from_changepoints({1, 4}, 6);
  const auto panel = warmup_panel(6, 12, seg, truth, 71);

  const Theta init = Theta::warmup(MatrixXd::Identity(2, 2), 0.1 * MatrixXd::Identity(3, 3),
                                   MatrixXd::Identity(2, 2), 0.2);
  const auto res = batch_em(ModelSpec::warmup(0.5), init, panel, 8);
  for (std::size_t i = 1; i < res.logliks.size(); ++i)
    EXPECT_GE(res.logliks[i] - res.logliks[i - 1], -1e-9) << "iteration " << i;
  res.thetas.back().validate();
}

TEST(OnlineEm, WarmupFamilyRunsAndStaysValid) {
  MatrixXd sigma(2, 2), delta(2, 2), psi(3, 3);
  sigma << 2.0, 0.3, 0.3, 0.5;
  delta << 1.5, -0.2, -0.2, 0.9;
  psi << 0.3, 0.0, 0.0, 0.0, 0.02, 0.0, 0.0, 0.0, 0.2;
  const Theta truth = Theta::warmup(sigma, psi, delta, 0.6);
  const auto seg = SegmentIndex::from_changepoints({1, 5, 9}, 12);
  const auto panel = warmup_panel(12, 10, seg, truth, 73);

  OnlineEmOptions opts;
  opts.smc.B = 50;
  opts.n_min = 4;
  OnlineEmEngine engine(ModelSpec::warmup(0.5),
                        Theta::warmup(MatrixXd::Identity(2, 2), 0.1 * MatrixXd::Identity(3, 3),
                                      MatrixXd::Identity(2, 2), 0.2),
                        opts, 13);
  engine.run_pass(panel);
  engine.theta().validate();
  EXPECT_EQ(engine.trace().entries.size(), 12u);
}

TEST(BatchEm, LoglikMonotoneOnSmallPanel) {
  const auto panel = small_panel(6, 12, 2, 29);
  const auto spec = ModelSpec::sim(2, 0.5);
  const Theta init = Theta::sim(2.0, 0.1, 2.0, 0.4);
  const auto res = batch_em(spec, init, panel, 6);
  ASSERT_EQ(res.logliks.size(), 7u);
  for (std::size_t i = 1; i < res.logliks.size(); ++i)
    EXPECT_GE(res.logliks[i] - res.logliks[i - 1], -1e-9) << "iteration " << i;
}

TEST(OnlineEm, BurnInFreezesEstimates) {
  const auto panel = small_panel(6, 10, 1, 31);
  OnlineEmOptions opts;
  opts.smc.B = 50;
  opts.n_min = 10;  // longer than the panel
  const Theta init = Theta::sim(1.5, 0.1, 3.0, 0.5);
  OnlineEmEngine engine(ModelSpec::sim(2, 0.5), init, opts, 7);
  engine.run_pass(panel);
  ASSERT_EQ(engine.trace().entries.size(), 6u);
  for (const auto& e : engine.trace().entries)
    EXPECT_EQ(e.theta.params, init.params);
}

TEST(OnlineEm, LambdaNeverTouched) {
  const auto panel = small_panel(8, 10, 2, 37);
  OnlineEmOptions opts;
  opts.smc.B = 50;
  opts.n_min = 2;
  OnlineEmEngine engine(ModelSpec::sim(2, 0.5), Theta::sim(1.5, 0.1, 3.0, 0.5), opts, 7);
  engine.run_pass(panel);
  EXPECT_EQ(engine.bound().lambda, 0.5);
  // Estimates did move after burn-in.
  EXPECT_NE(engine.trace().entries.back().theta.params, engine.trace().entries.front().theta.params);
}

TEST(OnlineEm, MultiPassTraceShape) {
  const auto panel = small_panel(5, 8, 1, 41);
  OnlineEmOptions opts;
  opts.smc.B = 30;
  opts.n_min = 3;
  opts.passes = 3;
  OnlineEmEngine engine(ModelSpec::sim(2, 0.5), Theta::sim(1.5, 0.1, 3.0, 0.5), opts, 11);
  for (int p = 0; p < opts.passes; ++p) engine.run_pass(panel);
  EXPECT_EQ(engine.trace().entries.size(), 15u);
  EXPECT_EQ(engine.trace().entries.back().pass, 3);
}

// With changepoints ruled out by the prior, online EM over one long segment
// behaves like batch EM on the same data: each pass with gamma_n = 1/n lands
// within a few percent of the corresponding batch iterate, so the two share
// their fixed points. (Comparing against a fully converged batch run is not
// feasible at test scale: EM itself contracts slowly in this weakly
// identified regime.)
TEST(OnlineEm, SingleSegmentTracksBatchIterates) {
  SimSpec spec;
  spec.N = 100;
  spec.T = 40;
  spec.P = 1;
  spec.S = 0;
  spec.theta = Theta::sim(1.0, 0.05, 5.0, 0.8, 1);
  spec.seed = 101;
  const auto sc = generate(spec);
  const double lambda = 1e-9;
  const Theta init = Theta::sim(1.5, 0.03, 3.5, 0.65, 1);
  const int k_max = 3;

  const auto truth_seg = SegmentIndex::from_changepoints({1}, spec.N);
  const auto batch = batch_em(ModelSpec::sim(1, lambda), init, sc.panel, k_max, &truth_seg);

  OnlineEmOptions opts;
  opts.smc.B = 20;
  opts.gamma = GammaSchedule{1.0, 1.0};
  opts.n_min = 10;
  OnlineEmEngine engine(ModelSpec::sim(1, lambda), init, opts, 51);
  for (int k = 1; k <= k_max; ++k) {
    engine.run_pass(sc.panel);
    const Theta& b = batch.thetas[static_cast<std::size_t>(k)];
    const Theta& o = engine.theta();
    EXPECT_NEAR(o.sigma_eps2(), b.sigma_eps2(), 0.05 * b.sigma_eps2()) << "pass " << k;
    EXPECT_NEAR(o.sigma_alpha2(), b.sigma_alpha2(), 0.05 * b.sigma_alpha2()) << "pass " << k;
    EXPECT_NEAR(o.sigma_d2(), b.sigma_d2(), 0.05 * b.sigma_d2()) << "pass " << k;
    EXPECT_NEAR(o.rho(), b.rho(), 0.05 * std::abs(b.rho())) << "pass " << k;
  }
}

}  // namespace
