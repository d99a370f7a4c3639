#pragma once

// Sequential Monte Carlo approximation of the predicted and filtered delay
// distributions, the backward kernel used by the online EM, and an
// exact-enumeration oracle for small panels.
//
// The delay chain moves from d to 1 (changepoint, probability lambda) or to
// d+1 (continuation). A particle cloud approximating the predicted
// distribution p(D_{n-1} | y_{1:n-2}) is advanced by building the augmented
// support {(1, d), (d+1, d)} over the current particles, weighting each pair
// by transition x potential x particle mass, and resampling B particles.
// All weights are maintained in the log domain with max-subtraction.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <vector>

#include "cpdet/model.hpp"
#include "cpdet/numutil.hpp"
#include "cpdet/segment.hpp"

namespace cpdet {

struct DelayParticle {
  int d = 1;
  double log_weight = 0.0;
  // log p(y_{j:n-1,1:T}) for this particle's segment (j = n-d+1); 0 when the
  // range is empty. Valid for the parameter the potentials were computed
  // under; the engine clears caches when the parameter moves.
  double cached_logmarg = 0.0;
};

struct ParticleSet {
  int n = 1;  // activity index this set predicts
  int B = 0;
  std::vector<DelayParticle> particles;

  // Total normalized mass per unique delay, ascending in delay.
  [[nodiscard]] std::map<int, double> support_weights() const {
    std::map<int, double> w;
    for (const auto& p : particles) w[p.d] += std::exp(p.log_weight);
    return w;
  }
  [[nodiscard]] std::map<int, double> support_logmargs() const {
    std::map<int, double> lm;
    for (const auto& p : particles) lm[p.d] = p.cached_logmarg;
    return lm;
  }
};

struct SmcOptions {
  int B = 1000;
  bool systematic = false;  // default multinomial resampling
  int d_max = 0;            // 0 = unbounded; otherwise caps the continuation branch
};

inline ParticleSet init_particles(int B) {
  if (B < 1) throw std::invalid_argument("init_particles: B must be >= 1");
  ParticleSet ps;
  ps.n = 1;
  ps.B = B;
  ps.particles.assign(static_cast<std::size_t>(B),
                      DelayParticle{1, -std::log(static_cast<double>(B)), 0.0});
  return ps;
}

namespace detail {

inline std::vector<std::size_t> resample_indices(const std::vector<double>& probs, int B,
                                                 std::mt19937_64& rng, bool systematic) {
  std::vector<double> cdf(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    cdf[i] = acc;
  }
  cdf.back() = 1.0;
  std::vector<std::size_t> idx(static_cast<std::size_t>(B));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (systematic) {
    const double u0 = unif(rng);
    for (int b = 0; b < B; ++b) {
      const double u = (static_cast<double>(b) + u0) / static_cast<double>(B);
      idx[static_cast<std::size_t>(b)] = static_cast<std::size_t>(
          std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    }
  } else {
    for (int b = 0; b < B; ++b) {
      const double u = unif(rng);
      idx[static_cast<std::size_t>(b)] = static_cast<std::size_t>(
          std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    }
  }
  return idx;
}

}  // namespace detail

// Advances the particle approximation from p(D_{n-1} | y_{1:n-2}) to
// p(D_n | y_{1:n-1}). Requires activity n-1 fully recorded (its potentials
// enter the augmented-support weights).
inline ParticleSet predict_and_resample(const ParticleSet& prev, const BoundModel& b,
                                        const ActivityPanel& panel, PotentialCache* cache,
                                        std::mt19937_64& rng, const SmcOptions& opts = {}) {
  const int n = prev.n + 1;
  if (n > panel.N() + 1) throw std::invalid_argument("predict_and_resample: past the end of the panel");
  const double log_lambda = std::log(b.lambda);
  const double log_cont = std::log1p(-b.lambda);

  const auto weights = prev.support_weights();

  struct Candidate {
    int d_new, d_parent;
    double parent_logmarg;  // log p(y_{j:n-1}) for the new particle's segment
  };
  std::vector<Candidate> cand;
  std::vector<double> logw;
  for (const auto& [d, w] : weights) {
    const double log_g = log_potential(b, panel, n - 1, d, cache);
    const double base = std::log(w) + log_g;
    const bool capped = opts.d_max > 0 && d + 1 > opts.d_max;
    // Changepoint branch; takes the continuation mass too when the cap bites.
    cand.push_back({1, d, 0.0});
    logw.push_back(base + (capped ? 0.0 : log_lambda));
    if (!capped) {
      // Continuation branch: the new segment start is j = n-1-d+1, so the
      // denominator marginal is exactly the numerator used in log_g above.
      const int j = n - 1 - d + 1;
      double num_logmarg;
      if (cache != nullptr) {
        num_logmarg = *cache->get(j, n - 1);
      } else {
        num_logmarg = segment_logmarginal(b, panel, j, n - 1, nullptr);
      }
      cand.push_back({d + 1, d, num_logmarg});
      logw.push_back(base + log_cont);
    }
  }

  std::vector<double> probs = logw;
  normalize_log_weights(probs);

  const auto idx = detail::resample_indices(probs, prev.B, rng, opts.systematic);
  ParticleSet out;
  out.n = n;
  out.B = prev.B;
  out.particles.reserve(static_cast<std::size_t>(prev.B));
  const double lw = -std::log(static_cast<double>(prev.B));
  for (auto i : idx)
    out.particles.push_back(DelayParticle{cand[i].d_new, lw, cand[i].parent_logmarg});
  return out;
}

// Reweights the predicted particles by the potentials of the (now complete)
// activity n. Returns the filtered probabilities over the unique support.
inline std::map<int, double> filtered_posterior(const ParticleSet& ps, const BoundModel& b,
                                                const ActivityPanel& panel,
                                                PotentialCache* cache = nullptr) {
  const auto weights = ps.support_weights();
  std::vector<int> ds;
  std::vector<double> logw;
  for (const auto& [d, w] : weights) {
    ds.push_back(d);
    logw.push_back(std::log(w) + log_potential(b, panel, ps.n, d, cache));
  }
  normalize_log_weights(logw);
  std::map<int, double> post;
  for (std::size_t i = 0; i < ds.size(); ++i) post[ds[i]] = logw[i];
  return post;
}

// Conditional distribution of the previous delay given D_n and the data up to
// activity n-1. Deterministic decrement for d_n > 1; a potential-weighted
// reweighting of the previous support for d_n = 1.
inline std::map<int, double> backward_kernel(const ParticleSet& prev, int d_n, const BoundModel& b,
                                             const ActivityPanel& panel,
                                             PotentialCache* cache = nullptr) {
  const auto weights = prev.support_weights();
  if (d_n > 1) {
    if (weights.find(d_n - 1) == weights.end())
      throw std::runtime_error("backward_kernel: no compatible predecessor in the particle support");
    return {{d_n - 1, 1.0}};
  }
  std::vector<int> ds;
  std::vector<double> logw;
  for (const auto& [d, w] : weights) {
    ds.push_back(d);
    logw.push_back(std::log(w) + std::log(b.lambda) + log_potential(b, panel, prev.n, d, cache));
  }
  normalize_log_weights(logw);
  std::map<int, double> kernel;
  for (std::size_t i = 0; i < ds.size(); ++i) kernel[ds[i]] = logw[i];
  return kernel;
}

// Exact predicted/filtered delay tables by dynamic programming; complexity
// grows with n, so the support is guarded to small panels.
struct ExactDelayPosterior {
  // predicted[n-1][d-1] = p(D_n = d | y_{1:n-1}); filtered likewise given y_{1:n}.
  std::vector<std::vector<double>> predicted;
  std::vector<std::vector<double>> filtered;
  double log_marginal = 0.0;  // log p(y_{1:N,1:T})
};

inline constexpr int kExactEnumerationMaxN = 14;

inline ExactDelayPosterior exact_enumeration(const BoundModel& b, const ActivityPanel& panel,
                                             PotentialCache* cache = nullptr) {
  const int N = panel.N();
  if (N > kExactEnumerationMaxN)
    throw std::invalid_argument("exact_enumeration: N exceeds the small-panel guard");
  PotentialCache local;
  if (cache == nullptr) cache = &local;

  ExactDelayPosterior out;
  std::vector<double> filt_prev;
  for (int n = 1; n <= N; ++n) {
    std::vector<double> pred(static_cast<std::size_t>(n), 0.0);
    if (n == 1) {
      pred[0] = 1.0;
    } else {
      pred[0] = b.lambda;
      for (int d = 2; d <= n; ++d)
        pred[static_cast<std::size_t>(d - 1)] = (1.0 - b.lambda) * filt_prev[static_cast<std::size_t>(d - 2)];
    }
    std::vector<double> logpost(static_cast<std::size_t>(n));
    for (int d = 1; d <= n; ++d) {
      const double lp = pred[static_cast<std::size_t>(d - 1)] > 0.0
                            ? std::log(pred[static_cast<std::size_t>(d - 1)])
                            : kNegInf;
      logpost[static_cast<std::size_t>(d - 1)] = lp + log_potential(b, panel, n, d, cache);
    }
    out.log_marginal += log_sum_exp(logpost);
    normalize_log_weights(logpost);
    out.predicted.push_back(pred);
    out.filtered.push_back(logpost);
    filt_prev = std::move(logpost);
  }
  return out;
}

// One pass of the between-online changepoint filter under a fixed parameter.
// `on_activity` (optional) receives the predicted particle set and the
// filtered posterior as each activity completes.
struct BetweenOnlineResult {
  std::vector<std::map<int, double>> filtered;  // index n-1
  std::vector<double> p_changepoint;            // filtered mass at d = 1
};

inline BetweenOnlineResult run_between_online(
    const BoundModel& b, const ActivityPanel& panel, const SmcOptions& opts, std::uint64_t seed,
    const std::function<void(int, const ParticleSet&, const std::map<int, double>&)>& on_activity =
        nullptr) {
  std::mt19937_64 rng(seed);
  PotentialCache cache;
  BetweenOnlineResult out;
  ParticleSet ps = init_particles(opts.B);
  for (int n = 1; n <= panel.N(); ++n) {
    if (n > 1) ps = predict_and_resample(ps, b, panel, &cache, rng, opts);
    auto filt = filtered_posterior(ps, b, panel, &cache);
    const auto it = filt.find(1);
    out.p_changepoint.push_back(it == filt.end() ? 0.0 : it->second);
    if (on_activity) on_activity(n, ps, filt);
    out.filtered.push_back(std::move(filt));
    cache.trim(1, n - 1);
  }
  return out;
}

}  // namespace cpdet
