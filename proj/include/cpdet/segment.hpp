#pragma once

// Stacked segment state space models and changepoint potentials.
//
// A segment of m activities shares one segment-level state; stacking the
// activities yields one model with obs_dim = m*P and state_dim = M + m*K:
// the loading repeats Z_S in the first column block and places Z_A on the
// block diagonal, the transition is blockdiag(T_S, T_A, ..., T_A), the
// measurement noise is I_m (x) Sigma and the state noise
// blockdiag(Psi, I_m (x) Delta).
//
// The potential of activity n at delay d is the ratio of segment marginal
// likelihoods p(y_{j:n}) / p(y_{j:n-1}) with j = n-d+1 (the plain marginal
// when d = 1); a (j, last) keyed cache makes the ratio O(1) in re-use.

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cpdet/kalman.hpp"
#include "cpdet/model.hpp"
#include "cpdet/numutil.hpp"

namespace cpdet {

// Builds the stacked instance for a segment of m activities.
inline StateSpaceInstance assemble(const BoundModel& b, int m, int max_state_dim = 0) {
  if (m < 1) throw std::invalid_argument("assemble: segment length must be >= 1");
  const int sd = b.M + m * b.K;
  if (max_state_dim > 0 && sd > max_state_dim)
    throw std::invalid_argument("assemble: stacked state dimension exceeds configured maximum");

  StateSpaceInstance inst;
  inst.obs_dim = m * b.P;
  inst.state_dim = sd;

  inst.Z = MatrixXd::Zero(inst.obs_dim, sd);
  inst.Tmat = MatrixXd::Zero(sd, sd);
  inst.H = kron(MatrixXd::Identity(m, m), b.Sigma);
  inst.Q = MatrixXd::Zero(sd, sd);
  inst.a1 = VectorXd::Zero(sd);
  inst.P1 = MatrixXd::Zero(sd, sd);

  inst.Tmat.topLeftCorner(b.M, b.M) = b.T_S;
  inst.Q.topLeftCorner(b.M, b.M) = b.Psi;
  inst.P1.topLeftCorner(b.M, b.M) = b.P1_S;
  inst.a1.head(b.M) = b.a1_S;
  inst.t_block_sizes.push_back(b.M);

  for (int i = 0; i < m; ++i) {
    const int r = i * b.P;
    const int c = b.M + i * b.K;
    inst.Z.block(r, 0, b.P, b.M) = b.Z_S;
    inst.Z.block(r, c, b.P, b.K) = b.Z_A;
    inst.Tmat.block(c, c, b.K, b.K) = b.T_A;
    inst.Q.block(c, c, b.K, b.K) = b.Delta;
    inst.P1.block(c, c, b.K, b.K) = b.P1_A;
    inst.a1.segment(c, b.K) = b.a1_A;
    inst.t_block_sizes.push_back(b.K);
  }
  return inst;
}

// Stacked observation vector for activities j..n at time t.
inline PartialObs stacked_obs(const ActivityPanel& panel, int j, int n, int t) {
  const int m = n - j + 1;
  const int P = panel.P();
  PartialObs o;
  o.value.resize(m * P);
  o.mask.resize(static_cast<std::size_t>(m * P));
  for (int i = 0; i < m; ++i) {
    PartialObs a = panel.obs(j + i, t);
    o.value.segment(i * P, P) = a.value;
    for (int p = 0; p < P; ++p) o.mask[static_cast<std::size_t>(i * P + p)] = a.mask[static_cast<std::size_t>(p)];
  }
  return o;
}

inline std::vector<PartialObs> stacked_series(const ActivityPanel& panel, int j, int n, int upto_t) {
  std::vector<PartialObs> obs;
  obs.reserve(static_cast<std::size_t>(upto_t));
  for (int t = 1; t <= upto_t; ++t) obs.push_back(stacked_obs(panel, j, n, t));
  return obs;
}

// Cache of full-horizon segment log-marginals keyed by (first, last) activity.
// Reads may run concurrently with no writer; the engine serializes writes per
// activity-completion event.
class PotentialCache {
 public:
  [[nodiscard]] std::optional<double> get(int j, int n) const {
    auto it = map_.find({j, n});
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(int j, int n, double logmarg) { map_[{j, n}] = logmarg; }
  void clear() { map_.clear(); }

  // Drops entries that can no longer serve as potential denominators: those
  // ending before `min_last` or starting before `min_first`.
  void trim(int min_first, int min_last) {
    for (auto it = map_.begin(); it != map_.end();) {
      if (it->first.second < min_last || it->first.first < min_first)
        it = map_.erase(it);
      else
        ++it;
    }
  }

  [[nodiscard]] std::size_t size() const { return map_.size(); }

 private:
  std::map<std::pair<int, int>, double> map_;
};

// log p(y_{j:n,1:upto_t} | activities j..n share one segment).
// Only full-horizon (upto_t == panel.T()) values are cached.
inline double segment_logmarginal(const BoundModel& b, const ActivityPanel& panel, int j, int n,
                                  int upto_t, PotentialCache* cache = nullptr) {
  if (j < 1 || n > panel.N() || j > n) throw std::invalid_argument("segment_logmarginal: invalid activity range");
  if (upto_t < 1 || upto_t > panel.T()) throw std::invalid_argument("segment_logmarginal: invalid time horizon");
  const bool cacheable = cache != nullptr && upto_t == panel.T();
  if (cacheable) {
    if (auto hit = cache->get(j, n)) return *hit;
  }
  const StateSpaceInstance inst = assemble(b, n - j + 1);
  const auto obs = stacked_series(panel, j, n, upto_t);
  const double ll = filter_loglik(inst, obs);
  if (cacheable) cache->put(j, n, ll);
  return ll;
}

inline double segment_logmarginal(const BoundModel& b, const ActivityPanel& panel, int j, int n,
                                  PotentialCache* cache = nullptr) {
  return segment_logmarginal(b, panel, j, n, panel.T(), cache);
}

// Log-potential of activity n at delay d: the multiplicative contribution of
// activity n to the conditional likelihood given the segmentation.
inline double log_potential(const BoundModel& b, const ActivityPanel& panel, int n, int d,
                            PotentialCache* cache = nullptr) {
  if (d < 1 || d > n) throw std::invalid_argument("log_potential: delay out of range");
  const int j = n - d + 1;
  const double num = segment_logmarginal(b, panel, j, n, cache);
  if (d == 1) return num;
  const double den = segment_logmarginal(b, panel, j, n - 1, cache);
  return num - den;
}

}  // namespace cpdet
