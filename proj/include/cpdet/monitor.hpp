#pragma once

// Within-online monitoring: the probability that the activity currently being
// recorded is a changepoint, updated at every time step.
//
// For each unique delay d in the predicted support, a pair of stacked Kalman
// filters runs in competition: a "with-activity" filter over activities
// j..n consuming the streamed rows of activity n plus the historical rows,
// and a "without-activity" filter over the same stacked model with activity
// n's rows flagged missing. Their likelihood ratio, truncated to a lookahead
// of k = min(T-t, kstar) historical time points beyond t, is combined with
// the predicted prior mass by Bayes' rule. The d = 1 branch is the
// single-activity model and needs no denominator.

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "cpdet/cpfilter.hpp"
#include "cpdet/kalman.hpp"
#include "cpdet/model.hpp"
#include "cpdet/numutil.hpp"
#include "cpdet/segment.hpp"

namespace cpdet {

class Monitor {
 public:
  // ps: predicted particle set for activity n; panel holds the fully observed
  // activities 1..n-1 (activity n's rows, if present, are not read).
  Monitor(const ParticleSet& ps, const BoundModel& b, const ActivityPanel& panel, int n, int kstar)
      : bound_(b), panel_(panel), n_(n), T_(panel.T()), kstar_(kstar) {
    if (ps.n != n) throw std::invalid_argument("Monitor: particle set is not for activity n");
    if (kstar < 0) throw std::invalid_argument("Monitor: kstar must be >= 0");
    const auto weights = ps.support_weights();
    if (weights.empty()) throw std::invalid_argument("Monitor: empty particle support");

    for (const auto& [d, w] : weights) {
      Branch br;
      br.d = d;
      br.log_prior = std::log(w);
      br.inst = assemble(b, d);
      branches_.push_back(std::move(br));
      posterior_[d] = w;  // before any evidence the posterior is the prior
    }
    // Bring the without-activity filters up to the initial lookahead horizon.
    for (auto& br : branches_) advance_without(br, std::min(kstar_, T_));
  }

  [[nodiscard]] int t() const { return t_; }
  [[nodiscard]] int n_filters() const { return static_cast<int>(branches_.size()); }
  [[nodiscard]] const std::map<int, double>& posterior() const { return posterior_; }

  [[nodiscard]] double p_changepoint() const {
    auto it = posterior_.find(1);
    return it == posterior_.end() ? 0.0 : it->second;
  }

  [[nodiscard]] bool alert(double delta) const { return p_changepoint() > delta; }

  // Streaming entry point with an explicit timestamp: observations must
  // arrive in time order, one per time point; late or duplicate timestamps
  // are rejected.
  const std::map<int, double>& step_at(int t, const PartialObs& y_nt) {
    if (t != t_ + 1)
      throw std::invalid_argument("Monitor: expected observation for t=" + std::to_string(t_ + 1) +
                                  ", got t=" + std::to_string(t));
    return step(y_nt);
  }

  // Consumes the observation of activity n at time t+1 (entries may be
  // missing) and returns the updated posterior over delays.
  const std::map<int, double>& step(const PartialObs& y_nt) {
    if (t_ >= T_) throw std::invalid_argument("Monitor: activity already fully observed");
    if (static_cast<int>(y_nt.mask.size()) != bound_.P)
      throw std::invalid_argument("Monitor: observation dimension mismatch");
    ++t_;
    const int k = std::min(T_ - t_, kstar_);

    std::vector<double> logpost(branches_.size());
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      Branch& br = branches_[i];
      br.with_loglik += advance(br.inst, br.with_state, with_slice(br, t_, &y_nt)).loglik_inc;
      double log_num = br.with_loglik;
      double log_den = 0.0;
      if (br.d > 1) {
        advance_without(br, t_ + k);
        log_den = br.without_loglik;
        if (k > 0) log_num += lookahead(br, k);
      }
      logpost[i] = br.log_prior + log_num - log_den;
    }
    normalize_log_weights(logpost);
    posterior_.clear();
    for (std::size_t i = 0; i < branches_.size(); ++i) posterior_[branches_[i].d] = logpost[i];
    return posterior_;
  }

 private:
  struct Branch {
    int d = 1;
    double log_prior = 0.0;
    StateSpaceInstance inst;
    KalmanState with_state;
    double with_loglik = 0.0;
    KalmanState without_state;
    double without_loglik = 0.0;
    int without_t = 0;
  };

  // Stacked slice at time tau for a branch. The current activity's row is
  // filled from `y` when given, and flagged missing otherwise.
  [[nodiscard]] PartialObs with_slice(const Branch& br, int tau, const PartialObs* y) const {
    const int P = bound_.P;
    if (br.d == 1) return y != nullptr ? *y : PartialObs::missing(P);
    const int j = n_ - br.d + 1;
    PartialObs o = stacked_obs(panel_, j, n_ - 1, tau);
    const int full = br.d * P;
    o.value.conservativeResize(full);
    o.mask.resize(static_cast<std::size_t>(full));
    for (int p = 0; p < P; ++p) {
      const auto idx = static_cast<std::size_t>((br.d - 1) * P + p);
      if (y != nullptr) {
        o.value((br.d - 1) * P + p) = y->value(p);
        o.mask[idx] = y->mask[static_cast<std::size_t>(p)];
      } else {
        o.value((br.d - 1) * P + p) = 0.0;
        o.mask[idx] = 0;
      }
    }
    return o;
  }

  void advance_without(Branch& br, int target_t) {
    if (br.d == 1) return;
    while (br.without_t < target_t) {
      ++br.without_t;
      br.without_loglik += advance(br.inst, br.without_state, with_slice(br, br.without_t, nullptr)).loglik_inc;
    }
  }

  // Likelihood of the historical rows at times t+1..t+k given the
  // with-activity information at t, computed on a throwaway copy.
  [[nodiscard]] double lookahead(const Branch& br, int k) const {
    KalmanState st = br.with_state;
    double ll = 0.0;
    for (int tau = t_ + 1; tau <= t_ + k; ++tau)
      ll += advance(br.inst, st, with_slice(br, tau, nullptr)).loglik_inc;
    return ll;
  }

  BoundModel bound_;
  const ActivityPanel& panel_;
  int n_;
  int T_;
  int kstar_;
  int t_ = 0;
  std::vector<Branch> branches_;
  std::map<int, double> posterior_;
};

}  // namespace cpdet
