#pragma once

// Linear-Gaussian state space recursions: filter, smoother and lag-one
// covariance smoother, with per-cell missing data support and the
// innovations-form log-likelihood.
//
// The model handled here is time-invariant:
//   y_t     = Z a_t + eps_t,    eps_t ~ N(0, H)
//   a_{t+1} = T a_t + eta_t,    eta_t ~ N(0, Q)
//   a_1     ~ N(a1, P1)
//
// Missing entries are handled by deleting the corresponding rows of Z and H
// at that time point. Covariance updates use the Joseph form and explicit
// re-symmetrization; innovation covariance solves use a Cholesky
// factorization with a hard pivot tolerance.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpdet/numutil.hpp"

namespace cpdet {

// Raised when an innovation covariance is numerically singular; signals a
// model or initialization pathology rather than something to regularize away.
class FilterSingularError : public std::runtime_error {
 public:
  explicit FilterSingularError(const std::string& what) : std::runtime_error(what) {}
};

constexpr double kCholPivotTol = 1e-10;

// One multivariate observation with per-entry missingness flags.
struct PartialObs {
  VectorXd value;                  // entries at missing positions are ignored
  std::vector<std::uint8_t> mask;  // 1 = observed, 0 = missing

  [[nodiscard]] int n_observed() const {
    int c = 0;
    for (auto m : mask) c += (m != 0);
    return c;
  }
  [[nodiscard]] bool fully_missing() const { return n_observed() == 0; }

  static PartialObs full(VectorXd y) {
    PartialObs o;
    o.mask.assign(static_cast<std::size_t>(y.size()), 1);
    o.value = std::move(y);
    return o;
  }
  static PartialObs missing(int dim) {
    return PartialObs{VectorXd::Zero(dim), std::vector<std::uint8_t>(static_cast<std::size_t>(dim), 0)};
  }
};

struct StateSpaceInstance {
  int obs_dim = 0;
  int state_dim = 0;
  MatrixXd Z;     // obs_dim x state_dim
  MatrixXd Tmat;  // state_dim x state_dim
  MatrixXd H;     // obs_dim x obs_dim
  MatrixXd Q;     // state_dim x state_dim
  VectorXd a1;
  MatrixXd P1;
  // When non-empty, Tmat is block-diagonal with these block sizes (in order);
  // the predict step exploits that in its matrix products.
  std::vector<int> t_block_sizes;

  void validate() const {
    if (Z.rows() != obs_dim || Z.cols() != state_dim || Tmat.rows() != state_dim ||
        Tmat.cols() != state_dim || H.rows() != obs_dim || H.cols() != obs_dim ||
        Q.rows() != state_dim || Q.cols() != state_dim || a1.size() != state_dim ||
        P1.rows() != state_dim || P1.cols() != state_dim)
      throw std::invalid_argument("StateSpaceInstance: inconsistent dimensions");
    if (!is_symmetric(H, 1e-9) || !is_symmetric(Q, 1e-9) || !is_symmetric(P1, 1e-9))
      throw std::invalid_argument("StateSpaceInstance: H, Q, P1 must be symmetric");
  }
};

namespace detail {

// M <- T * M for block-diagonal T.
inline MatrixXd blockdiag_left(const StateSpaceInstance& inst, const MatrixXd& m) {
  if (inst.t_block_sizes.empty()) return inst.Tmat * m;
  MatrixXd out(m.rows(), m.cols());
  int off = 0;
  for (int b : inst.t_block_sizes) {
    out.middleRows(off, b).noalias() = inst.Tmat.block(off, off, b, b) * m.middleRows(off, b);
    off += b;
  }
  return out;
}

// M <- M * T' for block-diagonal T.
inline MatrixXd blockdiag_right_t(const StateSpaceInstance& inst, const MatrixXd& m) {
  if (inst.t_block_sizes.empty()) return m * inst.Tmat.transpose();
  MatrixXd out(m.rows(), m.cols());
  int off = 0;
  for (int b : inst.t_block_sizes) {
    out.middleCols(off, b).noalias() = m.middleCols(off, b) * inst.Tmat.block(off, off, b, b).transpose();
    off += b;
  }
  return out;
}

inline VectorXd transition_apply(const StateSpaceInstance& inst, const VectorXd& v) {
  if (inst.t_block_sizes.empty()) return inst.Tmat * v;
  VectorXd out(v.size());
  int off = 0;
  for (int b : inst.t_block_sizes) {
    out.segment(off, b).noalias() = inst.Tmat.block(off, off, b, b) * v.segment(off, b);
    off += b;
  }
  return out;
}

inline std::vector<int> observed_indices(const PartialObs& obs) {
  std::vector<int> idx;
  idx.reserve(obs.mask.size());
  for (int i = 0; i < static_cast<int>(obs.mask.size()); ++i)
    if (obs.mask[static_cast<std::size_t>(i)]) idx.push_back(i);
  return idx;
}

}  // namespace detail

// Filtered state after consuming t observations. t == 0 means "before the
// first observation": the next advance uses (a1, P1) as the predicted moments.
struct KalmanState {
  VectorXd a;
  MatrixXd P;
  long t = 0;
};

struct StepResult {
  double loglik_inc = 0.0;
  VectorXd innovation;      // observed sub-dimension; empty if fully missing
  MatrixXd innovation_cov;  // ditto
  std::vector<int> observed;
};

// Advances one filter step: predict from the given filtered state, then
// update on the (partially observed) y_t. Composing T advances from a fresh
// state reproduces filter() exactly.
inline StepResult advance(const StateSpaceInstance& inst, KalmanState& state, const PartialObs& obs,
                          VectorXd* a_pred_out = nullptr, MatrixXd* p_pred_out = nullptr) {
  if (static_cast<int>(obs.mask.size()) != inst.obs_dim || obs.value.size() != inst.obs_dim)
    throw std::invalid_argument("advance: observation dimension mismatch");

  VectorXd a_pred;
  MatrixXd p_pred;
  if (state.t == 0) {
    a_pred = inst.a1;
    p_pred = inst.P1;
  } else {
    a_pred = detail::transition_apply(inst, state.a);
    p_pred = detail::blockdiag_left(inst, detail::blockdiag_right_t(inst, state.P)) + inst.Q;
    symmetrize(p_pred);
  }
  if (a_pred_out) *a_pred_out = a_pred;
  if (p_pred_out) *p_pred_out = p_pred;

  StepResult res;
  res.observed = detail::observed_indices(obs);
  const int p = static_cast<int>(res.observed.size());
  if (p == 0) {
    // No information: filtered moments equal the predicted ones.
    state.a = std::move(a_pred);
    state.P = std::move(p_pred);
    ++state.t;
    return res;
  }

  MatrixXd z_obs(p, inst.state_dim);
  MatrixXd h_obs(p, p);
  VectorXd y_obs(p);
  for (int r = 0; r < p; ++r) {
    z_obs.row(r) = inst.Z.row(res.observed[static_cast<std::size_t>(r)]);
    y_obs(r) = obs.value(res.observed[static_cast<std::size_t>(r)]);
    for (int c = 0; c < p; ++c)
      h_obs(r, c) = inst.H(res.observed[static_cast<std::size_t>(r)], res.observed[static_cast<std::size_t>(c)]);
  }

  const MatrixXd zp = z_obs * p_pred;  // p x s
  MatrixXd f = zp * z_obs.transpose() + h_obs;
  symmetrize(f);

  Eigen::LLT<MatrixXd> llt(f);
  if (llt.info() != Eigen::Success || llt.matrixLLT().diagonal().minCoeff() < kCholPivotTol)
    throw FilterSingularError("innovation covariance is numerically singular at t=" + std::to_string(state.t + 1));

  const VectorXd innov = y_obs - z_obs * a_pred;
  const VectorXd finv_innov = llt.solve(innov);
  double logdet = 0.0;
  for (int i = 0; i < p; ++i) logdet += std::log(llt.matrixLLT()(i, i));
  logdet *= 2.0;

  res.loglik_inc = -0.5 * (p * std::log(2.0 * std::numbers::pi) + logdet + innov.dot(finv_innov));
  if (!std::isfinite(res.loglik_inc))
    throw FilterSingularError("non-finite log-likelihood increment at t=" + std::to_string(state.t + 1));
  res.innovation = innov;
  res.innovation_cov = f;

  const MatrixXd gain = llt.solve(zp).transpose();  // s x p
  state.a = a_pred + gain * innov;
  MatrixXd imkz = MatrixXd::Identity(inst.state_dim, inst.state_dim) - gain * z_obs;
  state.P = imkz * p_pred * imkz.transpose() + gain * h_obs * gain.transpose();
  symmetrize(state.P);
  ++state.t;
  return res;
}

struct FilterResult {
  std::vector<VectorXd> a_pred, a_filt;
  std::vector<MatrixXd> p_pred, p_filt;
  std::vector<VectorXd> innovations;
  std::vector<MatrixXd> innovation_covs;
  std::vector<std::vector<int>> observed;
  double loglik = 0.0;

  [[nodiscard]] int n_steps() const { return static_cast<int>(a_filt.size()); }
};

inline FilterResult filter(const StateSpaceInstance& inst, std::span<const PartialObs> obs) {
  FilterResult out;
  const auto T = static_cast<int>(obs.size());
  out.a_pred.reserve(T);
  out.a_filt.reserve(T);
  out.p_pred.reserve(T);
  out.p_filt.reserve(T);
  KalmanState st;
  for (const auto& o : obs) {
    VectorXd ap;
    MatrixXd pp;
    StepResult r = advance(inst, st, o, &ap, &pp);
    out.loglik += r.loglik_inc;
    out.a_pred.push_back(std::move(ap));
    out.p_pred.push_back(std::move(pp));
    out.a_filt.push_back(st.a);
    out.p_filt.push_back(st.P);
    out.innovations.push_back(std::move(r.innovation));
    out.innovation_covs.push_back(std::move(r.innovation_cov));
    out.observed.push_back(std::move(r.observed));
  }
  return out;
}

// Log-likelihood only, without storing the per-step moments.
inline double filter_loglik(const StateSpaceInstance& inst, std::span<const PartialObs> obs) {
  KalmanState st;
  double ll = 0.0;
  for (const auto& o : obs) ll += advance(inst, st, o).loglik_inc;
  return ll;
}

struct SmootherResult {
  std::vector<VectorXd> mean;  // E[a_t | y_{1:T}], t = 1..T
  std::vector<MatrixXd> cov;   // Var(a_t | y_{1:T})
  // lag_one[t-1] = Cov(a_{t+1}, a_t | y_{1:T}) for t = 1..T-1
  std::vector<MatrixXd> lag_one;
};

// Fixed-interval smoother over the stored filter pass. The smoothing gain
// J_t = P_{t|t} T' P_{t+1|t}^{-1} falls back to a pseudo-inverse when the
// predicted covariance is singular (degenerate dynamics with Q = 0).
inline SmootherResult smooth(const StateSpaceInstance& inst, const FilterResult& fr) {
  const int T = fr.n_steps();
  if (T == 0) return {};
  SmootherResult out;
  out.mean.assign(static_cast<std::size_t>(T), VectorXd());
  out.cov.assign(static_cast<std::size_t>(T), MatrixXd());
  if (T > 1) out.lag_one.assign(static_cast<std::size_t>(T - 1), MatrixXd());

  out.mean[static_cast<std::size_t>(T - 1)] = fr.a_filt[static_cast<std::size_t>(T - 1)];
  out.cov[static_cast<std::size_t>(T - 1)] = fr.p_filt[static_cast<std::size_t>(T - 1)];

  for (int t = T - 1; t >= 1; --t) {
    const auto i = static_cast<std::size_t>(t - 1);  // zero-based index of time t
    const MatrixXd& p_filt = fr.p_filt[i];
    const MatrixXd& p_pred_next = fr.p_pred[i + 1];
    const MatrixXd cross = detail::blockdiag_right_t(inst, p_filt);  // P_{t|t} T'

    MatrixXd j;
    Eigen::LLT<MatrixXd> llt(p_pred_next);
    if (llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() >= kCholPivotTol) {
      j = llt.solve(cross.transpose()).transpose();
    } else {
      j = cross * p_pred_next.completeOrthogonalDecomposition().pseudoInverse();
    }

    out.mean[i] = fr.a_filt[i] + j * (out.mean[i + 1] - fr.a_pred[i + 1]);
    out.cov[i] = p_filt + j * (out.cov[i + 1] - p_pred_next) * j.transpose();
    symmetrize(out.cov[i]);
    out.lag_one[i] = out.cov[i + 1] * j.transpose();
  }
  return out;
}

inline SmootherResult smooth(const StateSpaceInstance& inst, std::span<const PartialObs> obs) {
  return smooth(inst, filter(inst, obs));
}

}  // namespace cpdet
