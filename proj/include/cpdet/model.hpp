#pragma once

// Domain types shared by every other module: model families and their
// parameters, observed activity panels, and segment/delay bookkeeping.
//
// An "activity" is one multivariate time series (P variables over T time
// points). Activities form ordered segments; within a segment they share one
// segment-level latent state path and are otherwise exchangeable. The delay
// d_n counts activities since (and including) the last changepoint, so
// d_n == 1 marks activity n as a segment start.
//
// Activity indices n and time indices t are 1-based throughout the public
// API; storage is 0-based internally.

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/kalman.hpp"
#include "cpdet/numutil.hpp"

namespace cpdet {

enum class Family { Sim, Warmup, Custom };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Sim: return "sim";
    case Family::Warmup: return "warmup";
    case Family::Custom: return "custom";
  }
  return "?";
}

// The estimable parameter vector and its covariance realizations.
//
// Sim family:    params = (sigma_eps2, sigma_alpha2, sigma_d2, rho)
// Warmup family: params = (vech Sigma, vech Psi, vech Delta, rho_sp),
//                a 2-variable heart-rate/speed model with full covariances.
// Custom:        covariances given directly, no scalar parameterization
//                (and no M-step support).
struct Theta {
  Family family = Family::Custom;
  VectorXd params;
  MatrixXd Sigma;  // P x P measurement noise
  MatrixXd Psi;    // M x M segment-state noise
  MatrixXd Delta;  // K x K activity-state noise

  static Theta sim(double sigma_eps2, double sigma_alpha2, double sigma_d2, double rho, int P = 2) {
    Theta th;
    th.family = Family::Sim;
    th.params.resize(4);
    th.params << sigma_eps2, sigma_alpha2, sigma_d2, rho;
    MatrixXd psi0(2, 2);
    psi0 << 1.0 / 3.0, 0.5, 0.5, 1.0;
    th.Sigma = sigma_eps2 * MatrixXd::Identity(P, P);
    th.Psi = sigma_alpha2 * kron(MatrixXd::Identity(P, P), psi0);
    th.Delta = sigma_d2 * MatrixXd::Identity(P, P);
    return th;
  }

  static Theta warmup(MatrixXd sigma, MatrixXd psi, MatrixXd delta, double rho_sp) {
    Theta th;
    th.family = Family::Warmup;
    th.Sigma = std::move(sigma);
    th.Psi = std::move(psi);
    th.Delta = std::move(delta);
    th.params.resize(13);
    int k = 0;
    for (int j = 0; j < 2; ++j)
      for (int i = j; i < 2; ++i) th.params(k++) = th.Sigma(i, j);
    for (int j = 0; j < 3; ++j)
      for (int i = j; i < 3; ++i) th.params(k++) = th.Psi(i, j);
    for (int j = 0; j < 2; ++j)
      for (int i = j; i < 2; ++i) th.params(k++) = th.Delta(i, j);
    th.params(k) = rho_sp;
    return th;
  }

  static Theta custom(MatrixXd sigma, MatrixXd psi, MatrixXd delta) {
    Theta th;
    th.family = Family::Custom;
    th.Sigma = std::move(sigma);
    th.Psi = std::move(psi);
    th.Delta = std::move(delta);
    return th;
  }

  [[nodiscard]] double sigma_eps2() const { return params(0); }
  [[nodiscard]] double sigma_alpha2() const { return params(1); }
  [[nodiscard]] double sigma_d2() const { return params(2); }
  [[nodiscard]] double rho() const { return params(3); }
  [[nodiscard]] double rho_sp() const { return params(params.size() - 1); }

  void validate() const {
    if (family == Family::Sim) {
      if (params.size() != 4) throw std::invalid_argument("Theta(sim): expected 4 parameters");
      if (sigma_eps2() <= 0 || sigma_alpha2() <= 0 || sigma_d2() <= 0)
        throw std::invalid_argument("Theta(sim): variances must be positive");
      if (std::abs(rho()) >= 1.0)
        throw std::invalid_argument("Theta(sim): |rho| must be < 1");
    }
    if (family == Family::Warmup) {
      if (params.size() != 13) throw std::invalid_argument("Theta(warmup): expected 13 parameters");
      if (std::abs(rho_sp()) >= 1.0)
        throw std::invalid_argument("Theta(warmup): |rho_sp| must be < 1");
    }
    if (!is_symmetric(Sigma) || !is_symmetric(Psi) || !is_symmetric(Delta))
      throw std::invalid_argument("Theta: covariances must be symmetric");
    if (!is_pd(Sigma) || !is_pd(Psi) || !is_pd(Delta))
      throw std::invalid_argument("Theta: covariances must be positive definite");
  }
};

// A model family: dimensions, design matrices (up to the entries bound from
// Theta), changepoint prior and initial state moments. With no information on
// the initial states we use large finite diffuse variances.
struct ModelSpec {
  int P = 0;  // observed variables per time point
  int M = 0;  // segment-state dimension
  int K = 0;  // activity-state dimension
  MatrixXd Z_S, Z_A;  // P x M, P x K loadings
  MatrixXd T_S, T_A;  // M x M, K x K transitions (theta-bound entries set by bind_design)
  double lambda = 0.5;
  VectorXd a1_S, a1_A;
  MatrixXd P1_S, P1_A;
  Family family = Family::Custom;

  static constexpr double kDiffuseVariance = 1e7;

  // Two-component-per-variable trend plus AR(1) activity noise; the segment
  // transition pairs a damped level with a decaying slope per variable.
  static ModelSpec sim(int P = 2, double lambda = 0.5, double diffuse = kDiffuseVariance) {
    ModelSpec s;
    s.family = Family::Sim;
    s.P = P;
    s.M = 2 * P;
    s.K = P;
    MatrixXd sel(1, 2);
    sel << 1.0, 0.0;
    s.Z_S = kron(MatrixXd::Identity(P, P), sel);
    s.Z_A = MatrixXd::Identity(P, P);
    MatrixXd t0(2, 2);
    t0 << 0.95, 1.0, 0.0, 0.90;
    s.T_S = kron(MatrixXd::Identity(P, P), t0);
    s.T_A = MatrixXd::Zero(P, P);  // rho * I, bound from Theta
    s.lambda = lambda;
    s.a1_S = VectorXd::Zero(s.M);
    s.a1_A = VectorXd::Zero(s.K);
    s.P1_S = diffuse * MatrixXd::Identity(s.M, s.M);
    s.P1_A = diffuse * MatrixXd::Identity(s.K, s.K);
    return s;
  }

  // Heart-rate/speed warm-up model: linear trend on heart rate and a local
  // level on speed at the segment level; random walk plus AR(1) activity
  // states.
  static ModelSpec warmup(double lambda = 0.5) {
    ModelSpec s;
    s.family = Family::Warmup;
    s.P = 2;
    s.M = 3;
    s.K = 2;
    s.Z_S = MatrixXd::Zero(2, 3);
    s.Z_S(0, 0) = 1.0;
    s.Z_S(1, 2) = 1.0;
    s.Z_A = MatrixXd::Identity(2, 2);
    s.T_S = MatrixXd::Identity(3, 3);
    s.T_S(0, 1) = 1.0;
    s.T_A = MatrixXd::Identity(2, 2);  // (1,1) entry bound to rho_sp
    s.lambda = lambda;
    s.a1_S = VectorXd(3);
    s.a1_S << 80.0, 0.0, 0.0;
    s.P1_S = VectorXd({{100.0, 1.0, 100.0}}).asDiagonal();
    s.a1_A = VectorXd::Zero(2);
    s.P1_A = 10.0 * MatrixXd::Identity(2, 2);
    return s;
  }

  void validate() const {
    if (P <= 0 || M <= 0 || K <= 0) throw std::invalid_argument("ModelSpec: dimensions must be positive");
    if (Z_S.rows() != P || Z_S.cols() != M || Z_A.rows() != P || Z_A.cols() != K ||
        T_S.rows() != M || T_S.cols() != M || T_A.rows() != K || T_A.cols() != K)
      throw std::invalid_argument("ModelSpec: design matrix dimension mismatch");
    if (!(lambda > 0.0 && lambda < 1.0)) throw std::invalid_argument("ModelSpec: lambda must lie in (0,1)");
    if (a1_S.size() != M || a1_A.size() != K || P1_S.rows() != M || P1_A.rows() != K)
      throw std::invalid_argument("ModelSpec: initial moment dimension mismatch");
    if (!is_psd(P1_S) || !is_psd(P1_A))
      throw std::invalid_argument("ModelSpec: initial covariances must be symmetric PSD");
  }
};

// A ModelSpec with every design entry and covariance numerically resolved for
// a fixed Theta. Pure: identical inputs yield bit-identical outputs.
struct BoundModel {
  int P = 0, M = 0, K = 0;
  MatrixXd Z_S, Z_A, T_S, T_A;
  MatrixXd Sigma, Psi, Delta;
  double lambda = 0.5;
  VectorXd a1_S, a1_A;
  MatrixXd P1_S, P1_A;
  Family family = Family::Custom;
};

inline BoundModel bind_design(const ModelSpec& spec, const Theta& theta) {
  if (theta.family != spec.family)
    throw std::invalid_argument("bind_design: theta family does not match the model spec");
  spec.validate();
  theta.validate();
  if (theta.Sigma.rows() != spec.P || theta.Psi.rows() != spec.M || theta.Delta.rows() != spec.K)
    throw std::invalid_argument("bind_design: covariance dimensions do not match the model spec");

  BoundModel b;
  b.P = spec.P;
  b.M = spec.M;
  b.K = spec.K;
  b.Z_S = spec.Z_S;
  b.Z_A = spec.Z_A;
  b.T_S = spec.T_S;
  b.T_A = spec.T_A;
  b.Sigma = theta.Sigma;
  b.Psi = theta.Psi;
  b.Delta = theta.Delta;
  b.lambda = spec.lambda;
  b.a1_S = spec.a1_S;
  b.a1_A = spec.a1_A;
  b.P1_S = spec.P1_S;
  b.P1_A = spec.P1_A;
  b.family = spec.family;

  switch (spec.family) {
    case Family::Sim:
      b.T_A = theta.rho() * MatrixXd::Identity(spec.K, spec.K);
      break;
    case Family::Warmup:
      b.T_A(1, 1) = theta.rho_sp();
      break;
    case Family::Custom:
      break;  // design fixed in the spec
  }
  return b;
}

// Partition of activities 1..N into contiguous segments. Always contains
// activity 1 as a segment start.
struct SegmentIndex {
  int N = 0;
  std::vector<int> changepoints;  // sorted, changepoints.front() == 1

  struct Segment {
    int first = 0, last = 0;
    [[nodiscard]] int length() const { return last - first + 1; }
  };

  static SegmentIndex from_changepoints(std::vector<int> cps, int N) {
    SegmentIndex si;
    si.N = N;
    si.changepoints = std::move(cps);
    std::sort(si.changepoints.begin(), si.changepoints.end());
    if (si.changepoints.empty() || si.changepoints.front() != 1)
      si.changepoints.insert(si.changepoints.begin(), 1);
    si.changepoints.erase(std::unique(si.changepoints.begin(), si.changepoints.end()),
                          si.changepoints.end());
    if (si.changepoints.back() > N || si.changepoints.front() < 1)
      throw std::invalid_argument("SegmentIndex: changepoint out of range");
    return si;
  }

  [[nodiscard]] std::vector<Segment> segments() const {
    std::vector<Segment> out;
    for (std::size_t i = 0; i < changepoints.size(); ++i) {
      int first = changepoints[i];
      int last = (i + 1 < changepoints.size()) ? changepoints[i + 1] - 1 : N;
      out.push_back({first, last});
    }
    return out;
  }

  [[nodiscard]] bool is_changepoint(int n) const {
    return std::binary_search(changepoints.begin(), changepoints.end(), n);
  }

  // Delay since the last changepoint at activity n (d == 1 at segment starts).
  [[nodiscard]] int delay_of(int n) const {
    auto it = std::upper_bound(changepoints.begin(), changepoints.end(), n);
    return n - *std::prev(it) + 1;
  }
};

// Validates the delay recursion d_1 = 1, d_n in {1, d_{n-1}+1} and converts
// to the equivalent segment representation.
inline SegmentIndex segment_from_delays(const std::vector<int>& delays, int N) {
  if (static_cast<int>(delays.size()) != N)
    throw std::invalid_argument("segment_from_delays: expected N delays");
  if (N == 0) return SegmentIndex::from_changepoints({}, 0);
  if (delays[0] != 1) throw std::invalid_argument("segment_from_delays: d_1 must be 1");
  std::vector<int> cps{1};
  for (int n = 2; n <= N; ++n) {
    int d = delays[static_cast<std::size_t>(n - 1)];
    int prev = delays[static_cast<std::size_t>(n - 2)];
    if (d == 1)
      cps.push_back(n);
    else if (d != prev + 1)
      throw std::invalid_argument("segment_from_delays: invalid recursion step at n=" + std::to_string(n));
  }
  return SegmentIndex::from_changepoints(std::move(cps), N);
}

inline std::vector<int> delays_from_segments(const SegmentIndex& si) {
  std::vector<int> delays(static_cast<std::size_t>(si.N));
  for (int n = 1; n <= si.N; ++n) delays[static_cast<std::size_t>(n - 1)] = si.delay_of(n);
  return delays;
}

// Observed data: N activities x T time points x P variables, with explicit
// per-cell missingness flags. Treated as immutable once filled.
class ActivityPanel {
 public:
  ActivityPanel() = default;
  ActivityPanel(int N, int T, int P)
      : N_(N), T_(T), P_(P),
        values_(static_cast<std::size_t>(N) * T * P, 0.0),
        observed_(static_cast<std::size_t>(N) * T * P, 0) {
    if (N <= 0 || T <= 0 || P <= 0) throw std::invalid_argument("ActivityPanel: dimensions must be positive");
  }

  [[nodiscard]] int N() const { return N_; }
  [[nodiscard]] int T() const { return T_; }
  [[nodiscard]] int P() const { return P_; }

  void set(int n, int t, int p, double v) {
    values_[index(n, t, p)] = v;
    observed_[index(n, t, p)] = 1;
  }
  void set_missing(int n, int t, int p) {
    values_[index(n, t, p)] = 0.0;
    observed_[index(n, t, p)] = 0;
  }
  [[nodiscard]] bool observed(int n, int t, int p) const { return observed_[index(n, t, p)] != 0; }
  [[nodiscard]] double value(int n, int t, int p) const { return values_[index(n, t, p)]; }

  // Observation vector of activity n at time t.
  [[nodiscard]] PartialObs obs(int n, int t) const {
    PartialObs o;
    o.value.resize(P_);
    o.mask.resize(static_cast<std::size_t>(P_));
    for (int p = 1; p <= P_; ++p) {
      o.value(p - 1) = value(n, t, p);
      o.mask[static_cast<std::size_t>(p - 1)] = observed(n, t, p) ? 1 : 0;
    }
    return o;
  }

  bool operator==(const ActivityPanel& other) const {
    return N_ == other.N_ && T_ == other.T_ && P_ == other.P_ && values_ == other.values_ &&
           observed_ == other.observed_;
  }

 private:
  [[nodiscard]] std::size_t index(int n, int t, int p) const {
    if (n < 1 || n > N_ || t < 1 || t > T_ || p < 1 || p > P_)
      throw std::out_of_range("ActivityPanel: index out of range");
    return (static_cast<std::size_t>(n - 1) * T_ + (t - 1)) * P_ + (p - 1);
  }

  int N_ = 0, T_ = 0, P_ = 0;
  std::vector<double> values_;
  std::vector<std::uint8_t> observed_;
};

}  // namespace cpdet
