#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace cpdet {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_sum_exp(const std::vector<double>& logs) {
  double m = kNegInf;
  for (double v : logs) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double v : logs) acc += std::exp(v - m);
  return m + std::log(acc);
}

// Normalizes log-weights in place to probabilities. Throws if all mass
// vanished (every entry -inf).
inline void normalize_log_weights(std::vector<double>& logw) {
  double z = log_sum_exp(logw);
  if (z == kNegInf)
    throw std::runtime_error("normalize_log_weights: all weights are -inf");
  for (double& v : logw) v = std::exp(v - z);
}

inline void symmetrize(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline bool is_symmetric(const MatrixXd& m, double tol = 1e-10) {
  if (m.rows() != m.cols()) return false;
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline bool is_psd(const MatrixXd& m, double tol = 1e-9) {
  if (!is_symmetric(m, tol)) return false;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -tol;
}

inline bool is_pd(const MatrixXd& m, double tol = 1e-12) {
  if (!is_symmetric(m, std::max(tol, 1e-9))) return false;
  Eigen::LLT<MatrixXd> llt(m);
  return llt.info() == Eigen::Success &&
         llt.matrixLLT().diagonal().minCoeff() > tol;
}

// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(xs.begin(), xs.end());
  if (xs.size() == 1) return xs[0];
  double pos = q * static_cast<double>(xs.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = static_cast<std::size_t>(std::ceil(pos));
  double frac = pos - static_cast<double>(lo);
  return xs[lo] * (1.0 - frac) + xs[hi] * frac;
}

inline double median(std::vector<double> xs) { return quantile(std::move(xs), 0.5); }

}  // namespace cpdet
