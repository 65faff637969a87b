#pragma once

// First-order random walk (RW1) daily effects with a sum-to-zero constraint.
// Full conditionals have tridiagonal precision tau * Q + D, handled with a
// banded Cholesky factor; the constraint is imposed by conditioning on
// 1^T x = 0 (the Lambda^{-1}-metric projection of an unconstrained draw).

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/random.hpp"

namespace downscaler {

/// Symmetric tridiagonal matrix: diag (length T) and off-diagonal (length T-1).
struct Tridiagonal {
  Eigen::VectorXd diag;
  Eigen::VectorXd off;

  int size() const { return static_cast<int>(diag.size()); }

  Eigen::MatrixXd dense() const {
    const int n = size();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = diag[i];
    for (int i = 0; i + 1 < n; ++i) m(i, i + 1) = m(i + 1, i) = off[i];
    return m;
  }

  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const {
    const int n = size();
    Eigen::VectorXd y = diag.cwiseProduct(x);
    for (int i = 0; i + 1 < n; ++i) {
      y[i] += off[i] * x[i + 1];
      y[i + 1] += off[i] * x[i];
    }
    return y;
  }
};

/// RW1 structure matrix: Q = D^T D for the first-difference operator D.
inline Tridiagonal rw1_structure(int num_days) {
  if (num_days < 2) throw ParameterError("rw1_structure: T must be at least 2");
  Tridiagonal q{Eigen::VectorXd::Constant(num_days, 2.0), Eigen::VectorXd::Constant(num_days - 1, -1.0)};
  q.diag[0] = 1.0;
  q.diag[num_days - 1] = 1.0;
  return q;
}

/// sum_t (x_{t+1} - x_t)^2 = x^T Q x
inline double rw1_quad_form(const Eigen::VectorXd& x) {
  double s = 0.0;
  for (Eigen::Index t = 0; t + 1 < x.size(); ++t) s += (x[t + 1] - x[t]) * (x[t + 1] - x[t]);
  return s;
}

/// Cholesky factor of a symmetric positive-definite tridiagonal matrix,
/// A = L L^T with L lower bidiagonal.
class TridiagonalCholesky {
 public:
  explicit TridiagonalCholesky(const Tridiagonal& a) : diag_(a.size()), sub_(std::max(0, a.size() - 1)) {
    const int n = a.size();
    double prev = 0.0;
    for (int i = 0; i < n; ++i) {
      const double pivot = a.diag[i] - (i > 0 ? prev * prev : 0.0);
      if (!(pivot > 0.0) || !std::isfinite(pivot))
        throw ParameterError("tridiagonal precision is not positive definite (pivot " + std::to_string(pivot) +
                             " at row " + std::to_string(i) + ")");
      diag_[i] = std::sqrt(pivot);
      if (i + 1 < n) {
        sub_[i] = a.off[i] / diag_[i];
        prev = sub_[i];
      }
    }
  }

  /// Solves L y = b.
  Eigen::VectorXd forward(const Eigen::VectorXd& b) const {
    const Eigen::Index n = diag_.size();
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y[i] = (b[i] - (i > 0 ? sub_[i - 1] * y[i - 1] : 0.0)) / diag_[i];
    return y;
  }

  /// Solves L^T x = y.
  Eigen::VectorXd backward(const Eigen::VectorXd& y) const {
    const Eigen::Index n = diag_.size();
    Eigen::VectorXd x(n);
    for (Eigen::Index i = n - 1; i >= 0; --i) x[i] = (y[i] - (i + 1 < n ? sub_[i] * x[i + 1] : 0.0)) / diag_[i];
    return x;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return backward(forward(b)); }

  /// Dense inverse, column by column (T is at most a few hundred).
  Eigen::MatrixXd inverse() const {
    const Eigen::Index n = diag_.size();
    Eigen::MatrixXd inv(n, n);
    for (Eigen::Index j = 0; j < n; ++j) inv.col(j) = solve(Eigen::VectorXd::Unit(n, j));
    return inv;
  }

 private:
  Eigen::VectorXd diag_;
  Eigen::VectorXd sub_;
};

/// Likelihood sufficient statistics for one daily series: per day, the sum of
/// squared record coefficients and the sum of coefficient x partial residual.
struct Rw1Data {
  Eigen::VectorXd sum_sq_coef;
  Eigen::VectorXd sum_coef_resid;

  static Rw1Data zeros(int num_days) {
    return {Eigen::VectorXd::Zero(num_days), Eigen::VectorXd::Zero(num_days)};
  }
};

struct Rw1Series {
  TemporalWindow window;
  Eigen::VectorXd values;
  double tau = 1.0;
};

namespace detail {

inline Tridiagonal rw1_posterior_precision(const Rw1Data& data, double tau, double sigma2) {
  const int n = static_cast<int>(data.sum_sq_coef.size());
  Tridiagonal lambda = rw1_structure(n);
  lambda.diag *= tau;
  lambda.off *= tau;
  lambda.diag += data.sum_sq_coef / sigma2;
  return lambda;
}

inline void check_rw1_inputs(const Rw1Data& data, double tau, double sigma2) {
  if (!(tau > 0.0)) throw ParameterError("RW1 precision tau must be positive");
  if (!(sigma2 > 0.0)) throw ParameterError("residual variance must be positive");
  if (data.sum_sq_coef.size() != data.sum_coef_resid.size()) throw InputError("Rw1Data: length mismatch");
  if (data.sum_sq_coef.size() < 2) throw ParameterError("RW1 series needs at least 2 days");
}

}  // namespace detail

/// Moments of the constrained full conditional N(Lambda^{-1} b, Lambda^{-1} | 1^T x = 0).
struct Rw1Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

inline Rw1Moments rw1_conditional_moments(const Rw1Data& data, double tau, double sigma2) {
  detail::check_rw1_inputs(data, tau, sigma2);
  const int n = static_cast<int>(data.sum_sq_coef.size());
  if (data.sum_sq_coef.isZero(0.0)) {
    // Constrained prior: pseudo-inverse of tau Q.
    const Eigen::MatrixXd q = rw1_structure(n).dense() * tau;
    Eigen::MatrixXd shifted = q + Eigen::MatrixXd::Constant(n, n, 1.0);
    Eigen::MatrixXd inv = shifted.inverse();
    const Eigen::MatrixXd j = Eigen::MatrixXd::Constant(n, n, 1.0 / n);
    return {Eigen::VectorXd::Zero(n), inv - j / n};
  }
  const TridiagonalCholesky chol(detail::rw1_posterior_precision(data, tau, sigma2));
  const Eigen::VectorXd mu = chol.solve(data.sum_coef_resid / sigma2);
  const Eigen::VectorXd v = chol.solve(Eigen::VectorXd::Ones(n));
  const double denom = v.sum();
  Rw1Moments m;
  m.mean = mu - v * (mu.sum() / denom);
  m.covariance = chol.inverse() - v * v.transpose() / denom;
  return m;
}

/// Draws the daily series from its full conditional and returns it centred
/// exactly on the sum-to-zero constraint.
inline Eigen::VectorXd sample_rw1_conditional(const Rw1Data& data, double tau, double sigma2, Rng& rng) {
  detail::check_rw1_inputs(data, tau, sigma2);
  const Eigen::Index n = data.sum_sq_coef.size();
  if (data.sum_sq_coef.isZero(0.0)) {
    // No likelihood information: constrained prior draw.
    Eigen::VectorXd x(n);
    x[0] = 0.0;
    const double sd = 1.0 / std::sqrt(tau);
    for (Eigen::Index t = 1; t < n; ++t) x[t] = x[t - 1] + sd * std_normal(rng);
    x.array() -= x.mean();
    return x;
  }
  const TridiagonalCholesky chol(detail::rw1_posterior_precision(data, tau, sigma2));
  const Eigen::VectorXd mu = chol.solve(data.sum_coef_resid / sigma2);
  Eigen::VectorXd x = mu + chol.backward(std_normal_vector(rng, n));
  const Eigen::VectorXd v = chol.solve(Eigen::VectorXd::Ones(n));
  x -= v * (x.sum() / v.sum());
  // Remove round-off so the constraint holds to machine precision.
  x.array() -= x.mean();
  return x;
}

/// Conditional mean/variance of the (intrinsic) RW1 at unobserved days given
/// the observed entries. Observed days are returned as-is with variance 0.
struct Rw1Interpolation {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

inline Rw1Interpolation interpolate_missing_days(const Eigen::VectorXd& values, double tau,
                                                 const std::vector<bool>& observed) {
  if (!(tau > 0.0)) throw ParameterError("RW1 precision tau must be positive");
  const int n = static_cast<int>(values.size());
  if (static_cast<int>(observed.size()) != n) throw InputError("interpolate_missing_days: mask length mismatch");
  std::vector<int> unobserved;
  for (int t = 0; t < n; ++t)
    if (!observed[t]) unobserved.push_back(t);
  if (static_cast<int>(unobserved.size()) == n) throw InputError("interpolate_missing_days: no observed days");

  Rw1Interpolation out{values, Eigen::VectorXd::Zero(n)};
  if (unobserved.empty()) return out;

  // Q restricted to the unobserved days stays tridiagonal in day order.
  const Tridiagonal q = rw1_structure(n);
  const int m = static_cast<int>(unobserved.size());
  Tridiagonal quu{Eigen::VectorXd(m), Eigen::VectorXd::Zero(std::max(0, m - 1))};
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m);
  for (int k = 0; k < m; ++k) {
    const int t = unobserved[k];
    quu.diag[k] = q.diag[t];
    if (k + 1 < m && unobserved[k + 1] == t + 1) quu.off[k] = -1.0;
    if (t > 0 && observed[t - 1]) rhs[k] += values[t - 1];
    if (t + 1 < n && observed[t + 1]) rhs[k] += values[t + 1];
  }
  const TridiagonalCholesky chol(quu);
  const Eigen::VectorXd mean = chol.solve(rhs);
  for (int k = 0; k < m; ++k) {
    const int t = unobserved[k];
    out.mean[t] = mean[k];
    out.variance[t] = chol.solve(Eigen::VectorXd::Unit(m, k))[k] / tau;
  }
  return out;
}

}  // namespace downscaler
