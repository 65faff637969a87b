#pragma once

// Tapered exponential covariance for the unit-variance latent fields:
//
//   C(d) = exp(-d / phi) * taper(d; r),   taper = Wendland-1 = (1 - d/r)^4_+ (1 + 4 d/r)
//
// The matrix is compactly supported (zero for d >= r) and stored sparse with a
// cached fill-reducing LDL^T factor.

#include <Eigen/Dense>
#include <Eigen/OrderingMethods>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"

namespace downscaler {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using SparseLdlt = Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>>;

/// Wendland-1 taper. Equals 1 at d = 0 and 0 for d >= r.
inline double taper(double d, double r) {
  if (!(r > 0.0)) throw ParameterError("taper range must be positive");
  if (d >= r) return 0.0;
  const double u = d / r;
  const double v = 1.0 - u;
  return v * v * v * v * (1.0 + 4.0 * u);
}

inline double tapered_exponential(double d, double range_phi, double taper_range) {
  return std::exp(-d / range_phi) * taper(d, taper_range);
}

/// Diagonal jitter schedule applied when a factorization is not positive definite.
inline constexpr double kJitterStart = 1e-10;
inline constexpr double kJitterMax = 1e-6;

namespace detail {

struct LdltFactor {
  SparseLdlt solver;
  double jitter = 0.0;
};

/// Factors A (+ jitter I if needed). Returns nullptr with the smallest pivot
/// seen when every jitter level fails.
inline std::unique_ptr<LdltFactor> factor_with_jitter(const SparseMatrix& a, double& smallest_pivot) {
  auto f = std::make_unique<LdltFactor>();
  f->solver.analyzePattern(a);
  smallest_pivot = std::numeric_limits<double>::infinity();
  SparseMatrix identity(a.rows(), a.cols());
  identity.setIdentity();
  for (double jitter = 0.0; jitter <= kJitterMax * 1.0000001; jitter = jitter == 0.0 ? kJitterStart : jitter * 10.0) {
    if (jitter == 0.0)
      f->solver.factorize(a);
    else
      f->solver.factorize(a + jitter * identity);
    double min_d = std::numeric_limits<double>::infinity();
    if (f->solver.info() == Eigen::Success) {
      const Eigen::VectorXd& d = f->solver.vectorD();
      min_d = d.size() ? d.minCoeff() : 1.0;
      if (!std::isfinite(min_d)) min_d = -std::numeric_limits<double>::infinity();
    } else {
      min_d = 0.0;
    }
    smallest_pivot = std::min(smallest_pivot, min_d);
    if (min_d > 0.0) {
      f->jitter = jitter;
      return f;
    }
  }
  return nullptr;
}

/// x <- P^T L D^{1/2} z for a factor P A P^T = L D L^T, i.e. a N(0, A) draw when z ~ N(0, I).
inline Eigen::VectorXd correlate(const SparseLdlt& ldlt, const Eigen::VectorXd& z) {
  Eigen::VectorXd v = ldlt.vectorD().array().sqrt().matrix().cwiseProduct(z);
  const SparseMatrix& l = ldlt.matrixL().nestedExpression();
  Eigen::VectorXd y = v;
  for (int k = 0; k < l.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(l, k); it; ++it)
      if (it.row() > it.col()) y[it.row()] += it.value() * v[it.col()];
  return ldlt.permutationPinv() * y;
}

}  // namespace detail

/// Immutable tapered covariance over an ordered site list, with cached factor.
class TaperedCovariance {
 public:
  static TaperedCovariance build(std::vector<Site> sites, double range_phi, double taper_range) {
    if (sites.empty()) throw InputError("build_cov: at least one site is required");
    if (!(range_phi > 0.0)) throw ParameterError("range phi must be positive");
    if (!(taper_range > 0.0)) throw ParameterError("taper range must be positive");
    TaperedCovariance cov;
    cov.sites_ = std::move(sites);
    cov.range_ = range_phi;
    cov.taper_range_ = taper_range;

    const int n = static_cast<int>(cov.sites_.size());
    std::vector<Eigen::Triplet<double, int>> triplets;
    triplets.reserve(static_cast<std::size_t>(n) * 8);
    const double dlat = taper_range / (kEarthRadiusKm * std::numbers::pi / 180.0);
    for (int j = 0; j < n; ++j) {
      triplets.emplace_back(j, j, 1.0);
      for (int i = j + 1; i < n; ++i) {
        if (std::abs(cov.sites_[i].lat - cov.sites_[j].lat) > dlat) continue;
        const double d = haversine_km(cov.sites_[i], cov.sites_[j]);
        if (d >= taper_range) continue;
        const double c = tapered_exponential(d, range_phi, taper_range);
        triplets.emplace_back(i, j, c);
        triplets.emplace_back(j, i, c);
      }
    }
    SparseMatrix m(n, n);
    m.setFromTriplets(triplets.begin(), triplets.end());
    m.makeCompressed();
    cov.matrix_ = std::make_shared<const SparseMatrix>(std::move(m));

    double smallest_pivot = 0.0;
    auto factor = detail::factor_with_jitter(*cov.matrix_, smallest_pivot);
    if (!factor)
      throw NumericalError("tapered covariance is singular after maximum jitter (smallest pivot " +
                           std::to_string(smallest_pivot) + ")");
    cov.factor_ = std::shared_ptr<const detail::LdltFactor>(std::move(factor));
    const Eigen::VectorXd& d = cov.factor_->solver.vectorD();
    cov.log_det_ = d.array().log().sum();
    return cov;
  }

  const std::vector<Site>& sites() const { return sites_; }
  int size() const { return static_cast<int>(sites_.size()); }
  double range() const { return range_; }
  double taper_range() const { return taper_range_; }
  /// Diagonal jitter actually added before factoring (0 in the usual case).
  double jitter() const { return factor_->jitter; }
  const SparseMatrix& matrix() const { return *matrix_; }
  long nonzeros() const { return matrix_->nonZeros(); }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    if (rhs.size() != size())
      throw InputError("solve: rhs has length " + std::to_string(rhs.size()) + ", expected " + std::to_string(size()));
    return factor_->solver.solve(rhs);
  }

  double log_det() const { return log_det_; }

  /// W^T C^{-1} W
  double quad_form(const Eigen::VectorXd& w) const { return w.dot(solve(w)); }

  /// log N(w; 0, C)
  double log_density(const Eigen::VectorXd& w) const {
    return -0.5 * (log_det_ + quad_form(w) + static_cast<double>(size()) * std::log(2.0 * std::numbers::pi));
  }

  /// Maps a standard-normal vector to a N(0, C) draw.
  Eigen::VectorXd correlate(const Eigen::VectorXd& z) const {
    if (z.size() != size()) throw InputError("correlate: dimension mismatch");
    return detail::correlate(factor_->solver, z);
  }

  /// Covariances between an arbitrary site and every site of the matrix.
  Eigen::VectorXd cross_covariance(const Site& s) const {
    Eigen::VectorXd c(size());
    for (int i = 0; i < size(); ++i) {
      const double d = haversine_km(s, sites_[i]);
      c[i] = d >= taper_range_ ? 0.0 : tapered_exponential(d, range_, taper_range_);
    }
    return c;
  }

 private:
  TaperedCovariance() = default;

  std::vector<Site> sites_;
  double range_ = 0.0;
  double taper_range_ = 0.0;
  double log_det_ = 0.0;
  std::shared_ptr<const SparseMatrix> matrix_;
  std::shared_ptr<const detail::LdltFactor> factor_;
};

inline TaperedCovariance build_cov(std::vector<Site> sites, double range_phi, double taper_range) {
  return TaperedCovariance::build(std::move(sites), range_phi, taper_range);
}

/// Simple-kriging weights C^{-1} c* and the conditional variance 1 - c*^T C^{-1} c*.
struct KrigingWeights {
  Eigen::VectorXd weights;
  double variance = 1.0;
};

inline KrigingWeights kriging_weights(const TaperedCovariance& cov, const Site& target) {
  const Eigen::VectorXd c = cov.cross_covariance(target);
  KrigingWeights out;
  if (c.isZero(0.0)) {
    out.weights = Eigen::VectorXd::Zero(cov.size());
    out.variance = 1.0;
    return out;
  }
  out.weights = cov.solve(c);
  const double v = 1.0 - c.dot(out.weights);
  if (v < -1e-8) throw NumericalError("kriging variance " + std::to_string(v) + " is negative beyond tolerance");
  out.variance = std::clamp(v, 0.0, 1.0);
  return out;
}

struct KrigingResult {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Conditional mean and variance of the latent field at new sites given its
/// values at the covariance's sites.
inline KrigingResult kriging(const TaperedCovariance& cov, const Eigen::VectorXd& w_at_sites,
                             std::span<const Site> new_sites) {
  if (w_at_sites.size() != cov.size()) throw InputError("kriging: field length does not match covariance");
  KrigingResult out{Eigen::VectorXd(new_sites.size()), Eigen::VectorXd(new_sites.size())};
  for (std::size_t k = 0; k < new_sites.size(); ++k) {
    const KrigingWeights kw = kriging_weights(cov, new_sites[k]);
    out.mean[static_cast<Eigen::Index>(k)] = kw.weights.dot(w_at_sites);
    out.variance[static_cast<Eigen::Index>(k)] = kw.variance;
  }
  return out;
}

/// One covariance per candidate range, sharing the site list and taper radius.
struct CovarianceLadder {
  std::vector<double> phi_grid;
  std::vector<TaperedCovariance> covs;

  static CovarianceLadder build(const std::vector<Site>& sites, const std::vector<double>& phi_grid,
                                double taper_range) {
    if (phi_grid.empty()) throw ParameterError("phi grid must be non-empty");
    CovarianceLadder ladder;
    ladder.phi_grid = phi_grid;
    ladder.covs.reserve(phi_grid.size());
    for (double phi : phi_grid) ladder.covs.push_back(TaperedCovariance::build(sites, phi, taper_range));
    return ladder;
  }

  int size() const { return static_cast<int>(covs.size()); }
  const TaperedCovariance& operator[](int k) const { return covs[static_cast<std::size_t>(k)]; }
};

}  // namespace downscaler
