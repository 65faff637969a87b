#pragma once

// Verification harness: a forward simulator for the block model and dense
// brute-force oracles. Nothing here uses the sparse covariance, banded RW1 or
// sampler code paths it is meant to check, apart from the sampler itself in
// the successive-conditional tester.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/random.hpp"
#include "downscaler/transform.hpp"
#include "json.hpp"

namespace downscaler::synth {

// ---------------------------------------------------------------------------
// Dense linear algebra (hand-written, O(n^3))

/// Lower Cholesky factor; throws NumericalError on a non-positive pivot.
inline Eigen::MatrixXd dense_cholesky(const Eigen::MatrixXd& a) {
  const Eigen::Index n = a.rows();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NumericalError("dense oracle: matrix is not positive definite (pivot " + std::to_string(d) + ")");
    l(j, j) = std::sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

/// Solves (L L^T) x = b.
inline Eigen::VectorXd dense_cholesky_solve(const Eigen::MatrixXd& l, const Eigen::VectorXd& b) {
  const Eigen::Index n = l.rows();
  Eigen::VectorXd y(n), x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = b[i];
    for (Eigen::Index k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    double s = y[i];
    for (Eigen::Index k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
    x[i] = s / l(i, i);
  }
  return x;
}

/// Gauss-Jordan inverse with partial pivoting.
inline Eigen::MatrixXd dense_inverse(const Eigen::MatrixXd& a) {
  const Eigen::Index n = a.rows();
  Eigen::MatrixXd m = a;
  Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::Index p = c;
    for (Eigen::Index r = c + 1; r < n; ++r)
      if (std::abs(m(r, c)) > std::abs(m(p, c))) p = r;
    if (m(p, c) == 0.0) throw NumericalError("dense oracle: singular matrix");
    m.row(c).swap(m.row(p));
    inv.row(c).swap(inv.row(p));
    const double piv = m(c, c);
    m.row(c) /= piv;
    inv.row(c) /= piv;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m(r, c);
      if (f == 0.0) continue;
      m.row(r) -= f * m.row(c);
      inv.row(r) -= f * inv.row(c);
    }
  }
  return inv;
}

// ---------------------------------------------------------------------------
// Dense GP oracle

inline double oracle_covariance(double d, double range_phi, double taper_range) {
  if (d >= taper_range) return 0.0;
  const double u = d / taper_range;
  return std::exp(-d / range_phi) * std::pow(1.0 - u, 4) * (1.0 + 4.0 * u);
}

struct DenseGpOracle {
  std::vector<Site> sites;
  double range_phi = 0.0;
  double taper_range = 0.0;
  Eigen::MatrixXd cov;
  Eigen::MatrixXd chol;

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return dense_cholesky_solve(chol, b); }
  double log_det() const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < chol.rows(); ++i) s += 2.0 * std::log(chol(i, i));
    return s;
  }
  Eigen::VectorXd cross(const Site& s) const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(sites.size()));
    for (std::size_t i = 0; i < sites.size(); ++i)
      c[static_cast<Eigen::Index>(i)] = oracle_covariance(haversine_km(s, sites[i]), range_phi, taper_range);
    return c;
  }
  /// Conditional-normal mean and variance at new sites (unit prior variance).
  std::pair<Eigen::VectorXd, Eigen::VectorXd> conditional(const Eigen::VectorXd& w,
                                                          std::span<const Site> targets) const {
    Eigen::VectorXd mean(static_cast<Eigen::Index>(targets.size())), var(static_cast<Eigen::Index>(targets.size()));
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const Eigen::VectorXd c = cross(targets[k]);
      const Eigen::VectorXd a = solve(c);
      mean[static_cast<Eigen::Index>(k)] = a.dot(w);
      var[static_cast<Eigen::Index>(k)] = 1.0 - c.dot(a);
    }
    return {mean, var};
  }
};

inline DenseGpOracle dense_gp_oracle(std::vector<Site> sites, double range_phi, double taper_range,
                                     double jitter = 0.0) {
  if (sites.size() > 500) throw ParameterError("dense oracle is limited to 500 sites");
  DenseGpOracle o;
  o.sites = std::move(sites);
  o.range_phi = range_phi;
  o.taper_range = taper_range;
  const auto n = static_cast<Eigen::Index>(o.sites.size());
  o.cov.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      o.cov(i, j) = oracle_covariance(haversine_km(o.sites[static_cast<std::size_t>(i)], o.sites[static_cast<std::size_t>(j)]),
                                      range_phi, taper_range) +
                    (i == j ? jitter : 0.0);
  o.chol = dense_cholesky(o.cov);
  return o;
}

// ---------------------------------------------------------------------------
// Dense RW1 oracle

/// Orthonormal basis of the sum-zero subspace (Helmert contrasts), T x (T-1).
inline Eigen::MatrixXd helmert_basis(int n) {
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(n, n - 1);
  for (int k = 1; k < n; ++k) {
    const double norm = std::sqrt(static_cast<double>(k) * (k + 1));
    for (int i = 0; i < k; ++i) u(i, k - 1) = 1.0 / norm;
    u(k, k - 1) = -static_cast<double>(k) / norm;
  }
  return u;
}

inline Eigen::MatrixXd dense_rw1_structure(int n) {
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, n);
  for (int t = 0; t + 1 < n; ++t) {
    q(t, t) += 1.0;
    q(t + 1, t + 1) += 1.0;
    q(t, t + 1) -= 1.0;
    q(t + 1, t) -= 1.0;
  }
  return q;
}

struct DenseRw1Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Constrained conditional N(Lambda^{-1} b, Lambda^{-1} | 1^T x = 0) computed in
/// the Helmert coordinates of the sum-zero subspace.
inline DenseRw1Moments dense_rw1_conditional(const Eigen::VectorXd& sum_sq_coef, const Eigen::VectorXd& sum_coef_resid,
                                             double tau, double sigma2) {
  const int n = static_cast<int>(sum_sq_coef.size());
  Eigen::MatrixXd lambda = tau * dense_rw1_structure(n);
  for (int t = 0; t < n; ++t) lambda(t, t) += sum_sq_coef[t] / sigma2;
  const Eigen::MatrixXd u = helmert_basis(n);
  const Eigen::MatrixXd sub_inv = dense_inverse(u.transpose() * lambda * u);
  DenseRw1Moments m;
  m.covariance = u * sub_inv * u.transpose();
  m.mean = u * (sub_inv * (u.transpose() * (sum_coef_resid / sigma2)));
  return m;
}

/// Conditional of unobserved days given observed values under the intrinsic
/// RW1 (joint precision tau Q), from the dense precision partition.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> dense_rw1_interpolation(const Eigen::VectorXd& values, double tau,
                                                                           const std::vector<bool>& observed) {
  const int n = static_cast<int>(values.size());
  const Eigen::MatrixXd q = tau * dense_rw1_structure(n);
  std::vector<int> uo, ob;
  for (int t = 0; t < n; ++t) (observed[t] ? ob : uo).push_back(t);
  Eigen::VectorXd mean = values, var = Eigen::VectorXd::Zero(n);
  if (uo.empty()) return {mean, var};
  Eigen::MatrixXd quu(uo.size(), uo.size()), quo(uo.size(), ob.size());
  Eigen::VectorXd xo(ob.size());
  for (std::size_t i = 0; i < uo.size(); ++i) {
    for (std::size_t j = 0; j < uo.size(); ++j) quu(i, j) = q(uo[i], uo[j]);
    for (std::size_t j = 0; j < ob.size(); ++j) quo(i, j) = q(uo[i], ob[j]);
  }
  for (std::size_t j = 0; j < ob.size(); ++j) xo[j] = values[ob[j]];
  const Eigen::MatrixXd cov = dense_inverse(quu);
  const Eigen::VectorXd mu = -cov * quo * xo;
  for (std::size_t i = 0; i < uo.size(); ++i) {
    mean[uo[i]] = mu[i];
    var[uo[i]] = cov(i, i);
  }
  return {mean, var};
}

// ---------------------------------------------------------------------------
// Forward simulator

enum class RegionLayout { Single, SplitLongitude, Conus };

/// Region boxes used by synthetic CONUS-wide datasets.
inline RegionId synthetic_conus_region(double lon, double lat) {
  if (lat >= 41.0) {
    if (lon < -111.0) return RegionId::Northwest;
    if (lon < -95.0) return RegionId::NorthernRockies;
    if (lon < -85.0) return RegionId::UpperMidwest;
    return RegionId::Northeast;
  }
  if (lon < -115.0) return RegionId::West;
  if (lon < -103.0) return RegionId::Southwest;
  if (lon < -90.0) return RegionId::South;
  if (lon < -82.0) return RegionId::OhioValley;
  return RegionId::Southeast;
}

/// Fixed generative truth plus the layout of monitors, days and grid cells.
struct TruthSpec {
  double mu0 = 10.0;
  double mu1 = 15.0;
  std::array<double, kNumCovariates> gamma{0.5, -0.3, 0.8, -0.4, 0.6, 0.2, -0.2, -0.7, 0.3, 1.0};
  double c1 = 1.5;
  double c2 = 0.8;
  double c3 = 2.0;
  double sigma2 = 1.0;
  double tau0 = 4.0;
  double tau1 = 25.0;
  double phi1_km = 200.0;
  double phi2_km = 200.0;
  double taper_range_km = 500.0;

  int n_monitors = 30;
  bool lattice = false;
  double lon_min = -88.0;
  double lon_max = -82.0;
  double lat_min = 36.0;
  double lat_max = 40.0;
  RegionLayout layout = RegionLayout::Single;
  RegionId region = RegionId::OhioValley;      // Single, and west half of SplitLongitude
  RegionId east_region = RegionId::Southeast;  // east half of SplitLongitude
  std::string start_date = "2011-01-01";
  int n_days = 40;
  double obs_prob = 1.0;
  double aod_missing_rate = 0.0;
  int grid_nx = 0;
  int grid_ny = 0;

  void validate() const {
    if (!(sigma2 >= 0.0 && tau0 > 0.0 && tau1 > 0.0 && c1 >= 0.0 && c3 >= 0.0))
      throw ParameterError("truth spec: variances/precisions must be positive and c1, c3 non-negative");
    if (!(phi1_km > 0.0 && phi2_km > 0.0 && taper_range_km > 0.0)) throw ParameterError("truth spec: ranges must be positive");
    if (n_monitors < 1 || n_days < 1) throw ParameterError("truth spec: need monitors and days");
    if (!(lon_min < lon_max && lat_min < lat_max)) throw ParameterError("truth spec: empty bounding box");
    if (!(obs_prob > 0.0 && obs_prob <= 1.0)) throw ParameterError("truth spec: obs_prob must be in (0, 1]");
    if (!(aod_missing_rate >= 0.0 && aod_missing_rate < 1.0)) throw ParameterError("truth spec: aod_missing_rate in [0, 1)");
    if (grid_nx < 0 || grid_ny < 0) throw ParameterError("truth spec: negative grid size");
  }

  RegionId region_of(double lon, double lat) const {
    switch (layout) {
      case RegionLayout::Single: return region;
      case RegionLayout::SplitLongitude: return lon < 0.5 * (lon_min + lon_max) ? region : east_region;
      case RegionLayout::Conus: return synthetic_conus_region(lon, lat);
    }
    return region;
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(RegionLayout, {{RegionLayout::Single, "single"},
                                            {RegionLayout::SplitLongitude, "split_longitude"},
                                            {RegionLayout::Conus, "conus"}})

inline void to_json(nlohmann::json& j, const TruthSpec& t) {
  j = nlohmann::json{{"mu0", t.mu0},
                     {"mu1", t.mu1},
                     {"gamma", t.gamma},
                     {"c1", t.c1},
                     {"c2", t.c2},
                     {"c3", t.c3},
                     {"sigma2", t.sigma2},
                     {"tau0", t.tau0},
                     {"tau1", t.tau1},
                     {"phi1_km", t.phi1_km},
                     {"phi2_km", t.phi2_km},
                     {"taper_range_km", t.taper_range_km},
                     {"n_monitors", t.n_monitors},
                     {"lattice", t.lattice},
                     {"lon_min", t.lon_min},
                     {"lon_max", t.lon_max},
                     {"lat_min", t.lat_min},
                     {"lat_max", t.lat_max},
                     {"layout", t.layout},
                     {"region", std::string(region_name(t.region))},
                     {"east_region", std::string(region_name(t.east_region))},
                     {"start_date", t.start_date},
                     {"n_days", t.n_days},
                     {"obs_prob", t.obs_prob},
                     {"aod_missing_rate", t.aod_missing_rate},
                     {"grid_nx", t.grid_nx},
                     {"grid_ny", t.grid_ny}};
}

inline void from_json(const nlohmann::json& j, TruthSpec& t) {
  TruthSpec d;
  for (const auto& [key, _] : j.items()) {
    nlohmann::json probe;
    to_json(probe, d);
    if (!probe.contains(key)) throw InputError("truth spec: unknown key '" + key + "'");
  }
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("mu0", t.mu0);
  get("mu1", t.mu1);
  get("gamma", t.gamma);
  get("c1", t.c1);
  get("c2", t.c2);
  get("c3", t.c3);
  get("sigma2", t.sigma2);
  get("tau0", t.tau0);
  get("tau1", t.tau1);
  get("phi1_km", t.phi1_km);
  get("phi2_km", t.phi2_km);
  get("taper_range_km", t.taper_range_km);
  get("n_monitors", t.n_monitors);
  get("lattice", t.lattice);
  get("lon_min", t.lon_min);
  get("lon_max", t.lon_max);
  get("lat_min", t.lat_min);
  get("lat_max", t.lat_max);
  get("layout", t.layout);
  if (j.contains("region")) t.region = parse_region(j.at("region").get<std::string>());
  if (j.contains("east_region")) t.east_region = parse_region(j.at("east_region").get<std::string>());
  get("start_date", t.start_date);
  get("n_days", t.n_days);
  get("obs_prob", t.obs_prob);
  get("aod_missing_rate", t.aod_missing_rate);
  get("grid_nx", t.grid_nx);
  get("grid_ny", t.grid_ny);
}

/// Two regions (OhioValley | Southeast) in the first window, with a 20 x 8
/// grid; the bundle behind the CLI `simulate` command and golden tests.
inline TruthSpec mini_conus_truth() {
  TruthSpec t;
  t.layout = RegionLayout::SplitLongitude;
  t.region = RegionId::OhioValley;
  t.east_region = RegionId::Southeast;
  t.lon_min = -88.0;
  t.lon_max = -76.0;
  t.lat_min = 35.0;
  t.lat_max = 39.0;
  t.n_monitors = 40;
  t.n_days = 30;
  t.grid_nx = 20;
  t.grid_ny = 8;
  return t;
}

struct HiddenTruth {
  std::vector<Site> sites;  // monitors followed by grid cells
  Eigen::VectorXd w1;
  Eigen::VectorXd w2;
  Eigen::VectorXd beta0;  // per simulated day
  Eigen::VectorXd beta1;
  TransformSpec transform;            // standardization used to generate PM2.5
  std::vector<double> record_mean;    // noiseless PM2.5 per monitor record
  std::vector<double> cell_mean;      // noiseless PM2.5 per grid row (NaN when AOD missing)
  int clamped = 0;                    // records whose simulated PM2.5 was clamped at 0
};

struct SimulatedData {
  std::vector<MonitorRecord> monitors;
  std::vector<GridCellDay> grid;
  HiddenTruth truth;
  TruthSpec spec;
};

namespace detail {

struct RawDraw {
  std::array<double, kNumRawCovariates> z;
  double aod;
};

inline RawDraw draw_raw_covariates(Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  RawDraw d{};
  d.z[0] = static_cast<double>(std::poisson_distribution<int>(std::exp(0.5 * n01(rng)))(rng));  // fire counts
  d.z[1] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);                               // forest
  d.z[2] = std::exp(std::log(2.0) + 0.8 * n01(rng));                                           // emission
  d.z[3] = 60.0 + 12.0 * n01(rng);                                                             // rh
  d.z[4] = 285.0 + 8.0 * n01(rng);                                                             // tmp
  d.z[5] = 3.0 * n01(rng);                                                                     // vgrd
  d.z[6] = 1.0 + 3.0 * n01(rng);                                                               // ugrd
  d.z[7] = std::max(50.0, 900.0 + 250.0 * n01(rng));                                           // hpbl
  d.z[8] = std::exp(1.0 + 0.7 * n01(rng));                                                     // road
  d.aod = std::exp(std::log(0.2) + 0.5 * n01(rng));
  return d;
}

inline std::string padded(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d", prefix, i);
  return buf;
}

}  // namespace detail

/// Noiseless PM2.5 for standardized covariates z under the truth.
inline double truth_mean(const TruthSpec& t, double w1, double w2, double b0, double b1, double aod,
                         const Covariates& z) {
  double v = t.mu0 + t.c1 * w1 + b0 + (t.mu1 + t.c2 * w1 + t.c3 * w2 + b1) * aod;
  for (int j = 0; j < kNumCovariates; ++j) v += t.gamma[j] * z[j];
  return v;
}

/// Draws a dataset from the block model run forward.
inline SimulatedData simulate(const TruthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SimulatedData out;
  out.spec = spec;
  const Date start = parse_date(spec.start_date);

  // Monitor layout.
  std::vector<Site> monitors;
  if (spec.lattice) {
    const int nx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(spec.n_monitors))));
    const int ny = (spec.n_monitors + nx - 1) / nx;
    for (int k = 0; k < spec.n_monitors; ++k) {
      const double fx = (k % nx + 0.5) / nx, fy = (k / nx + 0.5) / ny;
      monitors.push_back({detail::padded("m", k), spec.lon_min + fx * (spec.lon_max - spec.lon_min),
                          spec.lat_min + fy * (spec.lat_max - spec.lat_min)});
    }
  } else {
    for (int k = 0; k < spec.n_monitors; ++k)
      monitors.push_back({detail::padded("m", k), spec.lon_min + unif(rng) * (spec.lon_max - spec.lon_min),
                          spec.lat_min + unif(rng) * (spec.lat_max - spec.lat_min)});
  }
  std::vector<Site> cells;
  for (int iy = 0; iy < spec.grid_ny; ++iy)
    for (int ix = 0; ix < spec.grid_nx; ++ix)
      cells.push_back({detail::padded("c", iy * spec.grid_nx + ix),
                       spec.lon_min + (ix + 0.5) / spec.grid_nx * (spec.lon_max - spec.lon_min),
                       spec.lat_min + (iy + 0.5) / spec.grid_ny * (spec.lat_max - spec.lat_min)});

  // Latent fields over monitors and cells jointly.
  HiddenTruth& truth = out.truth;
  truth.sites = monitors;
  truth.sites.insert(truth.sites.end(), cells.begin(), cells.end());
  const auto n_sites = static_cast<Eigen::Index>(truth.sites.size());
  auto draw_field = [&](double phi) {
    const DenseGpOracle o = dense_gp_oracle(truth.sites, phi, spec.taper_range_km, 1e-10);
    Eigen::VectorXd z(n_sites);
    for (Eigen::Index i = 0; i < n_sites; ++i) z[i] = n01(rng);
    return Eigen::VectorXd(o.chol * z);
  };
  truth.w1 = draw_field(spec.phi1_km);
  truth.w2 = draw_field(spec.phi2_km);

  // Daily RW1 effects, centred.
  auto draw_rw1 = [&](double tau) {
    Eigen::VectorXd b(spec.n_days);
    b[0] = 0.0;
    for (int t = 1; t < spec.n_days; ++t) b[t] = b[t - 1] + n01(rng) / std::sqrt(tau);
    b.array() -= b.mean();
    return b;
  };
  truth.beta0 = draw_rw1(spec.tau0);
  truth.beta1 = draw_rw1(spec.tau1);

  // Monitor records with raw covariates.
  struct Pending {
    int site;
    int day;
  };
  std::vector<Pending> pending;
  for (int k = 0; k < spec.n_monitors; ++k)
    for (int t = 0; t < spec.n_days; ++t) {
      if (unif(rng) >= spec.obs_prob) continue;
      const auto raw = detail::draw_raw_covariates(rng);
      MonitorRecord r;
      r.site = monitors[static_cast<std::size_t>(k)];
      r.day = add_days(start, t);
      r.region = spec.region_of(r.site.lon, r.site.lat);
      for (int j = 0; j < kNumRawCovariates; ++j) r.z[j] = raw.z[j];
      r.aod = unif(rng) < spec.aod_missing_rate ? std::nullopt : std::optional<double>(raw.aod);
      if (!r.aod) r.missing.set(kInteractionIndex);
      out.monitors.push_back(r);
      pending.push_back({k, t});
    }
  for (std::size_t ic = 0; ic < cells.size(); ++ic)
    for (int t = 0; t < spec.n_days; ++t) {
      const auto raw = detail::draw_raw_covariates(rng);
      GridCellDay g;
      g.cell = cells[ic];
      g.day = add_days(start, t);
      g.region = spec.region_of(g.cell.lon, g.cell.lat);
      for (int j = 0; j < kNumRawCovariates; ++j) g.z[j] = raw.z[j];
      g.aod = raw.aod;
      out.grid.push_back(g);
    }

  // PM2.5 from the globally standardized covariates.
  truth.transform = fit_transform(out.monitors);
  for (std::size_t i = 0; i < out.monitors.size(); ++i) {
    MonitorRecord& r = out.monitors[i];
    const int k = pending[i].site, t = pending[i].day;
    // The record's AOD may be missing; PM2.5 is still generated from the true AOD.
    MonitorRecord full = r;
    if (!full.aod) {
      full.aod = detail::draw_raw_covariates(rng).aod;
      full.missing.reset(kInteractionIndex);
    }
    const MonitorRecord std_r = apply_transform(truth.transform, full);
    const double mean = truth_mean(spec, truth.w1[k], truth.w2[k], truth.beta0[t], truth.beta1[t], *full.aod, std_r.z);
    truth.record_mean.push_back(mean);
    double y = mean + std::sqrt(spec.sigma2) * n01(rng);
    if (y < 0.0) {
      y = 0.0;
      ++truth.clamped;
    }
    r.pm25 = y;
  }
  for (std::size_t row = 0; row < out.grid.size(); ++row) {
    const GridCellDay& g = out.grid[row];
    const GridCellDay std_g = apply_transform(truth.transform, g);
    const auto ic = static_cast<Eigen::Index>(spec.n_monitors + static_cast<int>(row) / spec.n_days);
    const int t = static_cast<int>(row) % spec.n_days;
    truth.cell_mean.push_back(
        truth_mean(spec, truth.w1[ic], truth.w2[ic], truth.beta0[t], truth.beta1[t], *g.aod, std_g.z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Successive-conditional ("getting it right") tester

/// Draw of every block parameter from the chain's priors. Latent fields use
/// the dense oracle factor of C(phi).
inline ModelState draw_from_prior(const Priors& p, const std::vector<DenseGpOracle>& gp, int num_days, Rng& rng) {
  const auto m = static_cast<Eigen::Index>(gp.front().sites.size());
  ModelState s = ModelState::zeros(static_cast<int>(m), num_days);
  const double sd_fixed = std::sqrt(p.fixed_effect_var);
  const double sd_coreg = std::sqrt(p.coreg_var);
  s.mu0 = sd_fixed * std_normal(rng);
  s.mu1 = sd_fixed * std_normal(rng);
  for (int j = 0; j < kNumCovariates; ++j) s.gamma[j] = sd_fixed * std_normal(rng);
  s.coreg.c1 = std::abs(sd_coreg * std_normal(rng));
  s.coreg.c2 = sd_coreg * std_normal(rng);
  s.coreg.c3 = std::abs(sd_coreg * std_normal(rng));
  s.sigma2 = 1.0 / gamma_draw(rng, p.sigma2_shape, p.sigma2_scale);
  s.tau0 = gamma_draw(rng, p.tau_shape, p.tau_rate);
  s.tau1 = gamma_draw(rng, p.tau_shape, p.tau_rate);
  const int grid = static_cast<int>(gp.size());
  s.phi1 = std::uniform_int_distribution<int>(0, grid - 1)(rng);
  s.phi2 = std::uniform_int_distribution<int>(0, grid - 1)(rng);
  s.w1 = gp[static_cast<std::size_t>(s.phi1)].chol * std_normal_vector(rng, m);
  s.w2 = gp[static_cast<std::size_t>(s.phi2)].chol * std_normal_vector(rng, m);
  auto rw1 = [&](double tau) {
    Eigen::VectorXd b(num_days);
    b[0] = 0.0;
    for (int t = 1; t < num_days; ++t) b[t] = b[t - 1] + std_normal(rng) / std::sqrt(tau);
    b.array() -= b.mean();
    return b;
  };
  s.beta0 = rw1(s.tau0);
  s.beta1 = rw1(s.tau1);
  return s;
}

/// y ~ p(y | state) for the fixed design, by direct scalar evaluation.
inline void draw_response(const ModelState& s, BlockData& data, Rng& rng) {
  const double sd = std::sqrt(s.sigma2);
  for (int r = 0; r < data.num_records(); ++r) {
    const int i = data.site_index[static_cast<std::size_t>(r)];
    const int t = data.day_index[static_cast<std::size_t>(r)];
    const double a = data.aod[r];
    double mean = s.mu0 + s.coreg.c1 * s.w1[i] + s.beta0[t] + (s.mu1 + s.coreg.c2 * s.w1[i] + s.coreg.c3 * s.w2[i] + s.beta1[t]) * a;
    for (int j = 0; j < kNumCovariates; ++j) mean += s.gamma[j] * data.design(r, 2 + j);
    data.y[r] = mean + sd * std_normal(rng);
  }
}

struct SuccessiveConditionalConfig {
  int n_monitors = 4;
  int n_days = 6;
  int n_cycles = 50000;
  int n_prior_draws = 50000;
  int n_batches = 100;
  std::uint64_t seed = 7;
  ChainConfig chain;

  /// Proper, moderately informative priors so the test has power.
  static SuccessiveConditionalConfig standard() {
    SuccessiveConditionalConfig c;
    c.chain.phi_grid = {50.0, 200.0, 800.0};
    c.chain.taper_range_km = 1000.0;
    c.chain.priors.fixed_effect_var = 1.0;
    c.chain.priors.coreg_var = 1.0;
    // Shape above n/2 + 1 keeps a chain with a mis-scaled sigma2 update
    // stationary, so such a bug shows up as a moment shift.
    c.chain.priors.sigma2_shape = 20.0;
    c.chain.priors.sigma2_scale = 19.0;
    c.chain.priors.tau_shape = 6.0;
    c.chain.priors.tau_rate = 3.0;
    c.chain.n_iter = 2;
    c.chain.n_burnin = 1;
    c.chain.thin = 1;
    return c;
  }
};

struct MomentCheck {
  std::string name;
  double prior_mean = 0.0;     // marginal-conditional (pure prior) estimate
  double sampler_mean = 0.0;   // successive-conditional estimate
  double z = 0.0;
};

struct SuccessiveConditionalReport {
  std::vector<MomentCheck> checks;
  int cycles = 0;                // completed successive-conditional cycles
  std::optional<int> aborted_at;  // cycle at which a sweep failed numerically
  std::string abort_reason;

  double max_abs_z() const {
    if (aborted_at) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, std::abs(c.z));
    return m;
  }
  bool passed(double z_limit = 3.0) const { return max_abs_z() <= z_limit; }
};

using SweepFn = std::function<void(BlockSampler&, ModelState&, Rng&)>;

inline void default_sweep(BlockSampler& sampler, ModelState& s, Rng& rng) { sampler.sweep(s, rng); }

/// Alternates one Gibbs sweep with a fresh response draw and compares the
/// first two moments of mu0, sigma2, c1 and tau0 against independent prior
/// draws. Successive-conditional standard errors use batch means.
inline SuccessiveConditionalReport successive_conditional_test(const SuccessiveConditionalConfig& cfg,
                                                               const SweepFn& sweep = default_sweep) {
  SuccessiveConditionalReport report;
  if (cfg.n_cycles <= 0) return report;
  if (cfg.n_monitors > 5 || cfg.n_days > 10) throw ParameterError("successive-conditional test is for small instances");
  cfg.chain.validate();
  Rng rng(cfg.seed);

  // Fixed design: monitors on a ~300 km patch, every site observed every day.
  std::vector<Site> sites;
  for (int k = 0; k < cfg.n_monitors; ++k)
    sites.push_back({detail::padded("g", k), -86.0 + 3.0 * uniform01(rng), 37.0 + 2.5 * uniform01(rng)});
  BlockData data;
  data.sites = sites;
  data.num_days = cfg.n_days;
  const int n = cfg.n_monitors * cfg.n_days;
  data.y = Eigen::VectorXd::Zero(n);
  data.aod.resize(n);
  data.design.resize(n, kNumFixedEffects);
  for (int k = 0, r = 0; k < cfg.n_monitors; ++k)
    for (int t = 0; t < cfg.n_days; ++t, ++r) {
      data.site_index.push_back(k);
      data.day_index.push_back(t);
      data.aod[r] = 0.1 + 0.6 * uniform01(rng);
      data.design(r, 0) = 1.0;
      data.design(r, 1) = data.aod[r];
      for (int j = 0; j < kNumCovariates; ++j) data.design(r, 2 + j) = std_normal(rng);
    }
  data.gram = data.design.transpose() * data.design;

  std::vector<DenseGpOracle> gp;
  for (double phi : cfg.chain.phi_grid) gp.push_back(dense_gp_oracle(sites, phi, cfg.chain.taper_range_km));
  const CovarianceLadder ladder = CovarianceLadder::build(sites, cfg.chain.phi_grid, cfg.chain.taper_range_km);
  BlockSampler sampler(data, ladder, cfg.chain);

  auto tracked = [](const ModelState& s) { return std::array<double, 4>{s.mu0, s.sigma2, s.coreg.c1, s.tau0}; };
  const std::array<const char*, 4> names{"mu0", "sigma2", "c1", "tau0"};
  constexpr int kMoments = 8;  // mean and second moment of each tracked parameter

  auto moments = [&](const ModelState& s) {
    const auto v = tracked(s);
    std::array<double, kMoments> m{};
    for (int k = 0; k < 4; ++k) {
      m[2 * k] = v[k];
      m[2 * k + 1] = v[k] * v[k];
    }
    return m;
  };

  // Marginal-conditional: independent prior draws.
  std::array<double, kMoments> mc_sum{}, mc_sq{};
  for (int i = 0; i < cfg.n_prior_draws; ++i) {
    const auto m = moments(draw_from_prior(cfg.chain.priors, gp, cfg.n_days, rng));
    for (int k = 0; k < kMoments; ++k) {
      mc_sum[k] += m[k];
      mc_sq[k] += m[k] * m[k];
    }
  }

  // Successive-conditional chain. A sweep that breaks down numerically ends
  // the chain; moments are then compared over the completed cycles.
  std::vector<std::array<double, kMoments>> trace;
  trace.reserve(static_cast<std::size_t>(cfg.n_cycles));
  ModelState s = draw_from_prior(cfg.chain.priors, gp, cfg.n_days, rng);
  draw_response(s, data, rng);
  for (int c = 0; c < cfg.n_cycles; ++c) {
    try {
      sweep(sampler, s, rng);
    } catch (const std::exception& e) {
      report.aborted_at = c;
      report.abort_reason = e.what();
      break;
    }
    draw_response(s, data, rng);
    trace.push_back(moments(s));
  }
  report.cycles = static_cast<int>(trace.size());

  const int batches = std::max(2, std::min(cfg.n_batches, report.cycles / 2));
  const int batch_len = std::max(1, report.cycles / batches);
  const int used = batches * batch_len;
  for (int k = 0; k < kMoments; ++k) {
    const double np = cfg.n_prior_draws;
    const double mc_mean = mc_sum[k] / np;
    const double mc_var = std::max(0.0, mc_sq[k] / np - mc_mean * mc_mean) * np / (np - 1.0);
    MomentCheck check;
    check.name = std::string(names[static_cast<std::size_t>(k / 2)]) + (k % 2 ? "^2" : "");
    check.prior_mean = mc_mean;
    if (used < 4) {
      check.sampler_mean = std::numeric_limits<double>::quiet_NaN();
      check.z = std::numeric_limits<double>::infinity();
      report.checks.push_back(check);
      continue;
    }
    double sc_mean = 0.0;
    std::vector<double> bm(static_cast<std::size_t>(batches), 0.0);
    for (int c = 0; c < used; ++c) {
      const double v = trace[static_cast<std::size_t>(c)][k];
      sc_mean += v / used;
      bm[static_cast<std::size_t>(c / batch_len)] += v / batch_len;
    }
    double bvar = 0.0;
    for (double b : bm) bvar += (b - sc_mean) * (b - sc_mean);
    bvar /= (batches - 1);
    const double se2 = mc_var / np + bvar / batches;
    check.sampler_mean = sc_mean;
    check.z = se2 > 0.0 ? (sc_mean - mc_mean) / std::sqrt(se2) : 0.0;
    if (!std::isfinite(check.z)) check.z = std::numeric_limits<double>::infinity();
    report.checks.push_back(check);
  }
  return report;
}

/// Sampler sweep with the residual sum of squares doubled in the sigma2
/// update; the tester must flag it.
inline void sigma2_bug_sweep(BlockSampler& sampler, ModelState& s, Rng& rng) {
  const Priors& p = sampler.config().priors;
  sampler.update_fixed_effects(s, rng);
  const double ssr = 2.0 * sampler.residual_sum_of_squares(s);
  s.sigma2 = inv_gamma_draw(rng, p.sigma2_shape + 0.5 * sampler.data().num_records(), p.sigma2_scale + 0.5 * ssr);
  sampler.update_latent_fields(s, rng);
  sampler.update_coreg(s, rng);
  sampler.update_temporal(s, rng);
  sampler.update_tau(s, rng);
  sampler.update_phi(s, rng);
}

}  // namespace downscaler::synth
