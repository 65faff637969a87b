#pragma once

// Per-block Gibbs/Metropolis sampler for
//
//   PM(s,t) = mu0 + c1 W1(s) + b0(t)
//           + (mu1 + c2 W1(s) + c3 W2(s) + b1(t)) AOD(s,t)
//           + gamma^T Z(s,t) + eps,        eps ~ N(0, sigma2)
//
// W1, W2 ~ independent unit-variance tapered-exponential GPs with ranges on a
// discrete grid; b0, b1 ~ RW1 with precisions tau0, tau1 and sum-to-zero.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/random.hpp"
#include "downscaler/spatial_cov.hpp"
#include "downscaler/stats.hpp"
#include "downscaler/temporal_rw.hpp"

namespace downscaler {

inline constexpr int kNumFixedEffects = 2 + kNumCovariates;  // intercept, aod, z

inline std::string fixed_effect_name(int j) {
  if (j == 0) return "intercept";
  if (j == 1) return "aod";
  return std::string(kCovariateNames[j - 2]);
}

// ---------------------------------------------------------------------------
// Block data

/// Design of one block: complete, standardized records inside the window.
/// Records at coincident coordinates share one latent site.
struct BlockData {
  std::vector<Site> sites;
  int num_days = 0;
  std::vector<int> site_index;  // per record
  std::vector<int> day_index;   // per record
  Eigen::VectorXd y;
  Eigen::VectorXd aod;
  Eigen::MatrixXd design;  // n x 12: [1, aod, z]
  Eigen::MatrixXd gram;    // design^T design

  int num_records() const { return static_cast<int>(y.size()); }
  int num_sites() const { return static_cast<int>(sites.size()); }

  /// Latent index for an id or exact coordinate match, if any.
  std::optional<int> find_site(const Site& s) const {
    for (int i = 0; i < num_sites(); ++i)
      if (sites[i].id == s.id || (sites[i].lon == s.lon && sites[i].lat == s.lat)) return i;
    return std::nullopt;
  }
};

namespace detail {

inline void check_design_rank(const Eigen::MatrixXd& x) {
  if (x.rows() < x.cols())
    throw NumericalError("fixed-effect design is rank deficient: " + std::to_string(x.rows()) +
                         " records for " + std::to_string(x.cols()) + " coefficients");
  Eigen::VectorXd scale(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double norm = x.col(j).norm();
    scale[j] = norm > 0.0 ? 1.0 / norm : 1.0;
  }
  const Eigen::MatrixXd scaled = x * scale.asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  const Eigen::Index rank = qr.rank();
  if (rank == x.cols()) return;
  std::string names;
  const auto& perm = qr.colsPermutation().indices();
  for (Eigen::Index k = rank; k < x.cols(); ++k) names += (names.empty() ? "" : ", ") + fixed_effect_name(perm[k]);
  throw NumericalError("fixed-effect design is rank deficient; collinear columns: " + names);
}

}  // namespace detail

inline BlockData make_block_data(std::span<const MonitorRecord> records, const TemporalWindow& window) {
  std::vector<const MonitorRecord*> rows;
  for (const auto& r : records) {
    if (!r.standardized) throw InputError("make_block_data expects standardized records");
    if (!r.complete() || !window.contains(r.day)) continue;
    rows.push_back(&r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const MonitorRecord* a, const MonitorRecord* b) {
    if (a->site.id != b->site.id) return a->site.id < b->site.id;
    return days_between(b->day, a->day) < 0;
  });

  BlockData data;
  data.num_days = window.num_days();
  std::map<std::pair<double, double>, int> by_coord;
  const auto n = static_cast<Eigen::Index>(rows.size());
  data.y.resize(n);
  data.aod.resize(n);
  data.design.resize(n, kNumFixedEffects);
  for (Eigen::Index i = 0; i < n; ++i) {
    const MonitorRecord& r = *rows[static_cast<std::size_t>(i)];
    auto [it, inserted] = by_coord.emplace(std::make_pair(r.site.lon, r.site.lat), data.num_sites());
    if (inserted) data.sites.push_back(r.site);
    data.site_index.push_back(it->second);
    data.day_index.push_back(window.day_index(r.day));
    data.y[i] = r.pm25;
    data.aod[i] = *r.aod;
    data.design(i, 0) = 1.0;
    data.design(i, 1) = *r.aod;
    for (int j = 0; j < kNumCovariates; ++j) data.design(i, 2 + j) = r.z[j];
  }
  data.gram = data.design.transpose() * data.design;
  return data;
}

// ---------------------------------------------------------------------------
// Configuration and state

struct Priors {
  double fixed_effect_var = 1e6;  // mu0, mu1, gamma ~ N(0, var)
  double coreg_var = 1e6;         // c ~ N(0, var), c1 and c3 truncated to > 0
  double sigma2_shape = 0.001;    // sigma2 ~ IG(shape, scale)
  double sigma2_scale = 0.001;
  double tau_shape = 0.001;  // tau ~ Gamma(shape, rate)
  double tau_rate = 0.001;
};

struct ChainConfig {
  int n_iter = 5000;
  int n_burnin = 2000;
  int thin = 3;
  std::uint64_t master_seed = 2011;
  std::vector<double> phi_grid{50.0, 100.0, 200.0, 400.0, 800.0};
  double taper_range_km = 500.0;
  Priors priors;

  void validate() const {
    if (!(n_iter > n_burnin && n_burnin >= 0)) throw ParameterError("chain config: need n_iter > n_burnin >= 0");
    if (thin < 1) throw ParameterError("chain config: thin must be >= 1");
    if (phi_grid.empty()) throw ParameterError("chain config: phi grid must be non-empty");
    for (std::size_t k = 0; k < phi_grid.size(); ++k) {
      if (!(phi_grid[k] > 0.0)) throw ParameterError("chain config: phi grid values must be positive");
      if (k > 0 && !(phi_grid[k] > phi_grid[k - 1])) throw ParameterError("chain config: phi grid must be ascending");
    }
    if (!(taper_range_km > 0.0)) throw ParameterError("chain config: taper range must be positive");
    const Priors& p = priors;
    if (!(p.fixed_effect_var > 0 && p.coreg_var > 0 && p.sigma2_shape > 0 && p.sigma2_scale > 0 && p.tau_shape > 0 &&
          p.tau_rate > 0))
      throw ParameterError("chain config: prior hyperparameters must be positive");
  }

  int retained() const { return (n_iter - n_burnin + thin - 1) / thin; }
};

struct CoregCoeffs {
  double c1 = 1.0;  // > 0
  double c2 = 0.0;
  double c3 = 1.0;  // > 0
};

struct ModelState {
  double mu0 = 0.0;
  double mu1 = 0.0;
  Eigen::VectorXd gamma = Eigen::VectorXd::Zero(kNumCovariates);
  CoregCoeffs coreg;
  Eigen::VectorXd w1;
  Eigen::VectorXd w2;
  Eigen::VectorXd beta0;  // per day, sums to zero
  Eigen::VectorXd beta1;
  double tau0 = 1.0;
  double tau1 = 1.0;
  double sigma2 = 1.0;
  int phi1 = 0;  // index into the phi grid
  int phi2 = 0;

  static ModelState zeros(int num_sites, int num_days) {
    ModelState s;
    s.coreg = {0.0, 0.0, 0.0};
    s.w1 = s.w2 = Eigen::VectorXd::Zero(num_sites);
    s.beta0 = s.beta1 = Eigen::VectorXd::Zero(num_days);
    return s;
  }

  Eigen::VectorXd fixed_effects() const {
    Eigen::VectorXd theta(kNumFixedEffects);
    theta[0] = mu0;
    theta[1] = mu1;
    theta.tail(kNumCovariates) = gamma;
    return theta;
  }
};

/// Names of the scalar parameters reported in summaries, in order.
inline std::vector<std::string> scalar_parameter_names() {
  std::vector<std::string> names{"mu0", "mu1"};
  for (int j = 0; j < kNumCovariates; ++j) names.push_back("gamma_" + std::string(kCovariateNames[j]));
  for (const char* n : {"c1", "c2", "c3", "sigma2", "tau0", "tau1", "phi1_km", "phi2_km"}) names.emplace_back(n);
  return names;
}

inline std::vector<double> scalar_parameters(const ModelState& s, const std::vector<double>& phi_grid) {
  std::vector<double> v{s.mu0, s.mu1};
  for (int j = 0; j < kNumCovariates; ++j) v.push_back(s.gamma[j]);
  v.insert(v.end(), {s.coreg.c1, s.coreg.c2, s.coreg.c3, s.sigma2, s.tau0, s.tau1,
                     phi_grid[static_cast<std::size_t>(s.phi1)], phi_grid[static_cast<std::size_t>(s.phi2)]});
  return v;
}

// ---------------------------------------------------------------------------
// Linear predictor

/// Mean PM2.5 for latent values w1, w2 at the record's site and its day.
inline double compose_predictor(const ModelState& s, double w1, double w2, int day, double aod,
                                const Eigen::Ref<const Eigen::VectorXd>& z) {
  const double intercept = s.mu0 + s.coreg.c1 * w1 + s.beta0[day];
  const double slope = s.mu1 + s.coreg.c2 * w1 + s.coreg.c3 * w2 + s.beta1[day];
  return intercept + slope * aod + s.gamma.dot(z);
}

inline double linear_predictor(const ModelState& s, int site, int day, double aod,
                               const Eigen::Ref<const Eigen::VectorXd>& z) {
  if (site < 0 || site >= s.w1.size()) throw InputError("linear_predictor: unknown site index " + std::to_string(site));
  if (day < 0 || day >= s.beta0.size()) throw InputError("linear_predictor: day index " + std::to_string(day) + " outside window");
  return compose_predictor(s, s.w1[site], s.w2[site], day, aod, z);
}

inline double linear_predictor(const ModelState& s, const BlockData& data, int record) {
  return linear_predictor(s, data.site_index[static_cast<std::size_t>(record)],
                          data.day_index[static_cast<std::size_t>(record)], data.aod[record],
                          data.design.row(record).tail(kNumCovariates).transpose());
}

// ---------------------------------------------------------------------------
// Sampler

struct PhiMove {
  bool proposed = false;  // false when the proposal fell off the grid
  bool accepted = false;
};

class BlockSampler {
 public:
  BlockSampler(const BlockData& data, const CovarianceLadder& ladder, const ChainConfig& config)
      : data_(data), ladder_(ladder), config_(config), b_solvers_(ladder.covs.size()) {
    config_.validate();
    if (ladder_.size() != static_cast<int>(config_.phi_grid.size()))
      throw InputError("covariance ladder does not match the phi grid");
    if (data_.num_sites() != (ladder_.size() ? ladder_[0].size() : 0))
      throw InputError("covariance ladder sites do not match block sites");
    if (data_.num_days < 2) throw InputError("block needs at least 2 days");
    detail::check_design_rank(data_.design);
  }

  const BlockData& data() const { return data_; }
  const ChainConfig& config() const { return config_; }
  const CovarianceLadder& ladder() const { return ladder_; }

  /// Deterministic starting point.
  ModelState initial_state() const {
    ModelState s = ModelState::zeros(data_.num_sites(), data_.num_days);
    const double ybar = data_.y.mean();
    s.mu0 = ybar;
    s.coreg = {1.0, 0.0, 1.0};
    const double var = (data_.y.array() - ybar).square().sum() / std::max(1, data_.num_records() - 1);
    s.sigma2 = var > 0.0 ? var : 1.0;
    s.tau0 = s.tau1 = 1.0;
    s.phi1 = s.phi2 = ladder_.size() / 2;
    return s;
  }

  // Per-record components of the linear predictor.

  Eigen::VectorXd fixed_part(const ModelState& s) const { return data_.design * s.fixed_effects(); }

  Eigen::VectorXd spatial_part(const ModelState& s) const {
    Eigen::VectorXd out(data_.num_records());
    for (int r = 0; r < data_.num_records(); ++r) {
      const int i = data_.site_index[static_cast<std::size_t>(r)];
      out[r] = s.coreg.c1 * s.w1[i] + (s.coreg.c2 * s.w1[i] + s.coreg.c3 * s.w2[i]) * data_.aod[r];
    }
    return out;
  }

  Eigen::VectorXd temporal_part(const ModelState& s) const {
    Eigen::VectorXd out(data_.num_records());
    for (int r = 0; r < data_.num_records(); ++r) {
      const int t = data_.day_index[static_cast<std::size_t>(r)];
      out[r] = s.beta0[t] + s.beta1[t] * data_.aod[r];
    }
    return out;
  }

  Eigen::VectorXd mean_vector(const ModelState& s) const { return fixed_part(s) + spatial_part(s) + temporal_part(s); }

  double residual_sum_of_squares(const ModelState& s) const { return (data_.y - mean_vector(s)).squaredNorm(); }

  double log_likelihood(const ModelState& s) const {
    const double n = data_.num_records();
    return -0.5 * n * std::log(2.0 * std::numbers::pi * s.sigma2) - 0.5 * residual_sum_of_squares(s) / s.sigma2;
  }

  /// (mu0, mu1, gamma) | rest ~ N(V X^T R / sigma2, V), V = (X^T X / sigma2 + P0)^{-1}.
  void update_fixed_effects(ModelState& s, Rng& rng) const {
    const Eigen::VectorXd resid = data_.y - spatial_part(s) - temporal_part(s);
    Eigen::MatrixXd precision = data_.gram / s.sigma2;
    precision.diagonal().array() += 1.0 / config_.priors.fixed_effect_var;
    const Eigen::VectorXd rhs = data_.design.transpose() * resid / s.sigma2;
    const Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw NumericalError("fixed-effect precision is not positive definite");
    const Eigen::VectorXd mean = llt.solve(rhs);
    const Eigen::VectorXd theta =
        mean + llt.matrixU().solve(std_normal_vector(rng, kNumFixedEffects));
    s.mu0 = theta[0];
    s.mu1 = theta[1];
    s.gamma = theta.tail(kNumCovariates);
  }

  /// sigma2 | rest ~ IG(a0 + n/2, b0 + SSR/2).
  void update_sigma2(ModelState& s, Rng& rng) const {
    const double ssr = residual_sum_of_squares(s);
    s.sigma2 = inv_gamma_draw(rng, config_.priors.sigma2_shape + 0.5 * data_.num_records(),
                              config_.priors.sigma2_scale + 0.5 * ssr);
  }

  /// Field-at-a-time Gaussian draws of W1 then W2.
  void update_latent_fields(ModelState& s, Rng& rng) {
    const int n = data_.num_records();
    const Eigen::VectorXd base = data_.y - fixed_part(s) - temporal_part(s);
    {
      Eigen::VectorXd coef(n), resid(n);
      for (int r = 0; r < n; ++r) {
        const int i = data_.site_index[static_cast<std::size_t>(r)];
        coef[r] = s.coreg.c1 + s.coreg.c2 * data_.aod[r];
        resid[r] = base[r] - s.coreg.c3 * data_.aod[r] * s.w2[i];
      }
      s.w1 = draw_field(s.phi1, coef, resid, s.sigma2, rng);
    }
    {
      Eigen::VectorXd coef(n), resid(n);
      for (int r = 0; r < n; ++r) {
        const int i = data_.site_index[static_cast<std::size_t>(r)];
        coef[r] = s.coreg.c3 * data_.aod[r];
        resid[r] = base[r] - (s.coreg.c1 + s.coreg.c2 * data_.aod[r]) * s.w1[i];
      }
      s.w2 = draw_field(s.phi2, coef, resid, s.sigma2, rng);
    }
  }

  /// Latent-field full conditional: prior N(0, C), pseudo-observations
  /// resid_r = coef_r W(site_r) + eps_r. Posterior precision C^{-1} + H with
  /// H = diag(h). Sampled without forming C^{-1}:
  ///   w ~ N(0, C), eta ~ N(0, I), B = I + D C D, D = H^{1/2}
  ///   x = w + C D B^{-1} (g - D w + eta),  g = D^{-1} b
  /// which has mean C D B^{-1} g = (C^{-1} + H)^{-1} b and covariance (C^{-1} + H)^{-1}.
  Eigen::VectorXd draw_field(int phi_index, const Eigen::VectorXd& coef, const Eigen::VectorXd& resid, double sigma2,
                             Rng& rng) {
    const TaperedCovariance& cov = ladder_[phi_index];
    const int m = data_.num_sites();
    Eigen::VectorXd h = Eigen::VectorXd::Zero(m), b = Eigen::VectorXd::Zero(m);
    for (int r = 0; r < data_.num_records(); ++r) {
      const int i = data_.site_index[static_cast<std::size_t>(r)];
      h[i] += coef[r] * coef[r] / sigma2;
      b[i] += coef[r] * resid[r] / sigma2;
    }
    const Eigen::VectorXd d = h.array().sqrt().matrix();
    Eigen::VectorXd g(m);
    for (int i = 0; i < m; ++i) g[i] = d[i] > 0.0 ? b[i] / d[i] : 0.0;

    const Eigen::VectorXd w = cov.correlate(std_normal_vector(rng, m));
    const Eigen::VectorXd eta = std_normal_vector(rng, m);

    SparseMatrix bmat = cov.matrix();
    const double jitter = cov.jitter();
    for (int k = 0; k < bmat.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(bmat, k); it; ++it) {
        const double c = it.row() == it.col() ? it.value() + jitter : it.value();
        it.valueRef() = d[it.row()] * c * d[it.col()] + (it.row() == it.col() ? 1.0 : 0.0);
      }
    auto& solver = b_solvers_[static_cast<std::size_t>(phi_index)];
    if (!solver) {
      solver = std::make_unique<SparseLdlt>();
      solver->analyzePattern(bmat);
    }
    solver->factorize(bmat);
    if (solver->info() != Eigen::Success) throw NumericalError("latent-field update: factorization failed");
    const Eigen::VectorXd u = d.cwiseProduct(solver->solve(g - d.cwiseProduct(w) + eta));
    return w + cov.matrix() * u + jitter * u;
  }

  /// Coordinate-wise conjugate draws of c1, c2, c3; c1 and c3 truncated to (0, inf).
  void update_coreg(ModelState& s, Rng& rng) const {
    const int n = data_.num_records();
    const Eigen::VectorXd base = data_.y - fixed_part(s) - temporal_part(s);
    Eigen::VectorXd u1(n), u2(n), u3(n);
    for (int r = 0; r < n; ++r) {
      const int i = data_.site_index[static_cast<std::size_t>(r)];
      u1[r] = s.w1[i];
      u2[r] = data_.aod[r] * s.w1[i];
      u3[r] = data_.aod[r] * s.w2[i];
    }
    const double prior_prec = 1.0 / config_.priors.coreg_var;
    auto draw = [&](const Eigen::VectorXd& u, const Eigen::VectorXd& resid, bool positive) {
      const double prec = u.squaredNorm() / s.sigma2 + prior_prec;
      const double mean = u.dot(resid) / s.sigma2 / prec;
      const double sd = 1.0 / std::sqrt(prec);
      return positive ? truncated_normal_below(rng, mean, sd, 0.0) : mean + sd * std_normal(rng);
    };
    s.coreg.c1 = draw(u1, base - s.coreg.c2 * u2 - s.coreg.c3 * u3, true);
    s.coreg.c2 = draw(u2, base - s.coreg.c1 * u1 - s.coreg.c3 * u3, false);
    s.coreg.c3 = draw(u3, base - s.coreg.c1 * u1 - s.coreg.c2 * u2, true);
  }

  /// Joint banded draws of b0 then b1.
  void update_temporal(ModelState& s, Rng& rng) const {
    const int n = data_.num_records();
    const Eigen::VectorXd base = data_.y - fixed_part(s) - spatial_part(s);
    {
      Rw1Data d = Rw1Data::zeros(data_.num_days);
      for (int r = 0; r < n; ++r) {
        const int t = data_.day_index[static_cast<std::size_t>(r)];
        d.sum_sq_coef[t] += 1.0;
        d.sum_coef_resid[t] += base[r] - s.beta1[t] * data_.aod[r];
      }
      s.beta0 = sample_rw1_conditional(d, s.tau0, s.sigma2, rng);
    }
    {
      Rw1Data d = Rw1Data::zeros(data_.num_days);
      for (int r = 0; r < n; ++r) {
        const int t = data_.day_index[static_cast<std::size_t>(r)];
        const double a = data_.aod[r];
        d.sum_sq_coef[t] += a * a;
        d.sum_coef_resid[t] += a * (base[r] - s.beta0[t]);
      }
      s.beta1 = sample_rw1_conditional(d, s.tau1, s.sigma2, rng);
    }
  }

  /// tau | b ~ Gamma(a + (T - 1)/2, r + b^T Q b / 2).
  void update_tau(ModelState& s, Rng& rng) const {
    const double shape = config_.priors.tau_shape + 0.5 * (data_.num_days - 1);
    s.tau0 = gamma_draw(rng, shape, config_.priors.tau_rate + 0.5 * rw1_quad_form(s.beta0));
    s.tau1 = gamma_draw(rng, shape, config_.priors.tau_rate + 0.5 * rw1_quad_form(s.beta1));
  }

  /// Random-walk Metropolis on the phi grid: propose index +-1 with equal
  /// probability; off-grid proposals are rejected. Target is N(W; 0, C(phi)).
  std::pair<PhiMove, PhiMove> update_phi(ModelState& s, Rng& rng) const {
    auto step = [&](int& index, const Eigen::VectorXd& w) {
      PhiMove move;
      const int proposal = index + (uniform01(rng) < 0.5 ? -1 : 1);
      const double u = uniform01(rng);
      if (proposal < 0 || proposal >= ladder_.size()) return move;
      move.proposed = true;
      const double log_ratio = ladder_[proposal].log_density(w) - ladder_[index].log_density(w);
      if (std::log(u) < log_ratio) {
        index = proposal;
        move.accepted = true;
      }
      return move;
    };
    PhiMove m1 = step(s.phi1, s.w1);
    PhiMove m2 = step(s.phi2, s.w2);
    return {m1, m2};
  }

  /// One systematic scan. Returns the phi moves for acceptance bookkeeping.
  std::pair<PhiMove, PhiMove> sweep(ModelState& s, Rng& rng) {
    update_fixed_effects(s, rng);
    update_sigma2(s, rng);
    update_latent_fields(s, rng);
    update_coreg(s, rng);
    update_temporal(s, rng);
    update_tau(s, rng);
    return update_phi(s, rng);
  }

 private:
  const BlockData& data_;
  const CovarianceLadder& ladder_;
  ChainConfig config_;
  std::vector<std::unique_ptr<SparseLdlt>> b_solvers_;
};

// ---------------------------------------------------------------------------
// Chains

struct PosteriorDraws {
  std::vector<ModelState> states;         // retained (post burn-in, thinned)
  std::vector<double> log_likelihood;     // per retained draw
  std::vector<double> trace;              // log-likelihood at every iteration
  std::vector<double> accept_phi1_trace;  // running acceptance rate per iteration
  std::vector<double> accept_phi2_trace;
  double accept_phi1 = 0.0;
  double accept_phi2 = 0.0;
  std::vector<double> phi_grid;
  std::vector<double> jitter;  // diagonal jitter used for each phi candidate

  std::size_t size() const { return states.size(); }
};

namespace detail {

inline bool all_finite(const Eigen::VectorXd& v) { return v.allFinite(); }

inline void check_state(const ModelState& s, int iteration, const char* update) {
  bool ok = true;
  if (std::string_view(update) == "fixed_effects") ok = std::isfinite(s.mu0) && std::isfinite(s.mu1) && all_finite(s.gamma);
  else if (std::string_view(update) == "sigma2") ok = std::isfinite(s.sigma2) && s.sigma2 > 0.0;
  else if (std::string_view(update) == "latent_fields") ok = all_finite(s.w1) && all_finite(s.w2);
  else if (std::string_view(update) == "coreg") ok = std::isfinite(s.coreg.c1) && std::isfinite(s.coreg.c2) && std::isfinite(s.coreg.c3);
  else if (std::string_view(update) == "temporal") ok = all_finite(s.beta0) && all_finite(s.beta1);
  else if (std::string_view(update) == "tau") ok = std::isfinite(s.tau0) && std::isfinite(s.tau1) && s.tau0 > 0.0 && s.tau1 > 0.0;
  if (!ok)
    throw NumericalError("chain diverged at iteration " + std::to_string(iteration) + " in update " + update);
}

}  // namespace detail

/// Runs one chain from the sampler's initial state with the given stream seed.
inline PosteriorDraws run_chain(BlockSampler& sampler, std::uint64_t stream_seed) {
  const ChainConfig& cfg = sampler.config();
  Rng rng(stream_seed);
  ModelState s = sampler.initial_state();
  PosteriorDraws out;
  out.phi_grid = cfg.phi_grid;
  for (int k = 0; k < sampler.ladder().size(); ++k) out.jitter.push_back(sampler.ladder()[k].jitter());
  out.states.reserve(static_cast<std::size_t>(cfg.retained()));
  out.trace.reserve(static_cast<std::size_t>(cfg.n_iter));
  long proposed1 = 0, proposed2 = 0, accepted1 = 0, accepted2 = 0;
  for (int it = 0; it < cfg.n_iter; ++it) {
    sampler.update_fixed_effects(s, rng);
    detail::check_state(s, it, "fixed_effects");
    sampler.update_sigma2(s, rng);
    detail::check_state(s, it, "sigma2");
    sampler.update_latent_fields(s, rng);
    detail::check_state(s, it, "latent_fields");
    sampler.update_coreg(s, rng);
    detail::check_state(s, it, "coreg");
    sampler.update_temporal(s, rng);
    detail::check_state(s, it, "temporal");
    sampler.update_tau(s, rng);
    detail::check_state(s, it, "tau");
    const auto [m1, m2] = sampler.update_phi(s, rng);
    proposed1 += 1;
    proposed2 += 1;
    accepted1 += m1.accepted;
    accepted2 += m2.accepted;

    const double ll = sampler.log_likelihood(s);
    if (!std::isfinite(ll))
      throw NumericalError("chain diverged at iteration " + std::to_string(it) + ": non-finite log-likelihood");
    out.trace.push_back(ll);
    out.accept_phi1_trace.push_back(static_cast<double>(accepted1) / static_cast<double>(proposed1));
    out.accept_phi2_trace.push_back(static_cast<double>(accepted2) / static_cast<double>(proposed2));
    if (it >= cfg.n_burnin && (it - cfg.n_burnin) % cfg.thin == 0) {
      out.states.push_back(s);
      out.log_likelihood.push_back(ll);
    }
  }
  out.accept_phi1 = out.accept_phi1_trace.back();
  out.accept_phi2 = out.accept_phi2_trace.back();
  return out;
}

inline PosteriorDraws run_chain(const BlockData& data, const ChainConfig& config, std::uint64_t stream_seed) {
  config.validate();
  const CovarianceLadder ladder = CovarianceLadder::build(data.sites, config.phi_grid, config.taper_range_km);
  BlockSampler sampler(data, ladder, config);
  return run_chain(sampler, stream_seed);
}

inline PosteriorDraws run_chain(const BlockData& data, const ChainConfig& config) {
  return run_chain(data, config, config.master_seed);
}

// ---------------------------------------------------------------------------
// Summaries

struct ParameterSummary {
  std::string name;
  DrawSummary stats;
  double ess = 0.0;
};

struct PosteriorSummary {
  std::vector<ParameterSummary> parameters;

  const ParameterSummary& at(const std::string& name) const {
    for (const auto& p : parameters)
      if (p.name == name) return p;
    throw InputError("no parameter named '" + name + "'");
  }
};

/// Regression coefficients (fixed effects and coregionalization), the
/// parameters that carry a significance flag in coefficient tables.
inline bool is_coefficient(const std::string& name) {
  return name == "mu0" || name == "mu1" || name.rfind("gamma_", 0) == 0 || name == "c1" || name == "c2" || name == "c3";
}

/// Per-parameter mean, SD (n - 1), 5/95 and 2.5/97.5 percentiles (linear
/// interpolation between order statistics) and effective sample size.
inline PosteriorSummary summarize(const PosteriorDraws& draws) {
  if (draws.size() < 2) throw InputError("summarize: need at least 2 retained draws");
  const auto names = scalar_parameter_names();
  std::vector<std::vector<double>> columns(names.size());
  for (const ModelState& s : draws.states) {
    const auto v = scalar_parameters(s, draws.phi_grid);
    for (std::size_t k = 0; k < v.size(); ++k) columns[k].push_back(v[k]);
  }
  PosteriorSummary out;
  for (std::size_t k = 0; k < names.size(); ++k)
    out.parameters.push_back({names[k], summarize_draws(columns[k]), effective_sample_size(columns[k])});
  return out;
}

}  // namespace downscaler
