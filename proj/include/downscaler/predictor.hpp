#pragma once

// Posterior-predictive surfaces: per-draw composition at target sites,
// per-draw blending across overlapping blocks, and per-draw temporal
// aggregation before summarizing across draws.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/random.hpp"
#include "downscaler/spatial_cov.hpp"
#include "downscaler/stats.hpp"
#include "downscaler/transform.hpp"

namespace downscaler {

/// Latent: linear-predictor draws (maps). Predictive: adds N(0, sigma2) noise
/// per draw (interval calibration and cross-validation).
enum class PredictionMode { Latent, Predictive };

struct PredictOptions {
  PredictionMode mode = PredictionMode::Latent;
  /// Draw W at a target from its kriging conditional; off plugs in the
  /// conditional mean (used by oracle comparisons).
  bool sample_latent = true;
  std::uint64_t seed = 0;
};

/// Everything a fitted block contributes to prediction.
struct FittedBlock {
  BlockSpec spec;
  TransformSpec transform;
  std::vector<Site> sites;  // latent sites, in sampler order
  ChainConfig config;
  PosteriorDraws draws;
  int num_records = 0;
};

struct CellPrediction {
  Site cell;
  std::string period;  // date, season name or "annual"
  double mean = 0.0;
  double sd = 0.0;
  double pi_lo = 0.0;
  double pi_hi = 0.0;
  int n_blocks = 0;
};

/// Summary of a vector of per-draw values at one cell and period.
inline CellPrediction summarize_cell(const Site& cell, std::string period, std::span<const double> draws,
                                     int n_blocks) {
  const DrawSummary s = summarize_draws(draws);
  return {cell, std::move(period), s.mean, s.sd, s.q05, s.q95, n_blocks};
}

/// Per-draw kriging conditionals of W1 and W2 at one target site.
struct LatentAtSite {
  std::vector<double> w1_mean, w1_var, w2_mean, w2_var;
};

class BlockPredictor {
 public:
  explicit BlockPredictor(const FittedBlock& fit) : fit_(fit) {
    if (fit.draws.size() == 0) throw InputError("block " + fit.spec.name() + " has no retained draws");
    ladder_ = CovarianceLadder::build(fit.sites, fit.config.phi_grid, fit.config.taper_range_km);
  }

  const FittedBlock& fit() const { return fit_; }
  int num_draws() const { return static_cast<int>(fit_.draws.size()); }

  LatentAtSite latent_at(const Site& target) const {
    std::vector<KrigingWeights> weights;
    weights.reserve(static_cast<std::size_t>(ladder_.size()));
    for (int k = 0; k < ladder_.size(); ++k) weights.push_back(kriging_weights(ladder_[k], target));
    LatentAtSite out;
    for (const ModelState& s : fit_.draws.states) {
      const auto& k1 = weights[static_cast<std::size_t>(s.phi1)];
      const auto& k2 = weights[static_cast<std::size_t>(s.phi2)];
      out.w1_mean.push_back(k1.weights.dot(s.w1));
      out.w1_var.push_back(k1.variance);
      out.w2_mean.push_back(k2.weights.dot(s.w2));
      out.w2_var.push_back(k2.variance);
    }
    return out;
  }

  /// Per-draw latent values (no residual noise) for rows that all share
  /// `target` as their site. Rows outside the block window or with missing
  /// AOD/covariates yield nullopt. One latent draw per target is shared by
  /// every day of the call.
  template <typename Row>
  std::vector<std::optional<std::vector<double>>> predict_site(const Site& target, std::span<const Row* const> rows,
                                                               const PredictOptions& opt) const {
    const LatentAtSite latent = latent_at(target);
    const int nd = num_draws();
    std::vector<double> w1(static_cast<std::size_t>(nd)), w2(static_cast<std::size_t>(nd));
    Rng rng(derive_seed(opt.seed, {static_cast<std::uint64_t>(fit_.spec.ordinal()), fnv1a(target.id)}));
    for (std::size_t k = 0; k < w1.size(); ++k) {
      const double z1 = std_normal(rng), z2 = std_normal(rng);
      w1[k] = latent.w1_mean[k] + (opt.sample_latent ? std::sqrt(latent.w1_var[k]) * z1 : 0.0);
      w2[k] = latent.w2_mean[k] + (opt.sample_latent ? std::sqrt(latent.w2_var[k]) * z2 : 0.0);
    }

    std::vector<std::optional<std::vector<double>>> out;
    out.reserve(rows.size());
    for (const Row* row : rows) {
      if (!fit_.spec.window.contains(row->day) || !row->complete()) {
        out.emplace_back(std::nullopt);
        continue;
      }
      Row std_row = *row;
      if (!row->standardized) {
        try {
          std_row = apply_transform(fit_.transform, *row);
        } catch (const InputError&) {
          out.emplace_back(std::nullopt);  // covariate outside the transform's domain
          continue;
        }
      }
      const Eigen::Map<const Eigen::VectorXd> z(std_row.z.data(), kNumCovariates);
      const int day = fit_.spec.window.day_index(row->day);
      std::vector<double> values(w1.size());
      for (std::size_t k = 0; k < values.size(); ++k)
        values[k] = compose_predictor(fit_.draws.states[k], w1[k], w2[k], day, *row->aod, z);
      out.emplace_back(std::move(values));
    }
    return out;
  }

  std::vector<double> sigma2_draws() const {
    std::vector<double> v;
    for (const ModelState& s : fit_.draws.states) v.push_back(s.sigma2);
    return v;
  }

 private:
  const FittedBlock& fit_;
  CovarianceLadder ladder_;
};

/// Unweighted per-draw mean over contributing blocks.
inline std::vector<double> blend(std::span<const std::vector<double>> per_block) {
  if (per_block.empty()) throw InputError("blend: no contributing blocks");
  const std::size_t nd = per_block.front().size();
  std::vector<double> out(nd, 0.0);
  for (const auto& b : per_block) {
    if (b.size() != nd) throw InputError("blend: blocks have different numbers of draws");
    for (std::size_t k = 0; k < nd; ++k) out[k] += b[k];
  }
  for (double& v : out) v /= static_cast<double>(per_block.size());
  return out;
}

struct BlendedDraws {
  std::vector<double> values;
  int n_blocks = 0;
};

/// Blended per-draw values at one site over the given candidate blocks (the
/// caller passes only blocks whose core or buffer contains the site). Rows
/// no block can predict yield nullopt. In predictive mode one residual per
/// draw is added after blending, with variance equal to the per-draw mean of
/// the contributors' sigma2. Rows should be in date order.
template <typename Row>
std::vector<std::optional<BlendedDraws>> predict_blended(std::span<const BlockPredictor* const> blocks,
                                                         const Site& target, std::span<const Row* const> rows,
                                                         const PredictOptions& opt) {
  std::vector<std::vector<std::optional<std::vector<double>>>> per_block;
  std::vector<std::vector<double>> sigma2;
  for (const BlockPredictor* b : blocks) {
    per_block.push_back(b->predict_site<Row>(target, rows, opt));
    if (opt.mode == PredictionMode::Predictive) sigma2.push_back(b->sigma2_draws());
  }
  Rng noise(derive_seed(opt.seed, {fnv1a(target.id), 0x6e6f697365ULL}));
  std::vector<std::optional<BlendedDraws>> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::vector<double>> parts;
    std::vector<std::vector<double>> part_sigma2;
    for (std::size_t b = 0; b < per_block.size(); ++b) {
      if (!per_block[b][i]) continue;
      parts.push_back(std::move(*per_block[b][i]));
      if (opt.mode == PredictionMode::Predictive) part_sigma2.push_back(sigma2[b]);
    }
    if (parts.empty()) continue;
    BlendedDraws d{blend(parts), static_cast<int>(parts.size())};
    if (opt.mode == PredictionMode::Predictive) {
      const auto s2 = blend(part_sigma2);
      for (std::size_t k = 0; k < d.values.size(); ++k) d.values[k] += std::sqrt(s2[k]) * std_normal(noise);
    }
    out[i] = std::move(d);
  }
  return out;
}

struct BlockPrediction {
  /// Per input row: per-draw values, or nullopt when skipped.
  std::vector<std::optional<std::vector<double>>> draws;
  int skipped_missing = 0;
};

/// Per-draw predictions at grid cell-days of one block. Every cell must be a
/// core or buffer cell of the block; rows outside the window are skipped.
inline BlockPrediction predict_block(const FittedBlock& fit, std::span<const GridCellDay> cells,
                                     const PredictOptions& opt) {
  const BlockPredictor predictor(fit);
  const BlockPredictor* const blocks[] = {&predictor};
  std::map<std::string, std::vector<std::size_t>> by_cell;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!fit.spec.has_cell(cells[i].cell.id))
      throw InputError("cell '" + cells[i].cell.id + "' is outside block " + fit.spec.name());
    by_cell[cells[i].cell.id].push_back(i);
  }
  BlockPrediction out;
  out.draws.resize(cells.size());
  for (const auto& [id, idx] : by_cell) {
    std::vector<std::size_t> order = idx;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return days_between(cells[b].day, cells[a].day) < 0; });
    std::vector<const GridCellDay*> rows;
    for (std::size_t i : order) rows.push_back(&cells[i]);
    auto values = predict_blended<GridCellDay>(blocks, cells[order.front()].cell, rows, opt);
    for (std::size_t j = 0; j < order.size(); ++j) {
      const GridCellDay& row = cells[order[j]];
      if (!values[j]) {
        if (fit.spec.window.contains(row.day)) ++out.skipped_missing;
        continue;
      }
      out.draws[order[j]] = std::move(values[j]->values);
    }
  }
  return out;
}

/// Per-draw average over the days of a period.
inline std::vector<double> aggregate_draws(std::span<const std::vector<double>> daily) {
  if (daily.empty()) throw InputError("aggregate: empty period");
  const std::size_t nd = daily.front().size();
  std::vector<double> out(nd, 0.0);
  for (const auto& d : daily) {
    if (d.size() != nd) throw InputError("aggregate: days have different numbers of draws");
    for (std::size_t k = 0; k < nd; ++k) out[k] += d[k];
  }
  for (double& v : out) v /= static_cast<double>(daily.size());
  return out;
}

/// Period summary: average over days per draw, then mean/SD/90% interval
/// across draws, so the SD is the posterior SD of the period mean.
inline CellPrediction aggregate(const Site& cell, std::string period, std::span<const std::vector<double>> daily,
                                int n_blocks) {
  const auto per_draw = aggregate_draws(daily);
  return summarize_cell(cell, std::move(period), per_draw, n_blocks);
}

// Seasons are calendar seasons inside the study year (winter = Jan, Feb, Dec).
inline constexpr std::array<std::string_view, 4> kSeasonNames{"winter", "spring", "summer", "fall"};

inline int season_of(const Date& d) {
  const unsigned m = static_cast<unsigned>(d.month());
  if (m == 12 || m <= 2) return 0;
  if (m <= 5) return 1;
  if (m <= 8) return 2;
  return 3;
}

}  // namespace downscaler
