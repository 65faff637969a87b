#pragma once

// Random (R-CV) and spatial (S-CV) k-fold cross-validation with the metric
// suite: R^2, slope and intercept from OLS of observed on predicted, RMSE,
// mean 90% interval length and its empirical coverage.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "downscaler/blocks.hpp"
#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/predictor.hpp"
#include "downscaler/random.hpp"
#include "downscaler/stats.hpp"

namespace downscaler {

enum class CvScheme { Random, Spatial };

inline std::string_view scheme_name(CvScheme s) { return s == CvScheme::Random ? "random" : "spatial"; }

inline CvScheme parse_scheme(std::string_view text) {
  if (text == "random" || text == "R-CV" || text == "rcv") return CvScheme::Random;
  if (text == "spatial" || text == "S-CV" || text == "scv") return CvScheme::Spatial;
  throw InputError("unknown cross-validation scheme '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Fold plans

struct FoldPlan {
  CvScheme scheme = CvScheme::Random;
  int k = 10;
  std::uint64_t seed = 0;
  std::vector<int> record_fold;               // per input record
  std::map<std::string, int> monitor_fold;    // S-CV only

  std::vector<int> fold_sizes() const {
    std::vector<int> n(static_cast<std::size_t>(k), 0);
    for (int f : record_fold) ++n[static_cast<std::size_t>(f)];
    return n;
  }
};

struct KMeansResult {
  std::vector<int> labels;
  Eigen::MatrixXd centers;  // k x dim
  double inertia = std::numeric_limits<double>::infinity();
};

/// Lloyd's algorithm from `restarts` random initializations (k distinct
/// points each); keeps the lowest within-cluster sum of squares.
inline KMeansResult kmeans(const Eigen::MatrixXd& points, int k, Rng& rng, int restarts = 50, int max_iter = 200) {
  const auto n = static_cast<int>(points.rows());
  if (k < 1 || k > n) throw InputError("k-means: need 1 <= k <= number of points");
  KMeansResult best;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int r = 0; r < restarts; ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Eigen::MatrixXd centers(k, points.cols());
    for (int c = 0; c < k; ++c) centers.row(c) = points.row(order[static_cast<std::size_t>(c)]);
    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    for (int it = 0; it < max_iter; ++it) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        int arg = 0;
        (centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&arg);
        if (labels[static_cast<std::size_t>(i)] != arg) {
          labels[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      if (!changed && it > 0) break;
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (int i = 0; i < n; ++i) {
        sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
        ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      }
      for (int c = 0; c < k; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0) {
          centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
          continue;
        }
        // Empty cluster: move it to the point farthest from its center.
        int far = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const double d = (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centers.row(c) = points.row(far);
        labels[static_cast<std::size_t>(far)] = c;
      }
    }
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) inertia += (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    if (inertia < best.inertia) best = {labels, centers, inertia};
  }
  return best;
}

/// R-CV: a seeded random permutation of records dealt round-robin into k
/// folds. S-CV: k-means on monitor coordinates (longitude scaled by the cosine
/// of the mean latitude), one cluster per fold; every record of a monitor
/// lands in its monitor's fold. Fold labels are ordered by the smallest
/// monitor id they contain.
inline FoldPlan make_folds(std::span<const MonitorRecord> records, CvScheme scheme, int k, std::uint64_t seed) {
  if (k < 2) throw ParameterError("cross-validation needs k >= 2");
  FoldPlan plan{scheme, k, seed, std::vector<int>(records.size(), 0), {}};
  Rng rng(derive_seed(seed, {fnv1a(scheme_name(scheme)), static_cast<std::uint64_t>(k)}));
  if (scheme == CvScheme::Random) {
    if (records.size() < static_cast<std::size_t>(k)) throw InputError("R-CV: fewer records than folds");
    std::vector<std::size_t> perm(records.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t j = 0; j < perm.size(); ++j) plan.record_fold[perm[j]] = static_cast<int>(j % static_cast<std::size_t>(k));
    return plan;
  }

  std::map<std::string, Site> sites;
  for (const auto& r : records) sites.emplace(r.site.id, r.site);
  if (sites.size() < static_cast<std::size_t>(k))
    throw InputError("S-CV: " + std::to_string(sites.size()) + " monitors is fewer than k = " + std::to_string(k));
  double mean_lat = 0.0;
  for (const auto& [id, s] : sites) mean_lat += s.lat;
  mean_lat /= static_cast<double>(sites.size());
  const double cos_lat = std::cos(mean_lat * std::numbers::pi / 180.0);
  Eigen::MatrixXd pts(static_cast<Eigen::Index>(sites.size()), 2);
  std::vector<std::string> ids;
  for (const auto& [id, s] : sites) {
    const auto i = static_cast<Eigen::Index>(ids.size());
    pts(i, 0) = s.lon * cos_lat;
    pts(i, 1) = s.lat;
    ids.push_back(id);
  }
  const KMeansResult km = kmeans(pts, k, rng);
  std::vector<int> relabel(static_cast<std::size_t>(k), -1);
  int next = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {  // ids are sorted
    int& l = relabel[static_cast<std::size_t>(km.labels[i])];
    if (l < 0) l = next++;
    plan.monitor_fold[ids[i]] = l;
  }
  for (std::size_t i = 0; i < records.size(); ++i) plan.record_fold[i] = plan.monitor_fold.at(records[i].site.id);
  return plan;
}

// ---------------------------------------------------------------------------
// Metrics

struct OlsFit {
  double slope = 0.0;
  double intercept = 0.0;
  double sst = 0.0;  // total sum of squares of observed
  double ssr = 0.0;  // explained by the regression
  double sse = 0.0;  // regression residual sum of squares
  double r2 = 0.0;
};

/// Least squares of observed on predicted. A constant predictor explains
/// nothing: slope 0, intercept mean(observed), R^2 0.
inline OlsFit ols_observed_on_predicted(std::span<const double> observed, std::span<const double> predicted) {
  if (observed.size() != predicted.size()) throw InputError("metrics: observed/predicted length mismatch");
  if (observed.empty()) throw InputError("metrics: no observations");
  const double my = mean_of(observed), mx = mean_of(predicted);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double dx = predicted[i] - mx, dy = observed[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  OlsFit f;
  f.sst = syy;
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  f.ssr = sxx > 0.0 ? sxy * sxy / sxx : 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = observed[i] - (f.intercept + f.slope * predicted[i]);
    f.sse += e * e;
  }
  f.r2 = syy > 0.0 ? f.ssr / syy : (f.sse == 0.0 && sxx == 0.0 ? 1.0 : 0.0);
  return f;
}

/// Fraction of observations inside [q05, q95] of their predictive draws.
inline double coverage_check(std::span<const double> observed, std::span<const std::vector<double>> draws) {
  if (observed.size() != draws.size()) throw InputError("coverage: observed/draws length mismatch");
  if (observed.empty()) throw InputError("coverage: no observations");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (draws[i].size() < 2) throw InputError("coverage: need at least 2 draws per prediction");
    const DrawSummary s = summarize_draws(draws[i]);
    if (observed[i] >= s.q05 && observed[i] <= s.q95) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(observed.size());
}

/// One held-out record and its predictive summary.
struct PredictionRecord {
  std::string record_id;  // site_id:date
  Site site;
  Date day;
  RegionId region = RegionId::West;
  int fold = 0;
  double observed = 0.0;
  double mean = 0.0;
  double sd = 0.0;
  double pi_lo = 0.0;
  double pi_hi = 0.0;
  int n_blocks = 0;

  bool covered() const { return observed >= pi_lo && observed <= pi_hi; }
};

struct CvMetrics {
  int n = 0;
  double r2 = 0.0;
  double rmse = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  double mean_pi_length = 0.0;
  double coverage = 0.0;
};

inline CvMetrics compute_metrics(std::span<const PredictionRecord> preds) {
  if (preds.empty()) throw InputError("metrics: no predictions");
  std::vector<double> obs, pred;
  double se = 0.0, len = 0.0;
  int covered = 0;
  for (const auto& p : preds) {
    obs.push_back(p.observed);
    pred.push_back(p.mean);
    se += (p.observed - p.mean) * (p.observed - p.mean);
    len += p.pi_hi - p.pi_lo;
    covered += p.covered();
  }
  const OlsFit f = ols_observed_on_predicted(obs, pred);
  const double n = static_cast<double>(preds.size());
  return {static_cast<int>(preds.size()), f.r2, std::sqrt(se / n), f.slope, f.intercept, len / n, covered / n};
}

// ---------------------------------------------------------------------------
// Cross-validation

/// A block fit or prediction that did not happen in some fold.
struct CvIssue {
  int fold = 0;
  std::string block;  // empty for fold-level issues
  std::string reason;
};

struct CvReport {
  CvScheme scheme = CvScheme::Random;
  int k = 0;
  std::vector<std::pair<RegionId, CvMetrics>> regions;  // regions with predictions, enum order
  CvMetrics overall;
  std::vector<CvIssue> issues;
  std::vector<int> skipped_folds;
  int unpredicted = 0;  // held-out complete records no fitted block could predict
  std::vector<PredictionRecord> predictions;  // ordered by (fold, site id, date)
};

struct CvSettings {
  ChainConfig chain;
  double buffer_km = 100.0;
  int workers = 1;
};

inline std::uint64_t fold_prediction_seed(std::uint64_t master, int fold) {
  return derive_seed(master, {2, static_cast<std::uint64_t>(fold)});
}

namespace detail {

struct FoldResult {
  std::vector<PredictionRecord> predictions;
  std::vector<CvIssue> issues;
  int unpredicted = 0;
};

/// Refits the blocks holding fold f's held-out monitors on the remaining
/// records (held-out records are removed from foreign blocks as well) and
/// predicts the held-out records with full predictive draws.
inline FoldResult run_fold(int f, std::span<const MonitorRecord> records, const std::vector<Site>& cells,
                           const RegionMap& region_map, const FoldPlan& plan, const std::vector<BlockSpec>& full_blocks,
                           const CvSettings& settings) {
  FoldResult out;
  std::vector<MonitorRecord> train;
  std::vector<std::size_t> held;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (plan.record_fold[i] == f) {
      if (records[i].complete()) held.push_back(i);
    } else {
      train.push_back(records[i]);
    }
  }
  if (held.empty()) {
    out.issues.push_back({f, "", "no complete held-out records"});
    return out;
  }

  // Blocks that contain any held-out record.
  std::vector<bool> affected(full_blocks.size(), false);
  for (std::size_t i : held)
    for (std::size_t b = 0; b < full_blocks.size(); ++b)
      if (full_blocks[b].window.contains(records[i].day) && full_blocks[b].has_monitor(records[i].site.id))
        affected[b] = true;

  const std::vector<BlockSpec> train_blocks = assign_blocks(train, cells, region_map, settings.buffer_km);
  std::vector<std::optional<FittedBlock>> fits(train_blocks.size());
  for (std::size_t b = 0; b < train_blocks.size(); ++b) {
    if (!affected[b]) continue;
    try {
      fits[b] = fit_block(train_blocks[b], train, settings.chain,
                          block_chain_seed(settings.chain.master_seed, 1 + static_cast<std::uint64_t>(f),
                                           train_blocks[b].ordinal()));
    } catch (const std::exception& e) {
      out.issues.push_back({f, train_blocks[b].name(), e.what()});
    }
  }
  std::vector<std::unique_ptr<BlockPredictor>> predictors(fits.size());
  for (std::size_t b = 0; b < fits.size(); ++b)
    if (fits[b]) predictors[b] = std::make_unique<BlockPredictor>(*fits[b]);

  // Held-out records grouped by site, in date order.
  std::map<std::string, std::vector<std::size_t>> by_site;
  for (std::size_t i : held) by_site[records[i].site.id].push_back(i);
  PredictOptions opt;
  opt.mode = PredictionMode::Predictive;
  opt.seed = fold_prediction_seed(settings.chain.master_seed, f);
  for (auto& [id, idx] : by_site) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return days_between(records[b].day, records[a].day) < 0; });
    const Site& site = records[idx.front()].site;
    std::vector<const BlockPredictor*> candidates;
    for (std::size_t b = 0; b < full_blocks.size(); ++b)
      if (predictors[b] && full_blocks[b].has_monitor(id)) candidates.push_back(predictors[b].get());
    std::vector<const MonitorRecord*> rows;
    for (std::size_t i : idx) rows.push_back(&records[i]);
    const auto values = predict_blended<MonitorRecord>(candidates, site, rows, opt);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (!values[j]) {
        ++out.unpredicted;
        continue;
      }
      const MonitorRecord& r = records[idx[j]];
      const DrawSummary s = summarize_draws(values[j]->values);
      out.predictions.push_back({r.site.id + ":" + format_date(r.day), r.site, r.day, r.region, f, r.pm25, s.mean, s.sd,
                                 s.q05, s.q95, values[j]->n_blocks});
    }
  }
  if (out.predictions.empty()) out.issues.push_back({f, "", "fold produced no predictions"});
  return out;
}

}  // namespace detail

/// k-fold cross-validation. Folds run as independent jobs on up to
/// settings.workers threads and are merged in fold order.
inline CvReport cross_validate(std::span<const MonitorRecord> records, const std::vector<Site>& cells,
                               const RegionMap& region_map, const FoldPlan& plan, const CvSettings& settings) {
  if (plan.record_fold.size() != records.size()) throw InputError("fold plan does not match the records");
  settings.chain.validate();
  const std::vector<BlockSpec> full_blocks = assign_blocks(records, cells, region_map, settings.buffer_km);

  std::vector<detail::FoldResult> folds(static_cast<std::size_t>(plan.k));
  parallel_for(folds.size(), settings.workers, [&](std::size_t f) {
    folds[f] = detail::run_fold(static_cast<int>(f), records, cells, region_map, plan, full_blocks, settings);
  });

  CvReport report;
  report.scheme = plan.scheme;
  report.k = plan.k;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto& fr = folds[f];
    if (fr.predictions.empty()) report.skipped_folds.push_back(static_cast<int>(f));
    report.issues.insert(report.issues.end(), fr.issues.begin(), fr.issues.end());
    report.unpredicted += fr.unpredicted;
    report.predictions.insert(report.predictions.end(), fr.predictions.begin(), fr.predictions.end());
  }
  if (report.predictions.empty()) throw InputError("cross-validation produced no predictions");
  report.overall = compute_metrics(report.predictions);
  for (RegionId r : kAllRegions) {
    std::vector<PredictionRecord> sub;
    for (const auto& p : report.predictions)
      if (p.region == r) sub.push_back(p);
    if (!sub.empty()) report.regions.emplace_back(r, compute_metrics(sub));
  }
  return report;
}

}  // namespace downscaler
