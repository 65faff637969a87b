// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "downscaler/pipeline.hpp"

using namespace downscaler;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string title;
  double budget_s;  // wall-clock limit; 0 = none
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1.0); }

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1.0);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("downscaler_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

Outcome spatial_oracle() {
  Rng rng(101);
  double worst = 0.0;
  const std::vector<double> phis{50.0, 100.0, 200.0, 400.0};
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 2 + static_cast<int>(uniform01(rng) * 199);
    const double lon0 = -120 + 40 * uniform01(rng), lat0 = 28 + 15 * uniform01(rng);
    const double width = 3 + 12 * uniform01(rng);
    std::vector<Site> sites;
    for (int i = 0; i < n; ++i)
      sites.push_back({"s" + std::to_string(i), lon0 + width * uniform01(rng), lat0 + 0.6 * width * uniform01(rng)});
    const double phi = phis[static_cast<std::size_t>(uniform01(rng) * phis.size())];
    const double taper_r = 300 + 700 * uniform01(rng);

    const TaperedCovariance cov = build_cov(sites, phi, taper_r);
    const synth::DenseGpOracle oracle = synth::dense_gp_oracle(sites, phi, taper_r, cov.jitter());
    const Eigen::MatrixXd sparse = Eigen::MatrixXd(cov.matrix());
    worst = std::max(worst, (sparse - oracle.cov).cwiseAbs().maxCoeff() / oracle.cov.cwiseAbs().maxCoeff());

    const Eigen::VectorXd b = std_normal_vector(rng, n);
    worst = std::max(worst, rel_err(cov.solve(b), oracle.solve(b)));
    worst = std::max(worst, rel_err(cov.log_det(), oracle.log_det()));

    const Eigen::VectorXd w = cov.correlate(std_normal_vector(rng, n));
    std::vector<Site> targets;
    for (int k = 0; k < 5; ++k)
      targets.push_back({"t" + std::to_string(k), lon0 + width * uniform01(rng), lat0 + 0.6 * width * uniform01(rng)});
    const KrigingResult kr = kriging(cov, w, targets);
    const auto [mean, var] = oracle.conditional(w, targets);
    worst = std::max(worst, rel_err(kr.mean, mean));
    worst = std::max(worst, rel_err(kr.variance, var));
  }
  return {worst <= 1e-8, "50 instances, max relative error " + fmt("%.2e", worst)};
}

Outcome temporal_oracle() {
  Rng rng(202);
  double worst = 0.0;
  int instances = 0;
  for (int n = 2; n <= 30; ++n) {
    for (int rep = 0; rep < 3; ++rep, ++instances) {
      Rw1Data d = Rw1Data::zeros(n);
      for (int t = 0; t < n; ++t) {
        if (uniform01(rng) < 0.25) continue;
        d.sum_sq_coef[t] = 0.1 + 4 * uniform01(rng);
        d.sum_coef_resid[t] = 3 * std_normal(rng);
      }
      const double tau = 0.2 + 30 * uniform01(rng), sigma2 = 0.1 + 2 * uniform01(rng);
      const auto ours = rw1_conditional_moments(d, tau, sigma2);
      const auto dense = synth::dense_rw1_conditional(d.sum_sq_coef, d.sum_coef_resid, tau, sigma2);
      worst = std::max(worst, (ours.mean - dense.mean).cwiseAbs().maxCoeff());
      worst = std::max(worst, (ours.covariance - dense.covariance).cwiseAbs().maxCoeff());

      std::vector<bool> observed(static_cast<std::size_t>(n));
      for (auto&& o : observed) o = uniform01(rng) < 0.6;
      observed[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(n))] = true;
      const Eigen::VectorXd v = std_normal_vector(rng, n);
      const auto interp = interpolate_missing_days(v, tau, observed);
      const auto [im, iv] = synth::dense_rw1_interpolation(v, tau, observed);
      worst = std::max(worst, (interp.mean - im).cwiseAbs().maxCoeff());
      worst = std::max(worst, (interp.variance - iv).cwiseAbs().maxCoeff());
    }
  }
  return {worst <= 1e-10, std::to_string(instances) + " instances with T in [2, 30], max abs error " + fmt("%.2e", worst)};
}

Outcome sampler_correctness() {
  const auto cfg = synth::SuccessiveConditionalConfig::standard();
  const auto good = synth::successive_conditional_test(cfg);
  const auto bad = synth::successive_conditional_test(cfg, synth::sigma2_bug_sweep);
  std::ostringstream s;
  s << good.cycles << " cycles, correct sampler max|z| " << fmt("%.2f", good.max_abs_z()) << " (";
  for (std::size_t i = 0; i < good.checks.size(); ++i)
    s << (i ? " " : "") << good.checks[i].name << "=" << fmt("%.2f", good.checks[i].z);
  s << "), planted sigma2 bug max|z| ";
  if (bad.aborted_at)
    s << "aborted at cycle " << *bad.aborted_at << ": " << bad.abort_reason;
  else
    s << fmt("%.2f", bad.max_abs_z());
  const bool pass = good.cycles >= 50000 && good.passed(3.0) && !bad.aborted_at && bad.max_abs_z() > 3.0;
  return {pass, s.str()};
}

Outcome parameter_recovery() {
  const synth::TruthSpec t;
  std::vector<std::pair<std::string, double>> truth{
      {"mu0", t.mu0}, {"mu1", t.mu1}, {"c1", t.c1}, {"c3", t.c3}, {"sigma2", t.sigma2}};
  for (int j = 0; j < kNumCovariates; ++j) truth.push_back({"gamma_" + std::string(kCovariateNames[j]), t.gamma[j]});
  int good_seeds = 0;
  std::ostringstream s;
  for (int seed = 1; seed <= 10; ++seed) {
    const auto sim = synth::simulate(t, static_cast<std::uint64_t>(seed));
    const auto rows = apply_transform(fit_transform(sim.monitors), std::span<const MonitorRecord>(sim.monitors));
    const BlockData data = make_block_data(rows, make_window(2011, 1));
    ChainConfig cfg;
    cfg.n_iter = 20000;
    cfg.n_burnin = 6000;
    cfg.thin = 2;
    const PosteriorSummary sum = summarize(run_chain(data, cfg, 1000 + static_cast<std::uint64_t>(seed)));
    int within = 0;
    for (const auto& [name, value] : truth) {
      const auto& p = sum.at(name);
      within += std::abs(p.stats.mean - value) <= 2.0 * p.stats.sd;
    }
    const bool ok = within >= static_cast<int>(std::ceil(0.8 * truth.size()));
    good_seeds += ok;
    s << (seed > 1 ? " " : "") << within << "/" << truth.size();
  }
  return {good_seeds >= 8, std::to_string(good_seeds) + "/10 seeds with >= 80% within 2 SD [" + s.str() + "]"};
}

// Well-specified single-region data, shared by the calibration and slope checks.
const CvReport& self_fit_cv(CvScheme scheme) {
  static std::map<CvScheme, CvReport> cache;
  auto it = cache.find(scheme);
  if (it != cache.end()) return it->second;
  synth::TruthSpec t;
  t.n_monitors = 40;
  t.n_days = 40;
  const auto sim = synth::simulate(t, 31);
  const RegionMap map = build_region_map(sim.monitors, std::vector<GridCellDay>{});
  CvSettings settings;
  settings.chain.n_iter = 4000;
  settings.chain.n_burnin = 1500;
  settings.chain.thin = 2;
  const FoldPlan plan = make_folds(sim.monitors, scheme, 10, 2011);
  return cache.emplace(scheme, cross_validate(sim.monitors, {}, map, plan, settings)).first->second;
}

Outcome calibration() {
  const CvReport& r = self_fit_cv(CvScheme::Random);
  const CvMetrics& m = r.overall;
  return {m.n >= 500 && m.coverage >= 0.85 && m.coverage <= 0.95,
          "held-out n=" + std::to_string(m.n) + ", 90% PI coverage " + fmt("%.3f", m.coverage)};
}

Outcome self_fit_slope() {
  std::ostringstream s;
  bool pass = true;
  for (CvScheme scheme : {CvScheme::Random, CvScheme::Spatial}) {
    const CvMetrics& m = self_fit_cv(scheme).overall;
    const bool ok = m.slope >= 0.9 && m.slope <= 1.1 && std::abs(m.intercept) <= 0.5;
    pass = pass && ok;
    s << (scheme == CvScheme::Random ? "" : "; ") << scheme_name(scheme) << " slope " << fmt("%.3f", m.slope)
      << " intercept " << fmt("%.3f", m.intercept) << " R2 " << fmt("%.3f", m.r2);
  }
  return {pass, s.str()};
}

Outcome seam_smoothness() {
  synth::TruthSpec truth = synth::mini_conus_truth();
  truth.n_monitors = 60;
  truth.grid_nx = 30;
  truth.grid_ny = 12;
  const auto sim = synth::simulate(truth, 2011);
  const std::vector<Site> cells = unique_cells(sim.grid);
  const RegionMap map = build_region_map(sim.monitors, sim.grid);
  const auto specs = assign_blocks(sim.monitors, cells, map, 100.0);
  ChainConfig cfg;
  cfg.n_iter = 3000;
  cfg.n_burnin = 1000;
  cfg.thin = 2;
  const auto outcomes = fit_blocks(specs, sim.monitors, cfg, 0, 1);
  std::vector<std::unique_ptr<BlockPredictor>> predictors;
  for (const auto& o : outcomes)
    if (o.fit) predictors.push_back(std::make_unique<BlockPredictor>(*o.fit));

  std::map<std::string, std::vector<const GridCellDay*>> by_cell;
  for (const auto& g : sim.grid) by_cell[g.cell.id].push_back(&g);
  PredictOptions opt;
  opt.seed = 99;
  int buffer_cells = 0, smooth = 0;
  for (const auto& [id, rows] : by_cell) {
    std::vector<const BlockPredictor*> all;
    const BlockPredictor* home = nullptr;
    for (const auto& p : predictors) {
      if (!p->fit().spec.has_cell(id)) continue;
      all.push_back(p.get());
      if (p->fit().spec.region == rows.front()->region) home = p.get();
    }
    if (all.size() < 2 || !home) continue;
    const std::vector<const BlockPredictor*> single{home};
    const auto blended = predict_blended<GridCellDay>(all, rows.front()->cell, rows, opt);
    const auto alone = predict_blended<GridCellDay>(single, rows.front()->cell, rows, opt);
    std::vector<std::vector<double>> bd, sd;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (blended[i] && alone[i]) {
        bd.push_back(blended[i]->values);
        sd.push_back(alone[i]->values);
      }
    if (bd.empty()) continue;
    const CellPrediction b = aggregate(rows.front()->cell, "annual", bd, 2);
    const CellPrediction a = aggregate(rows.front()->cell, "annual", sd, 1);
    ++buffer_cells;
    smooth += std::abs(b.mean - a.mean) <= 2.0 * a.sd;
  }
  const double frac = buffer_cells ? static_cast<double>(smooth) / buffer_cells : 0.0;
  return {buffer_cells > 0 && frac >= 0.95, std::to_string(smooth) + "/" + std::to_string(buffer_cells) +
                                                 " buffer cells within 2 posterior SD (" + fmt("%.3f", frac) + ")"};
}

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().filename().string()] = io::read_file(e.path());
  return out;
}

Outcome determinism() {
  const fs::path bundle = scratch("bundle");
  run_simulate(synth::mini_conus_truth(), 2011, bundle);
  std::ostringstream log;
  std::map<int, std::map<std::string, std::string>> outputs;
  for (int workers : {1, 8}) {
    RunConfig c;
    c.monitors = (bundle / "monitors.csv").string();
    c.grid = (bundle / "grid.csv").string();
    c.chain.n_iter = 600;
    c.chain.n_burnin = 200;
    c.chain.thin = 2;
    c.cv_folds = 5;
    c.workers = workers;
    const fs::path fit = scratch("fit_" + std::to_string(workers)), pred = scratch("pred_" + std::to_string(workers)),
                   cv = scratch("cv_" + std::to_string(workers));
    c.output_dir = fit.string();
    run_fit(c, log);
    c.output_dir = pred.string();
    run_predict(c, fit, log);
    c.output_dir = cv.string();
    run_validate(c, log);
    for (const auto& [stage, dir] : {std::pair{"fit", fit}, std::pair{"predict", pred}, std::pair{"validate", cv}})
      for (auto& [name, bytes] : directory_bytes(dir)) outputs[workers][std::string(stage) + "/" + name] = std::move(bytes);
  }
  int differing = 0;
  for (const auto& [name, bytes] : outputs[1]) {
    auto it = outputs[8].find(name);
    differing += it == outputs[8].end() || it->second != bytes;
  }
  const bool same_set = outputs[1].size() == outputs[8].size();
  fs::remove_all(bundle);
  for (const char* p : {"fit_1", "fit_8", "pred_1", "pred_8", "cv_1", "cv_8"}) fs::remove_all(scratch(p));
  return {same_set && differing == 0 && !outputs[1].empty(),
          std::to_string(outputs[1].size()) + " files from fit, predict and validate; " + std::to_string(differing) +
              " differ between 1 and 8 workers"};
}

Outcome metric_suite() {
  auto pred = [](double o, double m, double lo, double hi) {
    PredictionRecord p;
    p.observed = o;
    p.mean = m;
    p.pi_lo = lo;
    p.pi_hi = hi;
    return p;
  };
  const std::vector<PredictionRecord> fx{pred(10, 9.5, 8, 11), pred(12, 12.5, 11, 14), pred(9, 10, 8.5, 12),
                                         pred(15, 14, 12, 16), pred(11, 11.5, 12, 14)};
  const CvMetrics m = compute_metrics(fx);
  // Reference values from exact fractions.
  const double err = std::max({std::abs(m.r2 - 1280.0 / 1431.0), std::abs(m.rmse - std::sqrt(11.0 / 20.0)),
                               std::abs(m.slope - 32.0 / 27.0), std::abs(m.intercept + 301.0 / 135.0),
                               std::abs(m.mean_pi_length - 3.1), std::abs(m.coverage - 0.8)});
  return {err <= 1e-12, "max abs error " + fmt("%.2e", err)};
}

Outcome block_bookkeeping() {
  synth::TruthSpec t;
  t.layout = synth::RegionLayout::Conus;
  t.lon_min = -124.0;
  t.lon_max = -67.0;
  t.lat_min = 25.0;
  t.lat_max = 49.0;
  t.n_monitors = 180;
  t.n_days = 365;
  t.obs_prob = 0.25;
  t.grid_nx = 24;
  t.grid_ny = 10;
  const auto sim = synth::simulate(t, 2011);
  const std::vector<Site> cells = unique_cells(sim.grid);
  const RegionMap map = build_region_map(sim.monitors, sim.grid);
  const auto specs = assign_blocks(sim.monitors, cells, map, 100.0);

  std::set<std::pair<int, int>> keys;
  int populated = 0;
  for (const auto& b : specs) {
    keys.insert({static_cast<int>(b.region), b.window.index});
    populated += !b.core_monitors.empty() && !b.core_cells.empty();
  }
  ChainConfig cfg;
  cfg.n_iter = 40;
  cfg.n_burnin = 20;
  cfg.thin = 1;
  int fitted = 0;
  for (const auto& o : fit_blocks(specs, sim.monitors, cfg, 0, 1)) fitted += o.fit.has_value();
  const bool pass = specs.size() == 27 && keys.size() == 27 && populated == 27 && fitted == 27;
  return {pass, std::to_string(specs.size()) + " blocks (" + std::to_string(keys.size()) + " distinct region/window), " +
                    std::to_string(populated) + " with core monitors and cells, " + std::to_string(fitted) + " fitted"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<Criterion> criteria{
      {1, "spatial oracle equivalence", 60, spatial_oracle},
      {2, "temporal oracle equivalence", 60, temporal_oracle},
      {3, "sampler joint correctness", 600, sampler_correctness},
      {4, "parameter recovery", 900, parameter_recovery},
      {5, "predictive interval calibration", 600, calibration},
      {6, "self-fit regression slope", 0, self_fit_slope},
      {7, "seam smoothness", 0, seam_smoothness},
      {8, "determinism across worker counts", 0, determinism},
      {9, "metric suite exactness", 0, metric_suite},
      {10, "27-block bookkeeping", 0, block_bookkeeping},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.number << ": " << c.title << " - " << o.detail << " ["
              << fmt("%.1f", secs) << " s" << (in_time ? "" : ", over the " + fmt("%.0f", c.budget_s) + " s limit")
              << "]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
