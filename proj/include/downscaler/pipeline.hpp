#pragma once

// Batch commands behind the CLI: strict run configuration, block fitting,
// surface prediction and cross-validation, with all outputs written in a
// fixed order so results do not depend on the worker count.

#include "json.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "downscaler/blocks.hpp"
#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/io.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/predictor.hpp"
#include "downscaler/random.hpp"
#include "downscaler/synth.hpp"
#include "downscaler/transform.hpp"
#include "downscaler/validation.hpp"

namespace downscaler {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitInput = 1, kExitNumerical = 2, kExitPartial = 3 };

// ---------------------------------------------------------------------------
// Configuration

struct RunConfig {
  std::string monitors;  // monitor CSV path
  std::string grid;      // grid CSV path
  std::string output_dir = "out";
  double buffer_km = 100.0;
  ChainConfig chain;
  PredictionMode prediction_mode = PredictionMode::Latent;
  bool sample_latent = true;
  std::vector<CvScheme> cv_schemes{CvScheme::Random, CvScheme::Spatial};
  int cv_folds = 10;
  int workers = 1;

  void validate() const {
    chain.validate();
    if (!(buffer_km > 0.0)) throw ParameterError("config: buffer_km must be positive");
    if (cv_folds < 2) throw ParameterError("config: cv_folds must be at least 2");
    if (cv_schemes.empty()) throw ParameterError("config: cv_schemes must not be empty");
    if (workers < 1 || workers > 256) throw ParameterError("config: workers must be in [1, 256]");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw InputError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw InputError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw InputError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline std::string_view mode_name(PredictionMode m) { return m == PredictionMode::Latent ? "latent" : "predictive"; }

inline PredictionMode parse_mode(std::string_view text) {
  if (text == "latent") return PredictionMode::Latent;
  if (text == "predictive") return PredictionMode::Predictive;
  throw InputError("unknown prediction mode '" + std::string(text) + "'");
}

/// Parses a run configuration; unrecognized keys abort before any work.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{"monitors",  "grid",         "output_dir",      "buffer_km",  "taper_range_km",
                                           "phi_grid",  "n_iter",       "n_burnin",        "thin",       "master_seed",
                                           "priors",    "prediction_mode", "sample_latent", "cv_schemes", "cv_folds",
                                           "workers"};
  static const std::set<std::string> kPriorKeys{"fixed_effect_var", "coreg_var", "sigma2_shape",
                                                "sigma2_scale",     "tau_shape", "tau_rate"};
  detail::reject_unknown(j, kKeys, "config");
  RunConfig c;
  detail::read_key(j, "monitors", c.monitors, "config");
  detail::read_key(j, "grid", c.grid, "config");
  detail::read_key(j, "output_dir", c.output_dir, "config");
  detail::read_key(j, "buffer_km", c.buffer_km, "config");
  detail::read_key(j, "taper_range_km", c.chain.taper_range_km, "config");
  detail::read_key(j, "phi_grid", c.chain.phi_grid, "config");
  detail::read_key(j, "n_iter", c.chain.n_iter, "config");
  detail::read_key(j, "n_burnin", c.chain.n_burnin, "config");
  detail::read_key(j, "thin", c.chain.thin, "config");
  detail::read_key(j, "master_seed", c.chain.master_seed, "config");
  detail::read_key(j, "sample_latent", c.sample_latent, "config");
  detail::read_key(j, "cv_folds", c.cv_folds, "config");
  detail::read_key(j, "workers", c.workers, "config");
  if (j.contains("prediction_mode")) {
    std::string m;
    detail::read_key(j, "prediction_mode", m, "config");
    c.prediction_mode = parse_mode(m);
  }
  if (j.contains("cv_schemes")) {
    std::vector<std::string> names;
    detail::read_key(j, "cv_schemes", names, "config");
    c.cv_schemes.clear();
    for (const auto& n : names) c.cv_schemes.push_back(parse_scheme(n));
  }
  if (j.contains("priors")) {
    const auto& p = j.at("priors");
    detail::reject_unknown(p, kPriorKeys, "config.priors");
    Priors& pr = c.chain.priors;
    detail::read_key(p, "fixed_effect_var", pr.fixed_effect_var, "config.priors");
    detail::read_key(p, "coreg_var", pr.coreg_var, "config.priors");
    detail::read_key(p, "sigma2_shape", pr.sigma2_shape, "config.priors");
    detail::read_key(p, "sigma2_scale", pr.sigma2_scale, "config.priors");
    detail::read_key(p, "tau_shape", pr.tau_shape, "config.priors");
    detail::read_key(p, "tau_rate", pr.tau_rate, "config.priors");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  RunConfig c = parse_run_config(j);
  // Relative input paths are resolved against the config file's directory.
  const fs::path base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.monitors);
  resolve(c.grid);
  resolve(c.output_dir);
  return c;
}

/// Everything that determines results. Worker count and output location are
/// excluded, so they never change an output byte.
inline nlohmann::json config_record(const RunConfig& c) {
  nlohmann::json cv = nlohmann::json::array();
  for (CvScheme s : c.cv_schemes) cv.push_back(std::string(scheme_name(s)));
  const Priors& p = c.chain.priors;
  return {{"buffer_km", c.buffer_km},
          {"taper_range_km", c.chain.taper_range_km},
          {"phi_grid", c.chain.phi_grid},
          {"n_iter", c.chain.n_iter},
          {"n_burnin", c.chain.n_burnin},
          {"thin", c.chain.thin},
          {"master_seed", c.chain.master_seed},
          {"priors",
           {{"fixed_effect_var", p.fixed_effect_var},
            {"coreg_var", p.coreg_var},
            {"sigma2_shape", p.sigma2_shape},
            {"sigma2_scale", p.sigma2_scale},
            {"tau_shape", p.tau_shape},
            {"tau_rate", p.tau_rate}}},
          {"prediction_mode", std::string(mode_name(c.prediction_mode))},
          {"sample_latent", c.sample_latent},
          {"cv_schemes", cv},
          {"cv_folds", c.cv_folds}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Shared input loading

struct Dataset {
  std::vector<MonitorRecord> monitors;
  std::vector<GridCellDay> grid;
  std::vector<Site> cells;
  std::vector<std::string> unknown_region_cells;
  RegionMap region_map;
};

inline Dataset load_dataset(const RunConfig& c, bool need_grid) {
  Dataset d;
  if (c.monitors.empty()) throw InputError("config: 'monitors' path is required");
  d.monitors = io::read_monitors(c.monitors);
  if (d.monitors.empty()) throw InputError(c.monitors + ": no records");
  study_year(d.monitors);
  if (!c.grid.empty()) {
    auto g = io::read_grid(c.grid);
    d.grid = std::move(g.rows);
    d.unknown_region_cells = std::move(g.unknown_region_cells);
  } else if (need_grid) {
    throw InputError("config: 'grid' path is required");
  }
  d.cells = unique_cells(d.grid);
  d.region_map = build_region_map(d.monitors, d.grid);
  return d;
}

struct RunResult {
  int exit_code = kExitOk;
  std::vector<std::string> warnings;
  std::vector<std::string> outputs;  // file names written, in order
};

// ---------------------------------------------------------------------------
// fit

inline std::string block_file(const std::string& kind, const std::string& block, const char* ext) {
  return kind + "_" + block + ext;
}

inline RunResult run_fit(const RunConfig& c, std::ostream& log = std::cerr) {
  RunResult res;
  const Dataset d = load_dataset(c, false);
  const fs::path out_dir(c.output_dir);
  fs::create_directories(out_dir);

  const std::vector<BlockSpec> specs = assign_blocks(d.monitors, d.cells, d.region_map, c.buffer_km);
  const std::vector<BlockOutcome> outcomes = fit_blocks(specs, d.monitors, c.chain, 0, c.workers);

  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockOutcome& o : outcomes) {
    const std::string name = o.spec.name();
    nlohmann::json entry{{"name", name},
                         {"region", std::string(region_name(o.spec.region))},
                         {"window", o.spec.window.index},
                         {"year", static_cast<int>(o.spec.window.first.year())}};
    if (o.empty) {
      entry["status"] = "empty";
    } else if (!o.fit) {
      entry["status"] = "skipped";
      entry["reason"] = o.reason;
      res.warnings.push_back("block " + name + " skipped: " + o.reason);
      res.exit_code = kExitPartial;
    } else {
      const FittedBlock& f = *o.fit;
      const int m = static_cast<int>(f.sites.size()), t = f.spec.window.num_days();
      const std::string draws = block_file("draws", name, ".csv"), sites = block_file("sites", name, ".csv"),
                        transform = block_file("transform", name, ".txt"),
                        diagnostics = block_file("diagnostics", name, ".csv"),
                        summary = block_file("summary", name, ".csv");
      {
        auto os = io::open_output(out_dir / draws);
        io::write_draws(os, f.draws, m, t);
      }
      {
        auto os = io::open_output(out_dir / sites);
        io::write_block_sites(os, f);
      }
      {
        auto os = io::open_output(out_dir / transform);
        write_transform(os, f.transform);
      }
      {
        auto os = io::open_output(out_dir / diagnostics);
        io::write_diagnostics(os, f.draws);
      }
      {
        auto os = io::open_output(out_dir / summary);
        io::write_summary(os, summarize(f.draws));
      }
      entry["status"] = "fitted";
      entry["num_records"] = f.num_records;
      entry["num_sites"] = m;
      entry["num_draws"] = f.draws.size();
      entry["accept_phi1"] = f.draws.accept_phi1;
      entry["accept_phi2"] = f.draws.accept_phi2;
      entry["jitter"] = f.draws.jitter;
      for (std::size_t k = 0; k < f.draws.jitter.size(); ++k)
        if (f.draws.jitter[k] > 0.0)
          res.warnings.push_back("block " + name + ": covariance for phi " + io::exact(f.draws.phi_grid[k]) +
                                 " km needed diagonal jitter " + io::exact(f.draws.jitter[k]));
      entry["files"] = {{"draws", draws}, {"sites", sites}, {"transform", transform},
                        {"diagnostics", diagnostics}, {"summary", summary}};
      for (const auto& fn : {draws, sites, transform, diagnostics, summary}) res.outputs.push_back(fn);
    }
    blocks.push_back(entry);
  }

  const nlohmann::json config = config_record(c);
  nlohmann::json manifest{{"config", config},
                          {"config_hash", hex64(fnv1a(config.dump()))},
                          {"inputs",
                           {{"monitors", {{"path", c.monitors}, {"fnv1a", hex64(io::file_hash(c.monitors))}}}}},
                          {"blocks", blocks}};
  if (!c.grid.empty()) manifest["inputs"]["grid"] = {{"path", c.grid}, {"fnv1a", hex64(io::file_hash(c.grid))}};
  {
    auto os = io::open_output(out_dir / "manifest.json");
    os << manifest.dump(2) << '\n';
  }
  res.outputs.push_back("manifest.json");
  for (const auto& w : res.warnings) log << "warning: " << w << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// predict

/// Reloads the fitted blocks listed in a fit manifest.
inline std::vector<FittedBlock> load_fitted_blocks(const fs::path& fit_dir, const ChainConfig& chain) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(fit_dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError((fit_dir / "manifest.json").string() + ": " + e.what());
  }
  // The covariance grid must be the one the chains ran on.
  ChainConfig fitted = chain;
  try {
    const auto& cfg = manifest.at("config");
    cfg.at("phi_grid").get_to(fitted.phi_grid);
    cfg.at("taper_range_km").get_to(fitted.taper_range_km);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("fit manifest is incomplete: " + std::string(e.what()));
  }
  std::vector<FittedBlock> out;
  for (const auto& b : manifest.at("blocks")) {
    if (b.at("status") != "fitted") continue;
    FittedBlock f;
    f.spec.region = parse_region(b.at("region").get<std::string>());
    f.spec.window = make_window(b.at("year").get<int>(), b.at("window").get<int>());
    f.config = fitted;
    const auto& files = b.at("files");
    io::parse_block_sites(io::read_csv(fit_dir / files.at("sites").get<std::string>()), f);
    {
      std::ifstream in(fit_dir / files.at("transform").get<std::string>());
      if (!in) throw InputError("missing transform file for block " + f.spec.name());
      f.transform = read_transform(in);
    }
    f.draws = io::parse_draws(io::read_csv(fit_dir / files.at("draws").get<std::string>()),
                              static_cast<int>(f.sites.size()), f.spec.window.num_days(), fitted.phi_grid);
    f.num_records = b.value("num_records", 0);
    out.push_back(std::move(f));
  }
  return out;
}

/// Daily, seasonal and annual surfaces for one cell.
struct CellSurfaces {
  std::vector<CellPrediction> daily, seasonal, annual;
};

template <typename Predictors>
CellSurfaces predict_cell(const Site& cell, const std::vector<const GridCellDay*>& rows, const Predictors& predictors,
                          const PredictOptions& opt) {
  std::vector<const BlockPredictor*> candidates;
  for (const auto& p : predictors)
    if (p->fit().spec.has_cell(cell.id)) candidates.push_back(p.get());
  const auto values = predict_blended<GridCellDay>(candidates, cell, rows, opt);

  CellSurfaces out;
  std::array<std::vector<std::vector<double>>, 4> season_days;
  std::array<int, 4> season_blocks{};
  std::vector<std::vector<double>> year_days;
  int year_blocks = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string date = format_date(rows[i]->day);
    if (!values[i]) {
      out.daily.push_back({cell, date, 0.0, 0.0, 0.0, 0.0, 0});
      continue;
    }
    out.daily.push_back(summarize_cell(cell, date, values[i]->values, values[i]->n_blocks));
    const int s = season_of(rows[i]->day);
    season_days[static_cast<std::size_t>(s)].push_back(values[i]->values);
    season_blocks[static_cast<std::size_t>(s)] = std::max(season_blocks[static_cast<std::size_t>(s)], values[i]->n_blocks);
    year_days.push_back(values[i]->values);
    year_blocks = std::max(year_blocks, values[i]->n_blocks);
  }
  for (std::size_t s = 0; s < season_days.size(); ++s) {
    const std::string name(kSeasonNames[s]);
    if (season_days[s].empty())
      out.seasonal.push_back({cell, name, 0.0, 0.0, 0.0, 0.0, 0});
    else
      out.seasonal.push_back(aggregate(cell, name, season_days[s], season_blocks[s]));
  }
  if (year_days.empty())
    out.annual.push_back({cell, "annual", 0.0, 0.0, 0.0, 0.0, 0});
  else
    out.annual.push_back(aggregate(cell, "annual", year_days, year_blocks));
  return out;
}

inline std::uint64_t surface_seed(std::uint64_t master) { return derive_seed(master, {3}); }

/// Writes surface_daily.csv, surface_seasonal.csv and surface_annual.csv.
inline RunResult run_predict(const RunConfig& c, const fs::path& fit_dir, std::ostream& log = std::cerr) {
  RunResult res;
  if (c.grid.empty()) throw InputError("config: 'grid' path is required for predict");
  auto grid = io::read_grid(c.grid);
  for (const auto& id : grid.unknown_region_cells) res.warnings.push_back("cell " + id + " has an unknown region; skipped");
  if (!grid.unknown_region_cells.empty()) res.exit_code = kExitPartial;

  const std::vector<FittedBlock> fits = load_fitted_blocks(fit_dir, c.chain);
  if (fits.empty()) throw InputError("no fitted blocks in " + fit_dir.string());
  std::vector<std::unique_ptr<BlockPredictor>> predictors;
  for (const auto& f : fits) predictors.push_back(std::make_unique<BlockPredictor>(f));

  std::map<std::string, std::vector<const GridCellDay*>> by_cell;
  for (const auto& g : grid.rows) by_cell[g.cell.id].push_back(&g);
  std::vector<std::pair<Site, std::vector<const GridCellDay*>>> cells;
  for (auto& [id, rows] : by_cell) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const GridCellDay* a, const GridCellDay* b) { return days_between(b->day, a->day) < 0; });
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i]->day == rows[i - 1]->day)
        throw InputError("grid has two rows for cell '" + id + "' on " + format_date(rows[i]->day));
    cells.emplace_back(rows.front()->cell, rows);
  }

  PredictOptions opt;
  opt.mode = c.prediction_mode;
  opt.sample_latent = c.sample_latent;
  opt.seed = surface_seed(c.chain.master_seed);
  std::vector<CellSurfaces> surfaces(cells.size());
  parallel_for(cells.size(), c.workers,
               [&](std::size_t i) { surfaces[i] = predict_cell(cells[i].first, cells[i].second, predictors, opt); });

  const fs::path out_dir(c.output_dir);
  fs::create_directories(out_dir);
  int missing = 0;
  auto write = [&](const char* file, auto member) {
    auto os = io::open_output(out_dir / file);
    io::write_surface_header(os);
    for (const auto& s : surfaces)
      for (const auto& p : s.*member) {
        io::write_surface_row(os, p);
        if (member == &CellSurfaces::daily && p.n_blocks == 0) ++missing;
      }
    res.outputs.push_back(file);
  };
  write("surface_daily.csv", &CellSurfaces::daily);
  write("surface_seasonal.csv", &CellSurfaces::seasonal);
  write("surface_annual.csv", &CellSurfaces::annual);
  if (missing > 0) res.warnings.push_back(std::to_string(missing) + " cell-days had no contributing block or no AOD");
  for (const auto& w : res.warnings) log << "warning: " << w << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// validate

inline RunResult run_validate(const RunConfig& c, std::ostream& log = std::cerr) {
  RunResult res;
  const Dataset d = load_dataset(c, false);
  const fs::path out_dir(c.output_dir);
  fs::create_directories(out_dir);
  CvSettings settings{c.chain, c.buffer_km, c.workers};
  for (CvScheme scheme : c.cv_schemes) {
    const std::string name(scheme_name(scheme));
    const FoldPlan plan = make_folds(d.monitors, scheme, c.cv_folds, c.chain.master_seed);
    const CvReport report = cross_validate(d.monitors, d.cells, d.region_map, plan, settings);
    const std::string report_file = "cv_report_" + name + ".csv", pred_file = "cv_predictions_" + name + ".csv",
                      issue_file = "cv_issues_" + name + ".csv";
    {
      auto os = io::open_output(out_dir / report_file);
      io::write_cv_report(os, report);
    }
    {
      auto os = io::open_output(out_dir / pred_file);
      io::write_cv_predictions(os, report);
    }
    {
      auto os = io::open_output(out_dir / issue_file);
      io::write_cv_issues(os, report);
    }
    res.outputs.insert(res.outputs.end(), {report_file, pred_file, issue_file});
    for (const auto& i : report.issues)
      res.warnings.push_back(name + " fold " + std::to_string(i.fold) + (i.block.empty() ? "" : " block " + i.block) +
                             ": " + i.reason);
    if (report.unpredicted > 0)
      res.warnings.push_back(name + ": " + std::to_string(report.unpredicted) + " held-out records could not be predicted");
    if (!report.issues.empty() || report.unpredicted > 0) res.exit_code = kExitPartial;
  }
  for (const auto& w : res.warnings) log << "warning: " << w << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// simulate

/// Writes monitors.csv, grid.csv, truth.json and a ready-to-run config.json.
inline RunResult run_simulate(const synth::TruthSpec& truth, std::uint64_t seed, const fs::path& out_dir) {
  RunResult res;
  const synth::SimulatedData sim = synth::simulate(truth, seed);
  fs::create_directories(out_dir);
  {
    auto os = io::open_output(out_dir / "monitors.csv");
    io::write_monitors(os, sim.monitors);
  }
  {
    auto os = io::open_output(out_dir / "grid.csv");
    io::write_grid(os, sim.grid);
  }
  {
    nlohmann::json j = truth;
    j = {{"truth", j}, {"seed", seed}};
    auto os = io::open_output(out_dir / "truth.json");
    os << j.dump(2) << '\n';
  }
  {
    const nlohmann::json cfg{{"monitors", "monitors.csv"},
                             {"grid", "grid.csv"},
                             {"output_dir", "out"},
                             {"n_iter", 3000},
                             {"n_burnin", 1000},
                             {"thin", 2},
                             {"taper_range_km", truth.taper_range_km},
                             {"master_seed", seed},
                             {"workers", 1}};
    auto os = io::open_output(out_dir / "config.json");
    os << cfg.dump(2) << '\n';
  }
  res.outputs = {"monitors.csv", "grid.csv", "truth.json", "config.json"};
  return res;
}

}  // namespace downscaler
