#pragma once

// CSV ingestion and every file the CLI writes: block draws, sites and
// transforms (enough to predict without refitting), diagnostics, summaries,
// prediction surfaces and cross-validation reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/predictor.hpp"
#include "downscaler/random.hpp"
#include "downscaler/stats.hpp"
#include "downscaler/transform.hpp"
#include "downscaler/validation.hpp"

namespace downscaler::io {

namespace fs = std::filesystem;

/// Shortest text that reads back to the same double.
inline std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fixed(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  return out;
}

inline std::uint64_t file_hash(const fs::path& path) { return fnv1a(read_file(path)); }

// ---------------------------------------------------------------------------
// CSV reading

struct CsvRow {
  int line = 0;  // 1-based line number in the file
  std::vector<std::string> fields;
};

struct CsvTable {
  std::string source;
  std::vector<std::string> header;
  std::vector<CsvRow> rows;
};

/// Splits one CSV line; fields may be double-quoted with "" as an escaped quote.
inline std::vector<std::string> split_csv_line(std::string_view line, const std::string& where) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
      was_quoted = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw InputError(where + ": unterminated quoted field");
  out.push_back(std::move(field));
  return out;
}

inline CsvTable parse_csv(std::istream& in, const std::string& source) {
  CsvTable t;
  t.source = source;
  std::string line;
  int n = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + " line " + std::to_string(n);
    auto fields = split_csv_line(line, where);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size())
      throw InputError(where + ": expected " + std::to_string(t.header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    t.rows.push_back({n, std::move(fields)});
  }
  if (!have_header) throw InputError(source + ": missing header");
  return t;
}

inline CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  return parse_csv(in, path.filename().string());
}

inline void expect_header(const CsvTable& t, const std::vector<std::string>& expected) {
  if (t.header == expected) return;
  std::string msg = t.source + " line 1: header must be exactly:";
  for (const auto& h : expected) msg += " " + h;
  throw InputError(msg);
}

namespace detail {

inline double parse_number(const std::string& text, const std::string& where, const char* column) {
  if (text.empty()) throw InputError(where + ": empty " + column);
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw InputError(where + ": invalid " + column + " '" + text + "'");
  }
}

inline std::optional<double> parse_optional(const std::string& text, const std::string& where, const char* column) {
  if (text.empty()) return std::nullopt;
  return parse_number(text, where, column);
}

inline std::vector<std::string> covariate_columns() {
  std::vector<std::string> c;
  for (int j = 0; j < kNumRawCovariates; ++j) c.emplace_back(kCovariateNames[j]);
  return c;
}

template <typename Row>
void parse_covariates(Row& r, const CsvRow& row, std::size_t first, const std::string& where) {
  for (int j = 0; j < kNumRawCovariates; ++j) {
    const auto v = parse_optional(row.fields[first + static_cast<std::size_t>(j)], where,
                                  std::string(kCovariateNames[j]).c_str());
    r.z[j] = v.value_or(0.0);
    r.missing.set(static_cast<std::size_t>(j), !v);
  }
  r.missing.set(kInteractionIndex, !r.aod || r.missing[kTmpIndex]);
}

template <typename Row>
void write_covariates(std::ostream& os, const Row& r) {
  for (int j = 0; j < kNumRawCovariates; ++j) os << ',' << (r.missing[j] ? "" : exact(r.z[j]));
}

}  // namespace detail

inline std::vector<std::string> monitor_header() {
  std::vector<std::string> h{"site_id", "lon", "lat", "date", "pm25", "aod"};
  for (auto& c : detail::covariate_columns()) h.push_back(c);
  h.emplace_back("region");
  return h;
}

inline std::vector<std::string> grid_header() {
  std::vector<std::string> h{"cell_id", "lon", "lat", "date", "aod"};
  for (auto& c : detail::covariate_columns()) h.push_back(c);
  h.emplace_back("region");
  return h;
}

/// Monitor CSV: exact header, one record per row, empty field = missing
/// (pm25 may not be missing).
inline std::vector<MonitorRecord> parse_monitors(const CsvTable& t) {
  expect_header(t, monitor_header());
  std::vector<MonitorRecord> out;
  out.reserve(t.rows.size());
  for (const CsvRow& row : t.rows) {
    const std::string where = t.source + " line " + std::to_string(row.line);
    const auto& f = row.fields;
    try {
      MonitorRecord r;
      if (f[0].empty()) throw InputError("empty site_id");
      r.site = {f[0], detail::parse_number(f[1], where, "lon"), detail::parse_number(f[2], where, "lat")};
      r.day = parse_date(f[3]);
      r.pm25 = detail::parse_number(f[4], where, "pm25");
      r.aod = detail::parse_optional(f[5], where, "aod");
      detail::parse_covariates(r, row, 6, where);
      r.region = parse_region(f[6 + kNumRawCovariates]);
      validate_record(r);
      out.push_back(std::move(r));
    } catch (const InputError& e) {
      const std::string msg = e.what();
      throw InputError(msg.rfind(where, 0) == 0 ? msg : where + ": " + msg);
    }
  }
  return out;
}

inline std::vector<MonitorRecord> read_monitors(const fs::path& path) { return parse_monitors(read_csv(path)); }

struct GridReadResult {
  std::vector<GridCellDay> rows;
  std::vector<std::string> unknown_region_cells;  // sorted, unique
};

/// Grid CSV. Rows whose region is not one of the nine are set aside and
/// their cell ids listed.
inline GridReadResult parse_grid(const CsvTable& t) {
  expect_header(t, grid_header());
  GridReadResult out;
  out.rows.reserve(t.rows.size());
  for (const CsvRow& row : t.rows) {
    const std::string where = t.source + " line " + std::to_string(row.line);
    const auto& f = row.fields;
    try {
      GridCellDay g;
      if (f[0].empty()) throw InputError("empty cell_id");
      g.cell = {f[0], detail::parse_number(f[1], where, "lon"), detail::parse_number(f[2], where, "lat")};
      validate_site(g.cell);
      g.day = parse_date(f[3]);
      g.aod = detail::parse_optional(f[4], where, "aod");
      if (g.aod && *g.aod < 0.0) throw InputError("negative aod");
      detail::parse_covariates(g, row, 5, where);
      try {
        g.region = parse_region(f[5 + kNumRawCovariates]);
      } catch (const InputError&) {
        out.unknown_region_cells.push_back(g.cell.id);
        continue;
      }
      out.rows.push_back(std::move(g));
    } catch (const InputError& e) {
      const std::string msg = e.what();
      throw InputError(msg.rfind(where, 0) == 0 ? msg : where + ": " + msg);
    }
  }
  std::sort(out.unknown_region_cells.begin(), out.unknown_region_cells.end());
  out.unknown_region_cells.erase(std::unique(out.unknown_region_cells.begin(), out.unknown_region_cells.end()),
                                 out.unknown_region_cells.end());
  return out;
}

inline GridReadResult read_grid(const fs::path& path) { return parse_grid(read_csv(path)); }

inline void write_header(std::ostream& os, const std::vector<std::string>& h) {
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? "," : "") << h[i];
  os << '\n';
}

inline void write_monitors(std::ostream& os, std::span<const MonitorRecord> rows) {
  write_header(os, monitor_header());
  for (const auto& r : rows) {
    if (r.standardized) throw InputError("write_monitors expects raw covariates");
    os << r.site.id << ',' << exact(r.site.lon) << ',' << exact(r.site.lat) << ',' << format_date(r.day) << ','
       << exact(r.pm25) << ',' << (r.aod ? exact(*r.aod) : "");
    detail::write_covariates(os, r);
    os << ',' << region_name(r.region) << '\n';
  }
}

inline void write_grid(std::ostream& os, std::span<const GridCellDay> rows) {
  write_header(os, grid_header());
  for (const auto& g : rows) {
    if (g.standardized) throw InputError("write_grid expects raw covariates");
    os << g.cell.id << ',' << exact(g.cell.lon) << ',' << exact(g.cell.lat) << ',' << format_date(g.day) << ','
       << (g.aod ? exact(*g.aod) : "");
    detail::write_covariates(os, g);
    os << ',' << region_name(g.region) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Fitted blocks

inline std::vector<std::string> draws_header(int num_sites, int num_days) {
  std::vector<std::string> h{"draw"};
  for (const auto& n : scalar_parameter_names()) h.push_back(n);
  h.insert(h.end(), {"phi1_index", "phi2_index", "log_likelihood"});
  for (int i = 0; i < num_sites; ++i) h.push_back("w1_" + std::to_string(i));
  for (int i = 0; i < num_sites; ++i) h.push_back("w2_" + std::to_string(i));
  for (int t = 0; t < num_days; ++t) h.push_back("beta0_" + std::to_string(t));
  for (int t = 0; t < num_days; ++t) h.push_back("beta1_" + std::to_string(t));
  return h;
}

/// One row per retained draw with every state component at full precision.
inline void write_draws(std::ostream& os, const PosteriorDraws& d, int num_sites, int num_days) {
  write_header(os, draws_header(num_sites, num_days));
  for (std::size_t k = 0; k < d.size(); ++k) {
    const ModelState& s = d.states[k];
    os << k;
    for (double v : scalar_parameters(s, d.phi_grid)) os << ',' << exact(v);
    os << ',' << s.phi1 << ',' << s.phi2 << ',' << exact(d.log_likelihood[k]);
    for (const Eigen::VectorXd* v : {&s.w1, &s.w2, &s.beta0, &s.beta1})
      for (Eigen::Index i = 0; i < v->size(); ++i) os << ',' << exact((*v)[i]);
    os << '\n';
  }
}

inline PosteriorDraws parse_draws(const CsvTable& t, int num_sites, int num_days, const std::vector<double>& phi_grid) {
  expect_header(t, draws_header(num_sites, num_days));
  PosteriorDraws d;
  d.phi_grid = phi_grid;
  for (const CsvRow& row : t.rows) {
    const std::string where = t.source + " line " + std::to_string(row.line);
    auto num = [&](std::size_t col) { return detail::parse_number(row.fields[col], where, t.header[col].c_str()); };
    ModelState s = ModelState::zeros(num_sites, num_days);
    std::size_t c = 1;
    s.mu0 = num(c++);
    s.mu1 = num(c++);
    for (int j = 0; j < kNumCovariates; ++j) s.gamma[j] = num(c++);
    s.coreg.c1 = num(c++);
    s.coreg.c2 = num(c++);
    s.coreg.c3 = num(c++);
    s.sigma2 = num(c++);
    s.tau0 = num(c++);
    s.tau1 = num(c++);
    c += 2;  // phi in km, recovered from the indices
    s.phi1 = static_cast<int>(num(c++));
    s.phi2 = static_cast<int>(num(c++));
    if (s.phi1 < 0 || s.phi2 < 0 || s.phi1 >= static_cast<int>(phi_grid.size()) ||
        s.phi2 >= static_cast<int>(phi_grid.size()))
      throw InputError(where + ": range index outside the configured grid");
    d.log_likelihood.push_back(num(c++));
    for (Eigen::VectorXd* v : {&s.w1, &s.w2, &s.beta0, &s.beta1})
      for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = num(c++);
    d.states.push_back(std::move(s));
  }
  return d;
}

/// Block membership and latent sites: role,id,lon,lat.
inline void write_block_sites(std::ostream& os, const FittedBlock& fit) {
  write_header(os, {"role", "id", "lon", "lat"});
  auto emit = [&](const char* role, const std::vector<Site>& sites) {
    for (const Site& s : sites) os << role << ',' << s.id << ',' << exact(s.lon) << ',' << exact(s.lat) << '\n';
  };
  emit("latent", fit.sites);
  emit("core_monitor", fit.spec.core_monitors);
  emit("buffer_monitor", fit.spec.buffer_monitors);
  emit("core_cell", fit.spec.core_cells);
  emit("buffer_cell", fit.spec.buffer_cells);
}

inline void parse_block_sites(const CsvTable& t, FittedBlock& fit) {
  expect_header(t, {"role", "id", "lon", "lat"});
  for (const CsvRow& row : t.rows) {
    const std::string where = t.source + " line " + std::to_string(row.line);
    const Site s{row.fields[1], detail::parse_number(row.fields[2], where, "lon"),
                 detail::parse_number(row.fields[3], where, "lat")};
    const std::string& role = row.fields[0];
    if (role == "latent") fit.sites.push_back(s);
    else if (role == "core_monitor") fit.spec.core_monitors.push_back(s);
    else if (role == "buffer_monitor") fit.spec.buffer_monitors.push_back(s);
    else if (role == "core_cell") fit.spec.core_cells.push_back(s);
    else if (role == "buffer_cell") fit.spec.buffer_cells.push_back(s);
    else throw InputError(where + ": unknown role '" + role + "'");
  }
}

/// Per-iteration trace followed by a coefficient table (posterior mean, SD,
/// 95% interval, ESS and a significance flag when the interval excludes 0).
inline void write_diagnostics(std::ostream& os, const PosteriorDraws& d) {
  os << "iteration,log_likelihood,accept_phi1,accept_phi2\n";
  for (std::size_t i = 0; i < d.trace.size(); ++i)
    os << i << ',' << exact(d.trace[i]) << ',' << exact(d.accept_phi1_trace[i]) << ',' << exact(d.accept_phi2_trace[i])
       << '\n';
  os << '\n';
  const PosteriorSummary s = summarize(d);
  os << "parameter,mean,sd,q025,q975,ess,significant\n";
  for (const auto& p : s.parameters)
    os << p.name << ',' << fixed(p.stats.mean) << ',' << fixed(p.stats.sd) << ',' << fixed(p.stats.q025) << ','
       << fixed(p.stats.q975) << ',' << fixed(p.ess) << ',' << (is_coefficient(p.name) && p.stats.significant() ? "*" : "") << '\n';
}

inline void write_summary(std::ostream& os, const PosteriorSummary& s) {
  os << "parameter,mean,sd,q05,q95,q025,q975,ess,significant\n";
  for (const auto& p : s.parameters)
    os << p.name << ',' << fixed(p.stats.mean) << ',' << fixed(p.stats.sd) << ',' << fixed(p.stats.q05) << ','
       << fixed(p.stats.q95) << ',' << fixed(p.stats.q025) << ',' << fixed(p.stats.q975) << ',' << fixed(p.ess) << ','
       << (is_coefficient(p.name) && p.stats.significant() ? "*" : "") << '\n';
}

// ---------------------------------------------------------------------------
// Surfaces and cross-validation

inline void write_surface_header(std::ostream& os) {
  os << "cell_id,lon,lat,period,mean,sd,pi_lo,pi_hi,n_blocks\n";
}

/// A cell-period without contributors is written with empty value fields.
inline void write_surface_row(std::ostream& os, const CellPrediction& p) {
  os << p.cell.id << ',' << exact(p.cell.lon) << ',' << exact(p.cell.lat) << ',' << p.period << ',';
  if (p.n_blocks == 0)
    os << ",,,";
  else
    os << fixed(p.mean) << ',' << fixed(p.sd) << ',' << fixed(p.pi_lo) << ',' << fixed(p.pi_hi);
  os << ',' << p.n_blocks << '\n';
}

inline void write_cv_report(std::ostream& os, const CvReport& r) {
  os << "region,n,r2,rmse,slope,intercept,mean_pi90_length,pi90_coverage\n";
  auto row = [&](std::string_view name, const CvMetrics& m) {
    os << name << ',' << m.n << ',' << fixed(m.r2) << ',' << fixed(m.rmse) << ',' << fixed(m.slope) << ','
       << fixed(m.intercept) << ',' << fixed(m.mean_pi_length) << ',' << fixed(m.coverage) << '\n';
  };
  for (const auto& [region, m] : r.regions) row(region_name(region), m);
  row("overall", r.overall);
}

inline void write_cv_predictions(std::ostream& os, const CvReport& r) {
  os << "record_id,observed,predicted,pi_lo,pi_hi,fold\n";
  for (const auto& p : r.predictions)
    os << p.record_id << ',' << fixed(p.observed) << ',' << fixed(p.mean) << ',' << fixed(p.pi_lo) << ','
       << fixed(p.pi_hi) << ',' << p.fold << '\n';
}

inline void write_cv_issues(std::ostream& os, const CvReport& r) {
  os << "fold,block,reason\n";
  for (const auto& i : r.issues) {
    std::string reason = i.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    os << i.fold << ',' << i.block << ',' << reason << '\n';
  }
}

}  // namespace downscaler::io
