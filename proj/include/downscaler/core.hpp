#pragma once

// Domain types shared by every stage of the downscaler: sites, calendar days,
// climate regions, the three 4-month fitting windows, monitor/grid records and
// the (region x window) block partition with its buffer membership.

#include <algorithm>
#include <array>
#include <bitset>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "downscaler/errors.hpp"

namespace downscaler {

inline constexpr double kEarthRadiusKm = 6371.0;

/// A point-referenced location: monitor or grid-cell centroid.
struct Site {
  std::string id;
  double lon = 0.0;  // degrees
  double lat = 0.0;  // degrees

  friend bool operator==(const Site&, const Site&) = default;
};

inline void validate_site(const Site& s) {
  if (!std::isfinite(s.lon) || !std::isfinite(s.lat))
    throw InputError("site '" + s.id + "' has non-finite coordinates");
  if (s.lon < -180.0 || s.lon > 180.0 || s.lat < -90.0 || s.lat > 90.0)
    throw InputError("site '" + s.id + "' has coordinates outside lon [-180,180] / lat [-90,90]");
}

/// Great-circle distance on a sphere of radius 6371 km.
inline double haversine_km(const Site& a, const Site& b) {
  if (!std::isfinite(a.lon) || !std::isfinite(a.lat) || !std::isfinite(b.lon) || !std::isfinite(b.lat))
    throw InputError("haversine_km: non-finite coordinates");
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double phi1 = a.lat * kDeg;
  const double phi2 = b.lat * kDeg;
  const double dphi = (b.lat - a.lat) * kDeg;
  const double dlambda = (b.lon - a.lon) * kDeg;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  const double h = std::clamp(s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2, 0.0, 1.0);
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

// ---------------------------------------------------------------------------
// Calendar

using Date = std::chrono::year_month_day;

inline Date parse_date(std::string_view text) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  const std::string buf(text);
  if (buf.size() != 10 || std::sscanf(buf.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3)
    throw InputError("invalid date '" + buf + "' (expected YYYY-MM-DD)");
  const Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw InputError("invalid calendar date '" + buf + "'");
  return date;
}

inline std::string format_date(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                static_cast<unsigned>(d.day()));
  return buf;
}

inline int days_between(const Date& from, const Date& to) {
  return static_cast<int>((std::chrono::sys_days{to} - std::chrono::sys_days{from}).count());
}

inline Date add_days(const Date& d, int n) { return Date{std::chrono::sys_days{d} + std::chrono::days{n}}; }

// ---------------------------------------------------------------------------
// Climate regions

enum class RegionId : int {
  West = 0,
  Northwest,
  Southwest,
  NorthernRockies,
  UpperMidwest,
  South,
  Southeast,
  OhioValley,
  Northeast,
};

inline constexpr int kNumRegions = 9;

inline constexpr std::array<RegionId, kNumRegions> kAllRegions{
    RegionId::West,  RegionId::Northwest, RegionId::Southwest,  RegionId::NorthernRockies, RegionId::UpperMidwest,
    RegionId::South, RegionId::Southeast, RegionId::OhioValley, RegionId::Northeast};

inline std::string_view region_name(RegionId r) {
  static constexpr std::array<std::string_view, kNumRegions> kNames{
      "West", "Northwest", "Southwest", "NorthernRockies", "UpperMidwest", "South", "Southeast", "OhioValley",
      "Northeast"};
  return kNames[static_cast<int>(r)];
}

inline RegionId parse_region(std::string_view text) {
  auto lower = [](std::string_view s) {
    std::string out;
    for (char c : s)
      if (c != ' ' && c != '_' && c != '-') out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
  };
  const std::string key = lower(text);
  for (RegionId r : kAllRegions)
    if (lower(region_name(r)) == key) return r;
  throw InputError("unknown climate region '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Temporal windows: Jan 1-Apr 30, May 1-Aug 31, Sep 1-Dec 31.

inline constexpr int kNumWindows = 3;

struct TemporalWindow {
  int index = 1;  // 1, 2 or 3
  Date first;
  Date last;

  int num_days() const { return days_between(first, last) + 1; }
  bool contains(const Date& d) const { return days_between(first, d) >= 0 && days_between(d, last) >= 0; }
  int day_index(const Date& d) const { return days_between(first, d); }
};

inline TemporalWindow make_window(int year, int index) {
  using namespace std::chrono;
  const auto y = std::chrono::year{year};
  switch (index) {
    case 1: return {1, Date{y, January, day{1}}, Date{y, April, day{30}}};
    case 2: return {2, Date{y, May, day{1}}, Date{y, August, day{31}}};
    case 3: return {3, Date{y, September, day{1}}, Date{y, December, day{31}}};
    default: throw ParameterError("temporal window index must be 1, 2 or 3");
  }
}

inline int window_index_of(const Date& d) {
  const unsigned m = static_cast<unsigned>(d.month());
  return m <= 4 ? 1 : (m <= 8 ? 2 : 3);
}

// ---------------------------------------------------------------------------
// Records

/// Covariate order: fire, forest, emission, rh, tmp, vgrd, ugrd, hpbl, road, aod x tmp.
inline constexpr int kNumCovariates = 10;
inline constexpr int kNumRawCovariates = 9;
inline constexpr int kTmpIndex = 4;
inline constexpr int kInteractionIndex = 9;

inline constexpr std::array<std::string_view, kNumCovariates> kCovariateNames{
    "fire", "forest", "emission", "rh", "tmp", "vgrd", "ugrd", "hpbl", "road", "aod_x_tmp"};

using Covariates = std::array<double, kNumCovariates>;
using CovariateMask = std::bitset<kNumCovariates>;

/// One PM2.5 observation. Until standardized, z[0..8] hold raw covariates and
/// z[9] is unset; afterwards z holds the model design covariates.
struct MonitorRecord {
  Site site;
  Date day;
  double pm25 = 0.0;
  std::optional<double> aod;
  Covariates z{};
  CovariateMask missing;  // bit set = covariate missing
  RegionId region = RegionId::West;
  bool standardized = false;

  /// Usable in the likelihood: AOD present and no missing covariate.
  bool complete() const { return aod.has_value() && missing.none(); }
};

/// One prediction target: a grid cell on one day.
struct GridCellDay {
  Site cell;
  Date day;
  std::optional<double> aod;
  Covariates z{};
  CovariateMask missing;
  RegionId region = RegionId::West;
  bool standardized = false;

  bool complete() const { return aod.has_value() && missing.none(); }
};

inline void validate_record(const MonitorRecord& r) {
  validate_site(r.site);
  if (!std::isfinite(r.pm25) || r.pm25 < 0.0)
    throw InputError("record at site '" + r.site.id + "' on " + format_date(r.day) + " has invalid pm25");
  if (r.aod && (!std::isfinite(*r.aod) || *r.aod < 0.0))
    throw InputError("record at site '" + r.site.id + "' on " + format_date(r.day) + " has invalid aod");
}

/// Single study year shared by all records; mixing years is an input error.
template <typename Range>
int study_year(const Range& rows) {
  std::optional<int> year;
  for (const auto& r : rows) {
    const int y = static_cast<int>(r.day.year());
    if (year && *year != y) throw InputError("records span more than one study year");
    year = y;
  }
  if (!year) throw InputError("no records");
  return *year;
}

// ---------------------------------------------------------------------------
// Blocks

struct BlockSpec {
  RegionId region = RegionId::West;
  TemporalWindow window;
  std::vector<Site> core_monitors;  // sorted by id
  std::vector<Site> buffer_monitors;
  std::vector<Site> core_cells;
  std::vector<Site> buffer_cells;

  std::string name() const { return std::string(region_name(region)) + "_w" + std::to_string(window.index); }
  int ordinal() const { return static_cast<int>(region) * kNumWindows + (window.index - 1); }

  bool has_monitor(const std::string& id) const { return contains(core_monitors, id) || contains(buffer_monitors, id); }
  bool has_cell(const std::string& id) const { return contains(core_cells, id) || contains(buffer_cells, id); }

  static bool contains(const std::vector<Site>& sites, const std::string& id) {
    auto it = std::lower_bound(sites.begin(), sites.end(), id, [](const Site& s, const std::string& v) { return s.id < v; });
    return it != sites.end() && it->id == id;
  }
};

using RegionMap = std::map<std::string, RegionId>;

namespace detail {

/// Bounding-box prefilter followed by exact distances.
class RegionExtent {
 public:
  explicit RegionExtent(std::vector<Site> sites) : sites_(std::move(sites)) {
    for (const Site& s : sites_) {
      lat_lo_ = std::min(lat_lo_, s.lat);
      lat_hi_ = std::max(lat_hi_, s.lat);
    }
  }

  bool empty() const { return sites_.empty(); }

  bool within(const Site& p, double radius_km) const {
    const double dlat = radius_km / (kEarthRadiusKm * std::numbers::pi / 180.0);
    if (p.lat < lat_lo_ - dlat - 1e-9 || p.lat > lat_hi_ + dlat + 1e-9) return false;
    for (const Site& s : sites_)
      if (std::abs(s.lat - p.lat) <= dlat + 1e-9 && haversine_km(s, p) <= radius_km) return true;
    return false;
  }

 private:
  std::vector<Site> sites_;
  double lat_lo_ = 90.0;
  double lat_hi_ = -90.0;
};

inline void sort_unique(std::vector<Site>& v) {
  std::sort(v.begin(), v.end(), [](const Site& a, const Site& b) { return a.id < b.id; });
  v.erase(std::unique(v.begin(), v.end(), [](const Site& a, const Site& b) { return a.id == b.id; }), v.end());
}

}  // namespace detail

/// Builds the 9 x 3 block partition.
///
/// Core membership comes from each site's region in `region_map`. A site is a
/// buffer member of a foreign region R when its great-circle distance to R's
/// extent is at most `buffer_km`. R's extent is its core grid-cell centroids,
/// or its monitor sites when the grid has no cells in R. Monitors enter a
/// window's blocks only if they have at least one record in that window; grid
/// cells belong to all three windows.
inline std::vector<BlockSpec> assign_blocks(std::span<const MonitorRecord> monitors, std::span<const Site> cells,
                                            const RegionMap& region_map, double buffer_km) {
  if (!(buffer_km > 0.0)) throw ParameterError("buffer_km must be positive");

  std::vector<std::string> unknown;
  auto lookup = [&](const std::string& id) -> std::optional<RegionId> {
    auto it = region_map.find(id);
    if (it == region_map.end()) {
      unknown.push_back(id);
      return std::nullopt;
    }
    return it->second;
  };

  // Unique monitor sites and their windows.
  std::map<std::string, Site> monitor_sites;
  std::map<std::string, std::array<bool, kNumWindows>> monitor_windows;
  std::optional<int> year;
  for (const MonitorRecord& r : monitors) {
    monitor_sites.emplace(r.site.id, r.site);
    monitor_windows[r.site.id][window_index_of(r.day) - 1] = true;
    const int y = static_cast<int>(r.day.year());
    if (year && *year != y) throw InputError("records span more than one study year");
    year = y;
  }
  std::map<std::string, Site> cell_sites;
  for (const Site& c : cells) cell_sites.emplace(c.id, c);
  if (!year) year = 2011;

  std::map<std::string, RegionId> monitor_region, cell_region;
  for (const auto& [id, s] : monitor_sites)
    if (auto r = lookup(id)) monitor_region[id] = *r;
  for (const auto& [id, s] : cell_sites)
    if (auto r = lookup(id)) cell_region[id] = *r;
  if (!unknown.empty()) {
    std::sort(unknown.begin(), unknown.end());
    unknown.erase(std::unique(unknown.begin(), unknown.end()), unknown.end());
    std::string msg = "sites missing from region map:";
    for (const auto& id : unknown) msg += " " + id;
    throw InputError(msg);
  }

  std::array<std::vector<Site>, kNumRegions> region_cells, region_monitors;
  for (const auto& [id, r] : cell_region) region_cells[static_cast<int>(r)].push_back(cell_sites.at(id));
  for (const auto& [id, r] : monitor_region) region_monitors[static_cast<int>(r)].push_back(monitor_sites.at(id));

  std::vector<detail::RegionExtent> extents;
  extents.reserve(kNumRegions);
  for (int r = 0; r < kNumRegions; ++r)
    extents.emplace_back(region_cells[r].empty() ? region_monitors[r] : region_cells[r]);

  std::vector<BlockSpec> blocks;
  blocks.reserve(kNumRegions * kNumWindows);
  for (RegionId region : kAllRegions)
    for (int w = 1; w <= kNumWindows; ++w) blocks.push_back(BlockSpec{region, make_window(*year, w), {}, {}, {}, {}});

  auto block_at = [&](int region, int w) -> BlockSpec& { return blocks[region * kNumWindows + w]; };

  for (const auto& [id, home] : monitor_region) {
    const Site& s = monitor_sites.at(id);
    const auto& windows = monitor_windows.at(id);
    for (int r = 0; r < kNumRegions; ++r) {
      const bool core = r == static_cast<int>(home);
      if (!core && (extents[r].empty() || !extents[r].within(s, buffer_km))) continue;
      for (int w = 0; w < kNumWindows; ++w) {
        if (!windows[w]) continue;
        (core ? block_at(r, w).core_monitors : block_at(r, w).buffer_monitors).push_back(s);
      }
    }
  }
  for (const auto& [id, home] : cell_region) {
    const Site& s = cell_sites.at(id);
    for (int r = 0; r < kNumRegions; ++r) {
      const bool core = r == static_cast<int>(home);
      if (!core && (region_cells[r].empty() || !extents[r].within(s, buffer_km))) continue;
      for (int w = 0; w < kNumWindows; ++w)
        (core ? block_at(r, w).core_cells : block_at(r, w).buffer_cells).push_back(s);
    }
  }
  for (BlockSpec& b : blocks) {
    detail::sort_unique(b.core_monitors);
    detail::sort_unique(b.buffer_monitors);
    detail::sort_unique(b.core_cells);
    detail::sort_unique(b.buffer_cells);
  }
  return blocks;
}

/// Region map built from the region column of monitor and grid rows.
/// A site listed with two different regions is an input error.
template <typename MonRange, typename CellRange>
RegionMap build_region_map(const MonRange& monitors, const CellRange& cells) {
  RegionMap map;
  auto add = [&](const std::string& id, RegionId r) {
    auto [it, inserted] = map.emplace(id, r);
    if (!inserted && it->second != r) throw InputError("site '" + id + "' is assigned to two regions");
  };
  for (const auto& m : monitors) add(m.site.id, m.region);
  for (const auto& c : cells) add(c.cell.id, c.region);
  return map;
}

/// Unique cell sites of a grid, ordered by id.
inline std::vector<Site> unique_cells(std::span<const GridCellDay> grid) {
  std::vector<Site> out;
  out.reserve(grid.size());
  for (const auto& g : grid) out.push_back(g.cell);
  detail::sort_unique(out);
  return out;
}

}  // namespace downscaler
