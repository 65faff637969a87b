#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "downscaler/core.hpp"

namespace downscaler {

/// Denominator used for the standard deviation of each covariate column.
enum class SdConvention { Sample, Population };  // n-1 or n

struct ColumnTransform {
  bool log_first = false;
  double log_offset = 0.0;  // 1 when the training column contained values <= 0
  double mean = 0.0;
  double sd = 1.0;
};

/// Recorded covariate preprocessing: optional log, then z-score. PM2.5 and
/// AOD are never transformed; the aod x tmp interaction is formed afterwards
/// from the raw AOD and the standardized temperature.
struct TransformSpec {
  std::array<ColumnTransform, kNumRawCovariates> columns{};
  SdConvention convention = SdConvention::Sample;
  std::size_t n_train = 0;

  static constexpr std::array<bool, kNumRawCovariates> kLogColumns{true,  false, true,  false, false,
                                                                    false, false, false, true};
};

namespace detail {

inline double forward_column(const ColumnTransform& c, double raw, int col) {
  double v = raw;
  if (c.log_first) {
    const double shifted = raw + c.log_offset;
    if (!(shifted > 0.0))
      throw InputError("covariate '" + std::string(kCovariateNames[col]) + "' value " + std::to_string(raw) +
                       " cannot be log-transformed");
    v = std::log(shifted);
  }
  return (v - c.mean) / c.sd;
}

template <typename Row>
Row standardize_row(const TransformSpec& spec, const Row& row) {
  if (row.standardized) throw InputError("covariates are already standardized; re-applying a transform is not allowed");
  Row out = row;
  for (int j = 0; j < kNumRawCovariates; ++j) {
    if (row.missing[j]) {
      out.z[j] = 0.0;
      continue;
    }
    out.z[j] = forward_column(spec.columns[j], row.z[j], j);
  }
  if (row.aod && !row.missing[kTmpIndex]) {
    out.z[kInteractionIndex] = *row.aod * out.z[kTmpIndex];
    out.missing.reset(kInteractionIndex);
  } else {
    out.z[kInteractionIndex] = 0.0;
    out.missing.set(kInteractionIndex);
  }
  out.standardized = true;
  return out;
}

}  // namespace detail

/// Fits log flags, offsets, means and SDs on the complete training records.
inline TransformSpec fit_transform(std::span<const MonitorRecord> records,
                                   SdConvention convention = SdConvention::Sample) {
  TransformSpec spec;
  spec.convention = convention;
  std::vector<const MonitorRecord*> rows;
  for (const auto& r : records) {
    if (r.standardized) throw InputError("fit_transform expects raw covariates");
    CovariateMask raw_missing = r.missing;
    raw_missing.reset(kInteractionIndex);
    if (r.aod && raw_missing.none()) rows.push_back(&r);
  }
  spec.n_train = rows.size();
  const std::size_t min_rows = convention == SdConvention::Sample ? 2 : 1;
  if (rows.size() < min_rows) throw InputError("fit_transform: not enough complete records");

  for (int j = 0; j < kNumRawCovariates; ++j) {
    ColumnTransform& c = spec.columns[j];
    c.log_first = TransformSpec::kLogColumns[j];
    if (c.log_first) {
      bool nonpositive = false;
      for (const auto* r : rows) nonpositive = nonpositive || r->z[j] <= 0.0;
      c.log_offset = nonpositive ? 1.0 : 0.0;
    }
    ColumnTransform raw = c;
    raw.mean = 0.0;
    raw.sd = 1.0;
    double sum = 0.0;
    std::vector<double> values;
    values.reserve(rows.size());
    for (const auto* r : rows) {
      values.push_back(detail::forward_column(raw, r->z[j], j));
      sum += values.back();
    }
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double denom = static_cast<double>(values.size()) - (convention == SdConvention::Sample ? 1.0 : 0.0);
    const double sd = std::sqrt(ss / denom);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
      throw InputError("covariate '" + std::string(kCovariateNames[j]) + "' has zero variance");
    c.mean = mean;
    c.sd = sd;
  }
  return spec;
}

inline std::vector<MonitorRecord> apply_transform(const TransformSpec& spec, std::span<const MonitorRecord> rows) {
  std::vector<MonitorRecord> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(detail::standardize_row(spec, r));
  return out;
}

inline std::vector<GridCellDay> apply_transform(const TransformSpec& spec, std::span<const GridCellDay> rows) {
  std::vector<GridCellDay> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(detail::standardize_row(spec, r));
  return out;
}

inline MonitorRecord apply_transform(const TransformSpec& spec, const MonitorRecord& r) {
  return detail::standardize_row(spec, r);
}
inline GridCellDay apply_transform(const TransformSpec& spec, const GridCellDay& r) {
  return detail::standardize_row(spec, r);
}

// Key-value text form, one "key = value" per line.

inline void write_transform(std::ostream& os, const TransformSpec& spec) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "convention = " << (spec.convention == SdConvention::Sample ? "sample" : "population") << "\n";
  os << "n_train = " << spec.n_train << "\n";
  for (int j = 0; j < kNumRawCovariates; ++j) {
    const auto& c = spec.columns[j];
    const std::string k(kCovariateNames[j]);
    os << k << ".log_first = " << (c.log_first ? 1 : 0) << "\n";
    os << k << ".log_offset = " << num(c.log_offset) << "\n";
    os << k << ".mean = " << num(c.mean) << "\n";
    os << k << ".sd = " << num(c.sd) << "\n";
  }
}

inline TransformSpec read_transform(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("transform file: malformed line '" + line + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw InputError("transform file: missing key '" + k + "'");
    return it->second;
  };
  TransformSpec spec;
  const std::string& conv = get("convention");
  if (conv == "sample")
    spec.convention = SdConvention::Sample;
  else if (conv == "population")
    spec.convention = SdConvention::Population;
  else
    throw InputError("transform file: unknown convention '" + conv + "'");
  spec.n_train = std::stoull(get("n_train"));
  for (int j = 0; j < kNumRawCovariates; ++j) {
    const std::string k(kCovariateNames[j]);
    auto& c = spec.columns[j];
    c.log_first = get(k + ".log_first") == "1";
    c.log_offset = std::stod(get(k + ".log_offset"));
    c.mean = std::stod(get(k + ".mean"));
    c.sd = std::stod(get(k + ".sd"));
  }
  return spec;
}

}  // namespace downscaler
