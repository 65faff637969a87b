#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <string_view>

namespace downscaler {

using Rng = std::mt19937_64;

/// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed from a master seed and a path of indices
/// (e.g. fold, block ordinal).
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(master);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// FNV-1a, used for stable string hashing (cell ids, config text).
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline double std_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline Eigen::VectorXd std_normal_vector(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = dist(rng);
  return z;
}

/// Gamma(shape, rate) draw.
inline double gamma_draw(Rng& rng, double shape, double rate) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

/// Inverse-Gamma(shape, scale) draw.
inline double inv_gamma_draw(Rng& rng, double shape, double scale) { return 1.0 / gamma_draw(rng, shape, scale); }

/// Draw from N(mean, sd^2) restricted to (lower, inf).
///
/// Plain rejection when the bound is below the mean's neighbourhood, Robert's
/// translated-exponential proposal in the tail.
inline double truncated_normal_below(Rng& rng, double mean, double sd, double lower) {
  const double alpha = (lower - mean) / sd;
  if (alpha < 0.5) {
    for (;;) {
      const double z = std_normal(rng);
      if (z > alpha) return mean + sd * z;
    }
  }
  const double lambda = 0.5 * (alpha + std::sqrt(alpha * alpha + 4.0));
  for (;;) {
    const double z = alpha - std::log(1.0 - uniform01(rng)) / lambda;
    const double rho = std::exp(-0.5 * (z - lambda) * (z - lambda));
    if (uniform01(rng) <= rho) return mean + sd * z;
  }
}

}  // namespace downscaler
