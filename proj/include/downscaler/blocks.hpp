#pragma once

// Fitting one (region, window) block from raw monitor records, and the
// bounded worker pool used to run independent jobs.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "downscaler/core.hpp"
#include "downscaler/errors.hpp"
#include "downscaler/mcmc.hpp"
#include "downscaler/predictor.hpp"
#include "downscaler/random.hpp"
#include "downscaler/transform.hpp"

namespace downscaler {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Jobs must write only
/// to their own slot of any shared output. The first exception is rethrown
/// after all threads finish.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers < 1) throw ParameterError("worker count must be at least 1");
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Chain stream for a block: stream 0 is the main fit, 1 + f is CV fold f.
inline std::uint64_t block_chain_seed(std::uint64_t master, std::uint64_t stream, int ordinal) {
  return derive_seed(master, {1, stream, static_cast<std::uint64_t>(ordinal)});
}

/// Records of the block's core and buffer monitors inside its window.
inline std::vector<MonitorRecord> block_records(const BlockSpec& spec, std::span<const MonitorRecord> records) {
  std::vector<MonitorRecord> out;
  for (const MonitorRecord& r : records)
    if (spec.window.contains(r.day) && spec.has_monitor(r.site.id)) out.push_back(r);
  return out;
}

inline bool block_is_empty(const BlockSpec& spec) { return spec.core_monitors.empty(); }

/// Fits one block: per-block standardization of its training records, then a
/// single chain. Degenerate blocks (fewer than 2 latent sites or 2 days)
/// raise InputError.
inline FittedBlock fit_block(const BlockSpec& spec, std::span<const MonitorRecord> records, const ChainConfig& config,
                             std::uint64_t seed) {
  config.validate();
  const std::vector<MonitorRecord> rows = block_records(spec, records);
  std::set<std::string> sites;
  std::set<int> days;
  for (const auto& r : rows)
    if (r.complete()) {
      sites.insert(r.site.id);
      days.insert(spec.window.day_index(r.day));
    }
  if (sites.size() < 2)
    throw InputError("block " + spec.name() + " has " + std::to_string(sites.size()) +
                     " monitor(s) with complete records; at least 2 are required");
  if (days.size() < 2) throw InputError("block " + spec.name() + " has complete records on fewer than 2 days");

  FittedBlock fit;
  fit.spec = spec;
  fit.transform = fit_transform(rows);
  const std::vector<MonitorRecord> standardized = apply_transform(fit.transform, std::span<const MonitorRecord>(rows));
  const BlockData data = make_block_data(standardized, spec.window);
  if (data.num_sites() < 2)
    throw InputError("block " + spec.name() + " has fewer than 2 distinct monitor locations");
  fit.sites = data.sites;
  fit.config = config;
  fit.num_records = data.num_records();
  fit.draws = run_chain(data, config, seed);
  return fit;
}

/// Result of a fit job: the fitted block, or why it was not fitted.
struct BlockOutcome {
  BlockSpec spec;
  std::optional<FittedBlock> fit;
  bool empty = false;  // no core monitors with records in the window
  std::string reason;

  bool skipped() const { return !fit && !empty; }
};

/// Fits every non-empty block on up to `workers` threads. Input, parameter and
/// numerical failures of a single block mark it skipped; results come back in
/// block order regardless of scheduling.
inline std::vector<BlockOutcome> fit_blocks(const std::vector<BlockSpec>& specs, std::span<const MonitorRecord> records,
                                            const ChainConfig& config, std::uint64_t stream, int workers) {
  std::vector<BlockOutcome> out(specs.size());
  parallel_for(specs.size(), workers, [&](std::size_t i) {
    BlockOutcome& o = out[i];
    o.spec = specs[i];
    if (block_is_empty(specs[i])) {
      o.empty = true;
      return;
    }
    try {
      o.fit = fit_block(specs[i], records, config, block_chain_seed(config.master_seed, stream, specs[i].ordinal()));
    } catch (const std::exception& e) {
      o.reason = e.what();
    }
  });
  return out;
}

}  // namespace downscaler
