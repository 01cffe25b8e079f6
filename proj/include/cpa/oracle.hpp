// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpa/capacity.hpp"
#include "cpa/types.hpp"

/// Brute-force reference implementations. Each works on plain contiguous arrays, shares
/// no code with the library paths it checks, and favours the most literal reading of
/// the definition over speed.
namespace cpa::oracle {

/// softmax(q K^T / sqrt(d)) V with keys/values as [length][d].
std::vector<double> dense_attention(std::span<const Scalar> query, std::span<const Scalar> keys,
                                    std::span<const Scalar> values, std::size_t length, int head_dim);

/// Window attention scores of one kv head. `window_queries` holds, per query head of
/// the group, w rows of d values ([group][w][d]); `keys` is [length][d]. Window row u
/// sits at position length - w + u and sees positions up to and including its own.
/// Returns the group max of the per-head row softmaxes, averaged over rows.
std::vector<double> attention_scores(std::span<const Scalar> window_queries, int group, int window,
                                     std::span<const Scalar> keys, std::size_t length, int head_dim);

/// Redundancy from the full cosine matrix. With block_size > 0 similarities between
/// different blocks are dropped first (the lightning definition).
std::vector<double> redundancy(std::span<const Scalar> keys, std::size_t length, int head_dim, double p, double tau,
                               int block_size = 0);

/// Position i is kept iff fewer than k positions beat it, where j beats i when
/// s_j > s_i, or s_j == s_i and j > i.
std::vector<bool> topk_exhaustive(std::span<const double> scores, std::size_t k);

/// Largest M, then largest N_total, found by scanning M upwards.
struct CapacityResult {
  bool feasible = false;
  CapacityPlan plan;
};
CapacityResult capacity_bruteforce(const MemoryBudget& budget, bool with_global);

/// The three capacity constraints, evaluated in 128-bit integers.
bool plan_satisfies(const MemoryBudget& budget, const CapacityPlan& plan, bool with_global);

struct SuiteReport {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
  std::vector<std::string> messages;  ///< first few failures

  bool ok() const { return cases > 0 && failures == 0; }
  void fail(std::string message);
};

/// flash vs naive, lightning vs block-diagonal naive, library naive vs oracle; N <= 8,
/// b <= 32, d <= 16, p in {0.3, 0.5, 0.8}; tolerance 1e-6.
SuiteReport redundancy_suite(std::size_t cases, std::uint64_t seed);

/// Paged attention vs dense attention (1e-5) and attention_scores vs the dense
/// reference (1e-6) over random block layouts.
SuiteReport attention_suite(std::size_t cases, std::uint64_t seed);

/// Window-pinned top-k and compaction vs exhaustive top-k: retained set, payload bits
/// (K, V and F), entry count, order and window retention, with and without shared
/// prefix blocks.
SuiteReport topk_suite(std::size_t cases, std::uint64_t seed);

/// Closed form vs brute force and constraint checks over random budgets.
SuiteReport capacity_suite(std::size_t cases, std::uint64_t seed);

}  // namespace cpa::oracle
