// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace cpa {

/// Memory budget in abstract integer units. Callers map bytes to units.
struct MemoryBudget {
  std::int64_t m_available = 0;
  std::int64_t m_kv = 0;     ///< units per KV block (K and V together)
  std::int64_t m_q = 0;      ///< units per request's observation-window query cache
  std::int64_t n_max = 0;    ///< block cap per request
  std::int64_t head_dim = 1; ///< only consulted when the global score cache is sized in

  /// Throws std::invalid_argument unless every field is positive and n_max >= 2.
  void validate() const;
};

struct CapacityPlan {
  std::int64_t max_concurrency = 0;
  std::int64_t total_blocks = 0;

  friend bool operator==(const CapacityPlan&, const CapacityPlan&) = default;
};

/// Closed-form maximum concurrency and block count:
///   M       = floor(m_available / (m_kv * n_max + m_q))
///   N_total = floor(m_available / (m_kv + m_q / n_max))
/// N_total is the continuous relaxation and may sit one or more blocks below the
/// integer optimum; enumerate_feasible() gives the tight value.
/// Throws InfeasibleBudget when either quantity is zero.
CapacityPlan solve_capacity(const MemoryBudget& budget);

/// Same closed form with the per-block cost inflated by (1 + 1/(2d)) to account for
/// the global-score cache F, which stores one scalar per K/V entry pair.
CapacityPlan solve_capacity_with_global(const MemoryBudget& budget);

/// Closed-form M with every leftover unit spent on blocks:
///   N_total = floor((m_available - M * m_q) / m_kv)
/// Equals enumerate_feasible() in O(1).
CapacityPlan solve_capacity_tight(const MemoryBudget& budget, bool with_global = false);

/// Exhaustive integer search over (M, N_total). Maximises M, then N_total.
/// Intended for budgets up to ~10^6 units.
CapacityPlan enumerate_feasible(const MemoryBudget& budget, bool with_global = false);

/// True iff `plan` satisfies all three capacity constraints for `budget`.
bool plan_is_feasible(const MemoryBudget& budget, const CapacityPlan& plan, bool with_global = false);

}  // namespace cpa
