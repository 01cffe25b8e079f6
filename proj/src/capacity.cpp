// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/capacity.hpp"

#include <stdexcept>
#include <string>

#include "cpa/errors.hpp"

namespace cpa {

namespace {

// All arithmetic stays in integers. With the global cache, every term is scaled by 2d
// so that (1 + 1/(2d)) * m_kv becomes the integer (2d + 1) * m_kv.
struct ScaledBudget {
  std::int64_t available;
  std::int64_t kv;
  std::int64_t q;
};

ScaledBudget scale(const MemoryBudget& b, bool with_global) {
  if (!with_global) return {b.m_available, b.m_kv, b.m_q};
  const std::int64_t two_d = 2 * b.head_dim;
  return {two_d * b.m_available, (two_d + 1) * b.m_kv, two_d * b.m_q};
}

CapacityPlan closed_form(const MemoryBudget& budget, bool with_global) {
  budget.validate();
  const ScaledBudget s = scale(budget, with_global);
  const std::int64_t denom = s.kv * budget.n_max + s.q;
  CapacityPlan plan{s.available / denom, (s.available * budget.n_max) / denom};
  if (plan.max_concurrency <= 0 || plan.total_blocks <= 0) {
    throw InfeasibleBudget("budget of " + std::to_string(budget.m_available) +
                           " units cannot host a single request");
  }
  return plan;
}

}  // namespace

void MemoryBudget::validate() const {
  if (m_available <= 0 || m_kv <= 0 || m_q <= 0 || head_dim <= 0) {
    throw std::invalid_argument("memory budget fields must be strictly positive");
  }
  if (n_max < 2) throw std::invalid_argument("n_max must be at least 2");
}

CapacityPlan solve_capacity(const MemoryBudget& budget) { return closed_form(budget, false); }

CapacityPlan solve_capacity_with_global(const MemoryBudget& budget) { return closed_form(budget, true); }

CapacityPlan solve_capacity_tight(const MemoryBudget& budget, bool with_global) {
  CapacityPlan plan = closed_form(budget, with_global);
  const ScaledBudget s = scale(budget, with_global);
  plan.total_blocks = (s.available - plan.max_concurrency * s.q) / s.kv;
  return plan;
}

CapacityPlan enumerate_feasible(const MemoryBudget& budget, bool with_global) {
  budget.validate();
  const ScaledBudget s = scale(budget, with_global);
  CapacityPlan best;
  // For a fixed N_total the feasible M form the interval [1, min(N/n_max, (avail - kv*N)/q)].
  for (std::int64_t blocks = 1; s.kv * blocks < s.available; ++blocks) {
    const std::int64_t by_blocks = blocks / budget.n_max;
    const std::int64_t by_memory = (s.available - s.kv * blocks) / s.q;
    const std::int64_t m = by_blocks < by_memory ? by_blocks : by_memory;
    if (m <= 0) continue;
    if (m > best.max_concurrency || (m == best.max_concurrency && blocks > best.total_blocks)) {
      best = {m, blocks};
    }
  }
  if (best.max_concurrency == 0) {
    throw InfeasibleBudget("no feasible (M, N_total) for " + std::to_string(budget.m_available) + " units");
  }
  return best;
}

bool plan_is_feasible(const MemoryBudget& budget, const CapacityPlan& plan, bool with_global) {
  const ScaledBudget s = scale(budget, with_global);
  return plan.max_concurrency > 0 && plan.total_blocks > 0 &&
         s.kv * plan.total_blocks + plan.max_concurrency * s.q <= s.available &&
         plan.max_concurrency * budget.n_max <= plan.total_blocks;
}

}  // namespace cpa
