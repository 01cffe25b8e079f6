// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>
#include <stdexcept>

#include "cpa/capacity.hpp"
#include "cpa/errors.hpp"
#include "cpa/oracle.hpp"

using cpa::CapacityPlan;
using cpa::MemoryBudget;

namespace {

MemoryBudget budget(std::int64_t m, std::int64_t kv, std::int64_t q, std::int64_t n_max, std::int64_t d = 1) {
  return MemoryBudget{m, kv, q, n_max, d};
}

}  // namespace

TEST_CASE("closed form matches hand evaluation") {
  CHECK(cpa::solve_capacity(budget(100, 2, 4, 4)) == CapacityPlan{8, 33});
  CHECK(cpa::solve_capacity(budget(12, 2, 4, 4)) == CapacityPlan{1, 4});
  CHECK_THROWS_AS(cpa::solve_capacity(budget(11, 2, 4, 4)), cpa::InfeasibleBudget);
}

TEST_CASE("closed form with the global score cache") {
  CHECK(cpa::solve_capacity_with_global(budget(100, 2, 4, 4, 2)) == CapacityPlan{7, 28});
  CHECK(cpa::solve_capacity_with_global(budget(100, 2, 4, 4, 1)) == CapacityPlan{6, 25});
  // Large d: the inflation factor tends to 1.
  CHECK(cpa::solve_capacity_with_global(budget(100, 2, 4, 4, 1'000'000)) == cpa::solve_capacity(budget(100, 2, 4, 4)));
}

TEST_CASE("exhaustive search") {
  CHECK(cpa::enumerate_feasible(budget(100, 2, 4, 4)) == CapacityPlan{8, 34});
  CHECK(cpa::enumerate_feasible(budget(12, 2, 4, 4)) == CapacityPlan{1, 4});
  CHECK_THROWS_AS(cpa::enumerate_feasible(budget(11, 2, 4, 4)), cpa::InfeasibleBudget);
}

TEST_CASE("tight closed form equals exhaustive search") {
  CHECK(cpa::solve_capacity_tight(budget(100, 2, 4, 4)) == CapacityPlan{8, 34});
  std::mt19937_64 rng(17);
  for (int i = 0; i < 300; ++i) {
    const MemoryBudget b = budget(std::uniform_int_distribution<std::int64_t>(1, 20000)(rng),
                                  std::uniform_int_distribution<std::int64_t>(1, 64)(rng),
                                  std::uniform_int_distribution<std::int64_t>(1, 64)(rng),
                                  std::uniform_int_distribution<std::int64_t>(2, 8)(rng),
                                  std::uniform_int_distribution<std::int64_t>(1, 16)(rng));
    for (bool global : {false, true}) {
      CapacityPlan want;
      bool feasible = true;
      try {
        want = cpa::enumerate_feasible(b, global);
      } catch (const cpa::InfeasibleBudget&) {
        feasible = false;
      }
      if (!feasible) {
        CHECK_THROWS_AS(cpa::solve_capacity_tight(b, global), cpa::InfeasibleBudget);
        continue;
      }
      CHECK(cpa::solve_capacity_tight(b, global) == want);
      const CapacityPlan closed = global ? cpa::solve_capacity_with_global(b) : cpa::solve_capacity(b);
      CHECK(closed.max_concurrency == want.max_concurrency);
      CHECK(closed.total_blocks <= want.total_blocks);
      CHECK(cpa::plan_is_feasible(b, closed, global));
      CHECK(cpa::oracle::plan_satisfies(b, closed, global));
    }
  }
}

TEST_CASE("plan feasibility check") {
  const MemoryBudget b = budget(100, 2, 4, 4);
  CHECK(cpa::plan_is_feasible(b, {8, 34}));
  CHECK_FALSE(cpa::plan_is_feasible(b, {8, 35}));  // 70 + 32 > 100
  CHECK_FALSE(cpa::plan_is_feasible(b, {9, 34}));  // 9 * 4 > 34
  CHECK_FALSE(cpa::plan_is_feasible(b, {0, 10}));
}

TEST_CASE("budget validation") {
  CHECK_THROWS_AS(budget(100, 2, 4, 1).validate(), std::invalid_argument);
  CHECK_THROWS_AS(budget(100, 0, 4, 4).validate(), std::invalid_argument);
  CHECK_THROWS_AS(budget(-1, 2, 4, 4).validate(), std::invalid_argument);
  CHECK_THROWS_AS(budget(100, 2, 4, 4, 0).validate(), std::invalid_argument);
  CHECK_NOTHROW(budget(100, 2, 4, 2).validate());
}

TEST_CASE("oracle suite agrees") {
  const auto r = cpa::oracle::capacity_suite(200, 99);
  CHECK(r.ok());
}
