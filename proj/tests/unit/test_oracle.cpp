// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "cpa/oracle.hpp"

namespace oracle = cpa::oracle;

// The oracles are checked against hand-computed values before they are trusted to
// judge the library.

TEST_CASE("dense attention by hand") {
  // Keys e1 and e2 with q = (ln 3 * sqrt 2, 0): weights 3/4 and 1/4.
  const std::vector<cpa::Scalar> q = {static_cast<cpa::Scalar>(std::log(3.0) * std::sqrt(2.0)), 0};
  const std::vector<cpa::Scalar> k = {1, 0, 0, 1};
  const std::vector<cpa::Scalar> v = {4, 0, 0, 8};
  const auto out = oracle::dense_attention(q, k, v, 2, 2);
  CHECK(out[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(out[1] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("attention scores by hand") {
  // One query head, window 1, zero query: uniform weights over both keys.
  const std::vector<cpa::Scalar> wq = {0, 0};
  const std::vector<cpa::Scalar> k = {1, 0, 0, 1};
  const auto s = oracle::attention_scores(wq, 1, 1, k, 2, 2);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));
}

TEST_CASE("exhaustive top-k") {
  const std::vector<double> s = {0.1, 0.9, 0.2, 0.9};
  CHECK(oracle::topk_exhaustive(s, 2) == std::vector<bool>{false, true, false, true});
  CHECK(oracle::topk_exhaustive(s, 1) == std::vector<bool>{false, false, false, true});
  CHECK(oracle::topk_exhaustive(s, 0) == std::vector<bool>{false, false, false, false});
  CHECK(oracle::topk_exhaustive(s, 4) == std::vector<bool>{true, true, true, true});
}

TEST_CASE("redundancy of orthogonal keys is uniform") {
  const std::vector<cpa::Scalar> k = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const auto r = oracle::redundancy(k, 3, 3, 0.5, 0.4);
  REQUIRE(r.size() == 3);
  CHECK(r[0] == doctest::Approx(r[1]));
  CHECK(r[1] == doctest::Approx(r[2]));
}

TEST_CASE("capacity brute force") {
  cpa::MemoryBudget b;
  b.m_available = 100;
  b.m_kv = 2;
  b.m_q = 4;
  b.n_max = 4;
  b.head_dim = 1;
  const auto r = oracle::capacity_bruteforce(b, false);
  REQUIRE(r.feasible);
  CHECK(r.plan == cpa::CapacityPlan{8, 34});
  CHECK(oracle::plan_satisfies(b, {8, 34}, false));
  CHECK_FALSE(oracle::plan_satisfies(b, {8, 35}, false));
  CHECK_FALSE(oracle::plan_satisfies(b, {9, 32}, false));
  b.m_available = 5;
  CHECK_FALSE(oracle::capacity_bruteforce(b, false).feasible);
}

TEST_CASE("suite reports") {
  oracle::SuiteReport r;
  CHECK_FALSE(r.ok());  // no cases is not a pass
  r.cases = 3;
  CHECK(r.ok());
  r.fail("boom");
  CHECK_FALSE(r.ok());
  CHECK(r.failures == 1);
  CHECK(r.messages.size() == 1);
}

TEST_CASE("every suite passes") {
  CHECK(oracle::redundancy_suite(60, 21).ok());
  CHECK(oracle::attention_suite(40, 22).ok());
  CHECK(oracle::topk_suite(40, 23).ok());
  CHECK(oracle::capacity_suite(60, 24).ok());
}
