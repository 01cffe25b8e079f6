// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>
#include <string>

#include "cpa/config.hpp"
#include "cpa/errors.hpp"

namespace {

std::string where_of(const std::string& text) {
  try {
    cpa::parse_config_string(text);
  } catch (const cpa::SchemaError& e) {
    return e.where();
  }
  return "<no error>";
}

constexpr const char* kMinimal = "[capacity]\nm_available = 200000\n";

}  // namespace

TEST_CASE("defaults") {
  const auto rc = cpa::parse_config_string(kMinimal, 17);
  const auto& e = rc.engine;
  CHECK(e.pool.block_size == 16);
  CHECK(e.pool.window == 4);
  CHECK(e.compression.n_max == 4);
  CHECK(e.scheduler.mode == cpa::SchedulerMode::constrained);
  CHECK(e.compression.score.redundancy == cpa::RedundancyVariant::lightning);
  CHECK(e.seed == 17);
  REQUIRE(rc.budget.has_value());
  CHECK(rc.budget->m_kv == 2 * 2 * 16 * 1 * 8);
  CHECK(rc.budget->m_q == 2 * 4 * 2 * 8);
  CHECK(e.pool.total_blocks == rc.plan.total_blocks);
  CHECK(e.pool.max_concurrency == rc.plan.max_concurrency);
  CHECK(rc.plan.max_concurrency >= 1);
}

TEST_CASE("explicit values") {
  const auto rc = cpa::parse_config_string(R"(
[pool]
num_layers = 4
block_size = 32
window = 8
[capacity]
total_blocks = 64
max_concurrency = 6
n_max = 5
[score]
lambda = 0.5
redundancy = "flash"
[compressor]
layer_stride = 2
[scheduler]
mode = "hybrid"
prefix_sharing = true
[engine]
seed = 9
async = false
[cost]
c2 = 8.0
[metrics]
bucket = 5
)", 3);
  const auto& e = rc.engine;
  CHECK(e.pool.num_layers == 4);
  CHECK(e.pool.total_blocks == 64);
  CHECK(e.pool.max_concurrency == 6);
  CHECK(e.scheduler.max_concurrency == 6);
  CHECK(e.scheduler.n_max == 5);
  CHECK(e.compression.layer_stride == 2);
  CHECK(e.compression.score.lambda == 0.5);
  CHECK(e.compression.score.redundancy == cpa::RedundancyVariant::flash);
  CHECK(e.scheduler.mode == cpa::SchedulerMode::hybrid);
  CHECK(e.scheduler.prefix_sharing);
  CHECK(e.seed == 9);
  CHECK_FALSE(e.async);
  CHECK(e.cost.c2 == 8.0);
  CHECK(e.histogram_bucket == 5);
  CHECK_FALSE(rc.budget.has_value());
}

TEST_CASE("full_kv spends the budget on blocks") {
  const auto rc = cpa::parse_config_string("[capacity]\nm_available = 51200\n[scheduler]\nmode = \"full_kv\"\n");
  CHECK(rc.engine.pool.total_blocks == 51200 / 512);
  CHECK_FALSE(rc.engine.compression_enabled);
}

TEST_CASE("tight plan is never smaller") {
  const auto a = cpa::parse_config_string("[capacity]\nm_available = 123457\n");
  const auto b = cpa::parse_config_string("[capacity]\nm_available = 123457\nplan = \"tight\"\n");
  CHECK(b.plan.max_concurrency >= a.plan.max_concurrency);
}

TEST_CASE("schema errors name section and key") {
  CHECK(where_of("[capacity]\nm_available = 200000\n[pool]\nblock_sise = 16\n") == "pool.block_sise");
  CHECK(where_of("[capacity]\nm_available = 200000\n[pools]\n") == "pools");
  CHECK(where_of("[capacity]\nm_available = 200000\n[pool]\nblock_size = \"big\"\n") == "pool.block_size");
  CHECK(where_of("[capacity]\nm_available = 200000\n[scheduler]\nmode = \"greedy\"\n") == "scheduler.mode");
  CHECK(where_of("[capacity]\nm_available = 200000\n[cost]\nc1 = -0.5\n") == "cost.c1");
  CHECK(where_of("[capacity]\nm_available = 200000\n[engine]\nmax_steps = 0\n") == "engine.max_steps");
  CHECK(where_of("[capacity]\nm_available = 10\n") == "capacity.m_available");
  CHECK(where_of("[pool]\nwindow = 2\n") == "capacity.m_available");
  CHECK(where_of("[capacity]\nm_available = 200000\n[compressor]\nenabled = false\n") == "compressor.enabled");
  CHECK(where_of("[capacity]\nm_available = 1\ntotal_blocks = 3\n") == "capacity.total_blocks");
  CHECK(where_of("[capacity]\nm_available = 200000\n[pool\n") == "line 3");
}

TEST_CASE("seed from the environment") {
  ::unsetenv("CPA_SEED");
  CHECK(cpa::default_seed_from_env() == 0);
  ::setenv("CPA_SEED", "42", 1);
  CHECK(cpa::default_seed_from_env() == 42);
  CHECK(cpa::parse_config_string(kMinimal, cpa::default_seed_from_env()).engine.seed == 42);
  ::setenv("CPA_SEED", "4x", 1);
  CHECK_THROWS_AS(cpa::default_seed_from_env(), cpa::SchemaError);
  ::unsetenv("CPA_SEED");
}
