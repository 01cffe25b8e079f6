// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "cpa/capacity.hpp"
#include "cpa/engine.hpp"

namespace cpa {

enum class PlanMode { closed_form, tight };

/// Everything a `run` needs: the engine config with the pool already sized.
struct RunConfig {
  EngineConfig engine;
  std::optional<MemoryBudget> budget;  ///< absent when the pool size is given directly
  PlanMode plan_mode = PlanMode::closed_form;
  CapacityPlan plan;
};

/// Seed used when the config has no [engine].seed: $CPA_SEED if set, else 0.
std::uint64_t default_seed_from_env();

/// Parses a TOML engine config. Unknown sections or keys and ill-typed values raise
/// SchemaError naming "section.key" (or the line for syntax errors).
RunConfig parse_config_string(std::string_view text, std::uint64_t default_seed = 0);
RunConfig load_config(const std::string& path, std::uint64_t default_seed = 0);

/// Sizes the pool for `budget`. full_kv spends the whole budget on blocks.
CapacityPlan plan_pool(const MemoryBudget& budget, PlanMode mode, bool with_global, SchedulerMode scheduler);

}  // namespace cpa
