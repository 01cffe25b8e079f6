// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cpa {

/// One request as the engine sees it. `prompt` is the token sequence; the prefix fields
/// only record how it was built so a spec can be written back out.
struct RequestSpec {
  std::int64_t arrival_step = 0;
  std::vector<std::uint64_t> prompt;
  std::int64_t output_len = 1;
  std::uint64_t seed = 0;
  std::optional<std::string> prefix_group;
  std::size_t prefix_len = 0;
};

struct Workload {
  std::uint64_t seed = 0;
  std::vector<RequestSpec> requests;
};

struct IntRange {
  std::int64_t lo = 1;
  std::int64_t hi = 1;
};

enum class WorkloadShape { amc_like, gsm8k_like, mixed, longbench_like };

WorkloadShape parse_workload_shape(std::string_view name);
std::string_view to_string(WorkloadShape shape);

/// Seeded request generator. Unset ranges fall back to the shape's defaults.
struct GeneratorSpec {
  WorkloadShape shape = WorkloadShape::amc_like;
  std::int64_t count = 0;
  std::optional<IntRange> prompt;
  std::optional<IntRange> output;
  std::uint64_t seed = 0;
  std::int64_t arrival_start = 0;
  std::int64_t arrival_every = 0;  ///< 0: every request arrives at arrival_start
  std::int64_t prefix_groups = 0;  ///< 0: no shared prefixes
  std::int64_t prefix_len = 0;
};

/// Default prompt and output ranges of a shape.
IntRange default_prompt_range(WorkloadShape shape);
IntRange default_output_range(WorkloadShape shape);

/// Expands a generator into requests; same spec, same requests.
std::vector<RequestSpec> expand_generator(const GeneratorSpec& spec, std::size_t generator_index);

/// Prompt tokens: the group's shared prefix followed by request-specific tokens.
std::vector<std::uint64_t> make_prompt(std::uint64_t request_seed, std::size_t length,
                                       const std::optional<std::string>& prefix_group, std::size_t prefix_len);

/// Parses a JSON workload document. Throws SchemaError naming the field or line.
Workload parse_workload_string(std::string_view text, std::uint64_t default_seed = 0);
Workload parse_workload(const std::string& path, std::uint64_t default_seed = 0);

/// Explicit-request JSON that parses back to the same workload.
std::string workload_to_json(const Workload& workload);

}  // namespace cpa
