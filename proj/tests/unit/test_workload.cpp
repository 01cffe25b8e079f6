// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <string>

#include "cpa/errors.hpp"
#include "cpa/workload.hpp"

namespace {

std::string where_of(const std::string& text) {
  try {
    cpa::parse_workload_string(text);
  } catch (const cpa::SchemaError& e) {
    return e.where();
  }
  return "<no error>";
}

}  // namespace

TEST_CASE("explicit requests") {
  const auto w = cpa::parse_workload_string(R"({
    "seed": 4,
    "requests": [
      {"arrival_step": 0, "prompt_len": 10, "output_len": 5},
      {"arrival_step": 0, "prompt_tokens": [7, 8, 9], "output_len": 2, "seed": 11},
      {"arrival_step": 3, "prompt_len": 20, "prefix": {"group": "sys", "len": 8}, "output_len": 1}
    ]})");
  REQUIRE(w.requests.size() == 3);
  CHECK(w.seed == 4);
  CHECK(w.requests[0].prompt.size() == 10);
  CHECK(w.requests[1].prompt == std::vector<std::uint64_t>{7, 8, 9});
  CHECK(w.requests[1].seed == 11);
  CHECK(w.requests[2].arrival_step == 3);
  CHECK(w.requests[2].prefix_group == std::optional<std::string>("sys"));
  const auto other = cpa::make_prompt(99, 20, std::string("sys"), 8);
  CHECK(std::equal(other.begin(), other.begin() + 8, w.requests[2].prompt.begin()));
  CHECK(other[8] != w.requests[2].prompt[8]);
}

TEST_CASE("generator") {
  const std::string text = R"({"generators": [
    {"shape": "amc-like", "count": 100, "prompt": {"uniform": [20, 50]},
     "output": {"uniform": [500, 2000]}, "seed": 7, "arrival": {"every": 2}}]})";
  const auto a = cpa::parse_workload_string(text);
  const auto b = cpa::parse_workload_string(text);
  REQUIRE(a.requests.size() == 100);
  bool varied = false;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& r = a.requests[i];
    CHECK(r.prompt.size() >= 20);
    CHECK(r.prompt.size() <= 50);
    CHECK(r.output_len >= 500);
    CHECK(r.output_len <= 2000);
    CHECK(r.arrival_step == static_cast<std::int64_t>(2 * i));
    CHECK(r.prompt == b.requests[i].prompt);
    CHECK(r.output_len == b.requests[i].output_len);
    varied = varied || r.output_len != a.requests[0].output_len;
  }
  CHECK(varied);
  const auto c = cpa::parse_workload_string(
      R"({"generators": [{"shape": "amc-like", "count": 100, "prompt": {"uniform": [20, 50]},
          "output": {"uniform": [500, 2000]}, "seed": 8}]})");
  CHECK(c.requests[0].prompt != a.requests[0].prompt);
}

TEST_CASE("shared prefix groups") {
  cpa::GeneratorSpec g;
  g.shape = cpa::WorkloadShape::longbench_like;
  g.count = 40;
  g.prefix_groups = 2;
  g.prefix_len = 32;
  g.seed = 1;
  const auto reqs = cpa::expand_generator(g, 0);
  int same = 0;
  for (const auto& r : reqs) {
    REQUIRE(r.prefix_group.has_value());
    if (r.prefix_group == reqs[0].prefix_group) {
      ++same;
      CHECK(std::equal(r.prompt.begin(), r.prompt.begin() + 32, reqs[0].prompt.begin()));
    }
  }
  CHECK(same > 1);
  CHECK(same < 40);
}

TEST_CASE("schema errors name the field") {
  CHECK(where_of(R"({"requests": [{"prompt_len": 4, "output_len": -1}]})") == "requests[0].output_len");
  CHECK(where_of(R"({"requests": [{"prompt_len": 4}]})") == "requests[0].output_len");
  CHECK(where_of(R"({"requests": [{"prompt_len": 4, "output_len": 1, "colour": 1}]})") == "requests[0].colour");
  CHECK(where_of(R"({"generators": [{"shape": "poetry", "count": 1}]})") == "generators[0].shape");
  CHECK(where_of(R"({"generators": [{"shape": "mixed", "count": 1, "output": {"uniform": [9, 3]}}]})") ==
        "generators[0].output.uniform");
  CHECK(where_of(R"({"requests": [{"arrival_step": 5, "prompt_len": 1, "output_len": 1},
                                  {"arrival_step": 2, "prompt_len": 1, "output_len": 1}]})") ==
        "requests[1].arrival_step");
  CHECK(where_of("{\n\"requests\": [\n  {\"prompt_len\": 4,,}\n]}") == "line 3");
}

TEST_CASE("round trip") {
  const auto w = cpa::parse_workload_string(R"({"seed": 2, "generators": [
    {"shape": "mixed", "count": 20, "shared_prefix": {"groups": 2, "len": 16}}]})");
  const auto back = cpa::parse_workload_string(cpa::workload_to_json(w));
  REQUIRE(back.requests.size() == w.requests.size());
  CHECK(back.seed == w.seed);
  for (std::size_t i = 0; i < w.requests.size(); ++i) {
    CHECK(back.requests[i].prompt == w.requests[i].prompt);
    CHECK(back.requests[i].output_len == w.requests[i].output_len);
    CHECK(back.requests[i].arrival_step == w.requests[i].arrival_step);
    CHECK(back.requests[i].seed == w.requests[i].seed);
  }
}

TEST_CASE("shape defaults") {
  for (auto s : {cpa::WorkloadShape::amc_like, cpa::WorkloadShape::gsm8k_like, cpa::WorkloadShape::longbench_like}) {
    const auto p = cpa::default_prompt_range(s);
    const auto o = cpa::default_output_range(s);
    CHECK(p.lo >= 1);
    CHECK(p.lo <= p.hi);
    CHECK(o.lo <= o.hi);
    CHECK(cpa::parse_workload_shape(cpa::to_string(s)) == s);
  }
  // Reasoning-style traces have long outputs, long-context ones long prompts.
  CHECK(cpa::default_output_range(cpa::WorkloadShape::amc_like).hi >
        cpa::default_output_range(cpa::WorkloadShape::gsm8k_like).hi);
  CHECK(cpa::default_prompt_range(cpa::WorkloadShape::longbench_like).lo >
        cpa::default_prompt_range(cpa::WorkloadShape::amc_like).hi);
}
