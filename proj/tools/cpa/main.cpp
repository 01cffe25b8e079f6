// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpa/capacity.hpp"
#include "cpa/config.hpp"
#include "cpa/engine.hpp"
#include "cpa/errors.hpp"
#include "cpa/metrics_io.hpp"
#include "cpa/oracle.hpp"
#include "cpa/workload.hpp"

namespace {

struct RunArgs {
  std::string config;
  std::string workload;
  std::string out;
  std::string format = "json";
  std::optional<std::uint64_t> seed;
};

struct PlanArgs {
  std::int64_t mem = 0;
  std::int64_t mkv = 0;
  std::int64_t mq = 0;
  std::int64_t nmax = 0;
  std::int64_t d = 1;
  bool global = false;
};

struct GenArgs {
  std::string shape = "amc-like";
  std::int64_t count = 100;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> prompt;
  std::vector<std::int64_t> output;
  std::int64_t arrival_every = 0;
  std::int64_t prefix_groups = 0;
  std::int64_t prefix_len = 0;
  std::string out;
};

struct OracleArgs {
  std::string suite = "all";
  std::size_t cases = 200;
  std::uint64_t seed = 1;
};

int cmd_run(const RunArgs& a) {
  const std::uint64_t seed = a.seed.value_or(cpa::default_seed_from_env());
  cpa::RunConfig rc = cpa::load_config(a.config, seed);
  if (a.seed) rc.engine.seed = *a.seed;
  const cpa::Workload workload = cpa::parse_workload(a.workload, rc.engine.seed);
  const cpa::MetricsFormat format = cpa::parse_metrics_format(a.format);
  cpa::Engine engine(rc.engine);
  const cpa::EngineMetrics metrics = engine.run(workload);
  cpa::emit_metrics(metrics, format, a.out);
  std::printf("M=%lld N_total=%lld steps=%lld tokens=%lld tps=%.6g%s\n",
              static_cast<long long>(rc.engine.pool.max_concurrency),
              static_cast<long long>(rc.engine.pool.total_blocks), static_cast<long long>(metrics.total_steps),
              static_cast<long long>(metrics.tokens_generated), metrics.tps, metrics.truncated ? " (truncated)" : "");
  return metrics.truncated ? 3 : 0;
}

int cmd_plan(const PlanArgs& a) {
  cpa::MemoryBudget budget{a.mem, a.mkv, a.mq, a.nmax, a.d};
  const auto closed = a.global ? cpa::solve_capacity_with_global(budget) : cpa::solve_capacity(budget);
  const auto tight = cpa::solve_capacity_tight(budget, a.global);
  std::printf("M=%lld, N_total=%lld (closed form)\n", static_cast<long long>(closed.max_concurrency),
              static_cast<long long>(closed.total_blocks));
  std::printf("M=%lld, N_total=%lld (tight)\n", static_cast<long long>(tight.max_concurrency),
              static_cast<long long>(tight.total_blocks));
  return 0;
}

std::optional<cpa::IntRange> to_range(const std::vector<std::int64_t>& v, const char* flag) {
  if (v.empty()) return std::nullopt;
  if (v.size() != 2 || v[0] < 1 || v[1] < v[0]) {
    throw cpa::SchemaError(flag, "expects two positive integers LO HI with LO <= HI");
  }
  return cpa::IntRange{v[0], v[1]};
}

int cmd_gen(const GenArgs& a) {
  cpa::GeneratorSpec spec;
  spec.shape = cpa::parse_workload_shape(a.shape);
  spec.count = a.count;
  spec.prompt = to_range(a.prompt, "--prompt");
  spec.output = to_range(a.output, "--output");
  spec.seed = a.seed;
  spec.arrival_every = a.arrival_every;
  spec.prefix_groups = a.prefix_groups;
  spec.prefix_len = a.prefix_len;
  if (spec.prefix_groups > 0 && spec.prefix_len < 1) throw cpa::SchemaError("--prefix-len", "must be positive");
  cpa::Workload w;
  w.seed = a.seed;
  w.requests = cpa::expand_generator(spec, 0);
  const std::string text = cpa::workload_to_json(w);
  if (a.out.empty() || a.out == "-") {
    std::cout << text;
  } else {
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + a.out + "'");
    out << text;
  }
  return 0;
}

int cmd_oracle(const OracleArgs& a) {
  using Runner = cpa::oracle::SuiteReport (*)(std::size_t, std::uint64_t);
  const std::vector<std::pair<std::string, Runner>> suites = {
      {"redundancy", cpa::oracle::redundancy_suite},
      {"attention", cpa::oracle::attention_suite},
      {"topk", cpa::oracle::topk_suite},
      {"capacity", cpa::oracle::capacity_suite},
  };
  bool all_ok = true;
  for (const auto& [name, run] : suites) {
    if (a.suite != "all" && a.suite != name) continue;
    const cpa::oracle::SuiteReport r = run(a.cases, a.seed);
    std::printf("%s %s: %zu cases, %zu failures, max error %.3g\n", r.ok() ? "PASS" : "FAIL", r.name.c_str(), r.cases,
                r.failures, r.max_error);
    for (const std::string& m : r.messages) std::printf("  %s\n", m.c_str());
    all_ok = all_ok && r.ok();
  }
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpa: compressed paged KV-cache engine simulator"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run a workload and write metrics");
  run_cmd->add_option("--config", run.config, "Engine config (TOML)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--workload", run.workload, "Workload spec (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--out", run.out, "Metrics file (json) or directory (csv)")->required();
  run_cmd->add_option("--format", run.format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
  run_cmd->add_option("--seed", run.seed, "Overrides the config and CPA_SEED");

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "Print the capacity plan for a budget");
  plan_cmd->add_option("--mem", plan.mem, "Available memory units")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--mkv", plan.mkv, "Units per KV block")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--mq", plan.mq, "Units per query window")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--nmax", plan.nmax, "Block cap per request")->required()->check(CLI::Range(2, 1 << 30));
  plan_cmd->add_option("--d", plan.d, "Head dimension (global score sizing)")->check(CLI::PositiveNumber);
  plan_cmd->add_flag("--global", plan.global, "Size in the global score cache");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-workload", "Emit a workload spec from a generator");
  gen_cmd->add_option("--shape", gen.shape, "amc-like, gsm8k-like, mixed or longbench-like");
  gen_cmd->add_option("--count", gen.count, "Number of requests")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--prompt", gen.prompt, "Prompt length range LO HI")->expected(2);
  gen_cmd->add_option("--output", gen.output, "Output length range LO HI")->expected(2);
  gen_cmd->add_option("--arrival-every", gen.arrival_every, "Steps between arrivals")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--prefix-groups", gen.prefix_groups, "Shared prefix groups")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--prefix-len", gen.prefix_len, "Shared prefix length")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--out", gen.out, "Output path (default stdout)");

  OracleArgs oracle;
  auto* oracle_cmd = app.add_subcommand("oracle", "Run the brute-force verification suites");
  oracle_cmd->add_option("--suite", oracle.suite, "redundancy, attention, topk, capacity or all")
      ->check(CLI::IsMember({"all", "redundancy", "attention", "topk", "capacity"}));
  oracle_cmd->add_option("--cases", oracle.cases, "Random cases per suite")->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--seed", oracle.seed, "Suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*run_cmd) return cmd_run(run);
    if (*plan_cmd) return cmd_plan(plan);
    if (*gen_cmd) return cmd_gen(gen);
    if (*oracle_cmd) return cmd_oracle(oracle);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
