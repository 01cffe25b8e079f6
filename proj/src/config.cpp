// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/config.hpp"

#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <tomlplusplus/toml.hpp>

#include "cpa/errors.hpp"

namespace cpa {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) { throw SchemaError(where, what); }

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"pool", {"num_layers", "block_size", "kv_heads", "query_heads", "head_dim", "window"}},
      {"capacity", {"m_available", "m_kv", "m_q", "n_max", "plan", "total_blocks", "max_concurrency"}},
      {"score", {"alpha", "lambda", "tau", "p", "pooling", "kernel", "redundancy", "use_global"}},
      {"compressor", {"enabled", "layer_stride"}},
      {"scheduler", {"mode", "prefix_sharing"}},
      {"engine", {"clock", "async", "decode_forward", "data_plane", "seed", "max_steps", "check_invariants"}},
      {"cost", {"c0", "c1", "c2", "prefill_base", "prefill_per_token"}},
      {"metrics", {"bucket"}},
  };
  return keys;
}

class Reader {
 public:
  explicit Reader(const toml::table& root) : root_(root) {}

  const toml::node* node(const char* section, const char* key) const {
    const toml::node* s = root_.get(section);
    if (s == nullptr) return nullptr;
    return s->as_table()->get(key);
  }

  std::optional<std::int64_t> integer(const char* section, const char* key) const {
    const toml::node* n = node(section, key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_integer()) fail(where(section, key), "expected an integer");
    return n->as_integer()->get();
  }

  std::optional<double> number(const char* section, const char* key) const {
    const toml::node* n = node(section, key);
    if (n == nullptr) return std::nullopt;
    if (n->is_floating_point()) return n->as_floating_point()->get();
    if (n->is_integer()) return static_cast<double>(n->as_integer()->get());
    fail(where(section, key), "expected a number");
  }

  std::optional<bool> boolean(const char* section, const char* key) const {
    const toml::node* n = node(section, key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_boolean()) fail(where(section, key), "expected true or false");
    return n->as_boolean()->get();
  }

  std::optional<std::string> string(const char* section, const char* key) const {
    const toml::node* n = node(section, key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_string()) fail(where(section, key), "expected a string");
    return n->as_string()->get();
  }

  void set_int(const char* section, const char* key, int& out, std::int64_t min) const {
    if (auto v = integer(section, key)) {
      if (*v < min || *v > std::numeric_limits<int>::max()) {
        fail(where(section, key), "must be at least " + std::to_string(min) + ", got " + std::to_string(*v));
      }
      out = static_cast<int>(*v);
    }
  }

  static std::string where(const char* section, const char* key) { return std::string(section) + "." + key; }

 private:
  const toml::table& root_;
};

template <typename F>
auto parse_enum(const Reader& r, const char* section, const char* key, F parse) -> std::optional<decltype(parse(""))> {
  const auto s = r.string(section, key);
  if (!s) return std::nullopt;
  try {
    return parse(*s);
  } catch (const std::invalid_argument& e) {
    fail(Reader::where(section, key), e.what());
  }
}

void check_structure(const toml::table& root) {
  for (const auto& [section, value] : root) {
    const std::string name(section.str());
    const auto it = known_keys().find(name);
    if (it == known_keys().end()) fail(name, "unknown section");
    if (!value.is_table()) fail(name, "expected a [" + name + "] table");
    for (const auto& [key, _] : *value.as_table()) {
      if (it->second.count(std::string(key.str())) == 0) fail(name + "." + std::string(key.str()), "unknown key");
    }
  }
}

}  // namespace

std::uint64_t default_seed_from_env() {
  const char* env = std::getenv("CPA_SEED");
  if (env == nullptr || *env == '\0') return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0') fail("CPA_SEED", "expected a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

CapacityPlan plan_pool(const MemoryBudget& budget, PlanMode mode, bool with_global, SchedulerMode scheduler) {
  if (scheduler == SchedulerMode::full_kv) {
    budget.validate();
    const std::int64_t blocks = budget.m_available / budget.m_kv;
    if (blocks <= 0) throw InfeasibleBudget("budget cannot hold a single block");
    return {1, blocks};
  }
  if (mode == PlanMode::tight) return solve_capacity_tight(budget, with_global);
  return with_global ? solve_capacity_with_global(budget) : solve_capacity(budget);
}

RunConfig parse_config_string(std::string_view text, std::uint64_t default_seed) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    fail("line " + std::to_string(e.source().begin.line), std::string(e.description()));
  }
  check_structure(root);
  const Reader r(root);
  RunConfig rc;
  EngineConfig& ec = rc.engine;

  PoolConfig& pool = ec.pool;
  pool.num_layers = 2;
  pool.block_size = 16;
  pool.kv_heads = 1;
  pool.query_heads = 2;
  pool.head_dim = 8;
  pool.window = 4;
  r.set_int("pool", "num_layers", pool.num_layers, 1);
  r.set_int("pool", "block_size", pool.block_size, 2);
  r.set_int("pool", "kv_heads", pool.kv_heads, 1);
  r.set_int("pool", "query_heads", pool.query_heads, 1);
  r.set_int("pool", "head_dim", pool.head_dim, 1);
  r.set_int("pool", "window", pool.window, 1);
  if (pool.query_heads % pool.kv_heads != 0) fail("pool.query_heads", "must be a multiple of pool.kv_heads");
  if (pool.window >= pool.block_size) fail("pool.window", "must be smaller than pool.block_size");

  ScoreConfig& sc = ec.compression.score;
  if (auto v = r.number("score", "alpha")) sc.alpha = *v;
  if (auto v = r.number("score", "lambda")) sc.lambda = *v;
  if (auto v = r.number("score", "tau")) sc.tau = *v;
  if (auto v = r.number("score", "p")) sc.p = *v;
  if (auto v = parse_enum(r, "score", "pooling", parse_pooling)) sc.pooling = *v;
  r.set_int("score", "kernel", sc.kernel, 1);
  if (auto v = parse_enum(r, "score", "redundancy", parse_redundancy)) sc.redundancy = *v;
  if (auto v = r.boolean("score", "use_global")) sc.use_global = *v;
  try {
    sc.validate();
  } catch (const std::invalid_argument& e) {
    fail("score", e.what());
  }

  if (auto v = r.boolean("compressor", "enabled")) ec.compression_enabled = *v;
  r.set_int("compressor", "layer_stride", ec.compression.layer_stride, 1);

  if (auto v = parse_enum(r, "scheduler", "mode", parse_scheduler_mode)) ec.scheduler.mode = *v;
  if (auto v = r.boolean("scheduler", "prefix_sharing")) ec.scheduler.prefix_sharing = *v;
  if (ec.scheduler.mode == SchedulerMode::full_kv) {
    if (r.boolean("compressor", "enabled").value_or(false)) {
      fail("compressor.enabled", "full_kv scheduling runs without compression");
    }
    ec.compression_enabled = false;
  } else if (!ec.compression_enabled) {
    fail("compressor.enabled", "constrained and hybrid scheduling need compression; use scheduler.mode = \"full_kv\"");
  }

  if (auto v = parse_enum(r, "engine", "clock", parse_clock_mode)) ec.clock = *v;
  if (auto v = r.boolean("engine", "async")) ec.async = *v;
  if (auto v = r.boolean("engine", "decode_forward")) ec.decode_forward = *v;
  if (auto v = r.boolean("engine", "data_plane")) ec.data_plane = *v;
  if (auto v = r.boolean("engine", "check_invariants")) ec.check_invariants = *v;
  ec.seed = default_seed;
  if (auto v = r.integer("engine", "seed")) {
    if (*v < 0) fail("engine.seed", "must be non-negative");
    ec.seed = static_cast<std::uint64_t>(*v);
  }
  if (auto v = r.integer("engine", "max_steps")) {
    if (*v < 1) fail("engine.max_steps", "must be positive");
    ec.max_steps = *v;
  }

  CostModel& cost = ec.cost;
  const std::pair<const char*, double*> costs[] = {{"c0", &cost.c0},
                                                   {"c1", &cost.c1},
                                                   {"c2", &cost.c2},
                                                   {"prefill_base", &cost.prefill_base},
                                                   {"prefill_per_token", &cost.prefill_per_token}};
  for (const auto& [key, dst] : costs) {
    if (auto v = r.number("cost", key)) {
      if (*v < 0) fail(Reader::where("cost", key), "must be non-negative");
      *dst = *v;
    }
  }
  if (cost.c0 + cost.c1 <= 0) fail("cost.c0", "decode steps must cost more than zero");
  r.set_int("metrics", "bucket", ec.histogram_bucket, 1);

  // Capacity: either a memory budget solved for (M, N_total) or both given directly.
  int n_max = 4;
  r.set_int("capacity", "n_max", n_max, 2);
  ec.compression.n_max = n_max;
  if (auto v = parse_enum(r, "capacity", "plan", [](std::string_view s) {
        if (s == "closed_form" || s == "closed-form") return PlanMode::closed_form;
        if (s == "tight") return PlanMode::tight;
        throw std::invalid_argument("expected \"closed_form\" or \"tight\"");
      })) {
    rc.plan_mode = *v;
  }
  const auto total_blocks = r.integer("capacity", "total_blocks");
  const auto max_conc = r.integer("capacity", "max_concurrency");
  const auto m_available = r.integer("capacity", "m_available");
  const bool with_global = ec.compression_enabled && sc.use_global && ec.data_plane;
  if (total_blocks || max_conc) {
    if (m_available) fail("capacity.total_blocks", "give either m_available or total_blocks/max_concurrency");
    if (!total_blocks) fail("capacity.total_blocks", "missing (required with max_concurrency)");
    if (*total_blocks < 1) fail("capacity.total_blocks", "must be positive");
    const std::int64_t m = max_conc.value_or(1);
    if (m < 1) fail("capacity.max_concurrency", "must be positive");
    rc.plan = {m, *total_blocks};
  } else {
    if (!m_available) fail("capacity.m_available", "missing");
    MemoryBudget budget;
    budget.m_available = *m_available;
    budget.m_kv = r.integer("capacity", "m_kv").value_or(2LL * pool.num_layers * pool.block_size * pool.kv_heads *
                                                         pool.head_dim);
    budget.m_q = r.integer("capacity", "m_q").value_or(static_cast<std::int64_t>(pool.num_layers) * pool.window *
                                                       pool.query_heads * pool.head_dim);
    budget.n_max = n_max;
    budget.head_dim = pool.head_dim;
    try {
      budget.validate();
      rc.plan = plan_pool(budget, rc.plan_mode, with_global, ec.scheduler.mode);
    } catch (const InfeasibleBudget& e) {
      fail("capacity.m_available", e.what());
    } catch (const std::invalid_argument& e) {
      fail("capacity", e.what());
    }
    rc.budget = budget;
  }
  pool.total_blocks = static_cast<int>(rc.plan.total_blocks);
  pool.max_concurrency = static_cast<int>(rc.plan.max_concurrency);
  try {
    ec.finalize();
  } catch (const std::invalid_argument& e) {
    fail("config", e.what());
  }
  return rc;
}

RunConfig load_config(const std::string& path, std::uint64_t default_seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_string(buf.str(), default_seed);
}

}  // namespace cpa
