// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "cpa/attention.hpp"
#include "cpa/compressor.hpp"
#include "cpa/errors.hpp"
#include "cpa/oracle.hpp"
#include "cpa/paged_store.hpp"
#include "cpa/scoring.hpp"

namespace cpa::oracle {

namespace {

using Rng = std::mt19937_64;

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::vector<Scalar> normal_vectors(Rng& rng, std::size_t count, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Scalar> out(count * static_cast<std::size_t>(d));
  for (Scalar& x : out) x = static_cast<Scalar>(n(rng));
  return out;
}

// Keys drawn near a handful of directions so that many pairs clear the threshold.
std::vector<Scalar> clustered_keys(Rng& rng, std::size_t count, int d) {
  const int centres = uniform_int(rng, 1, 4);
  const std::vector<Scalar> base = normal_vectors(rng, static_cast<std::size_t>(centres), d);
  std::normal_distribution<double> noise(0.0, std::uniform_real_distribution<double>(0.05, 0.8)(rng));
  std::vector<Scalar> out(count * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < count; ++i) {
    const int c = uniform_int(rng, 0, centres - 1);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (int j = 0; j < d; ++j) {
        out[i * d + j] = static_cast<Scalar>(base[static_cast<std::size_t>(c) * d + j] + noise(rng));
        norm += static_cast<double>(out[i * d + j]) * out[i * d + j];
      }
    } while (norm == 0.0);
  }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// A pool whose first `count` blocks (in shuffled order) form one request's table.
struct Layout {
  PoolConfig config;
  std::vector<BlockId> order;
};

Layout random_layout(Rng& rng, int layers, int kv_heads, int group, int d, int b, int w, int blocks, bool global) {
  Layout l;
  l.config.num_layers = layers;
  l.config.block_size = b;
  l.config.kv_heads = kv_heads;
  l.config.query_heads = kv_heads * group;
  l.config.head_dim = d;
  l.config.window = w;
  l.config.max_concurrency = 1;
  l.config.total_blocks = blocks + uniform_int(rng, 0, 6);
  l.config.global_score_enabled = global;
  l.order.resize(static_cast<std::size_t>(l.config.total_blocks));
  std::iota(l.order.begin(), l.order.end(), 0);
  std::shuffle(l.order.begin(), l.order.end(), rng);
  l.order.resize(static_cast<std::size_t>(blocks));
  return l;
}

// Takes the layout's blocks out of the free list in the layout's order.
BlockTable claim(PagedPool& pool, const std::vector<BlockId>& order, std::size_t length) {
  std::vector<BlockId> taken;
  std::vector<BlockId> wanted = order;
  std::sort(wanted.begin(), wanted.end());
  while (!wanted.empty()) {
    const BlockId b = pool.allocate();
    if (std::binary_search(wanted.begin(), wanted.end(), b)) {
      wanted.erase(std::lower_bound(wanted.begin(), wanted.end(), b));
    } else {
      taken.push_back(b);
    }
  }
  pool.free_blocks(taken);
  BlockTable t;
  t.blocks = order;
  t.length = length;
  return t;
}

void scatter(PagedPool& pool, const BlockTable& table, int layer, int head, std::span<const Scalar> keys,
             std::span<const Scalar> values) {
  const auto b = static_cast<std::size_t>(pool.config().block_size);
  const auto d = static_cast<std::size_t>(pool.config().head_dim);
  for (std::size_t p = 0; p < table.length; ++p) {
    pool.write_kv(layer, table.blocks[p / b], static_cast<int>(p % b), head, keys.subspan(p * d, d),
                  values.subspan(p * d, d));
  }
}

std::string describe(std::initializer_list<std::pair<const char*, double>> fields) {
  std::ostringstream os;
  for (const auto& [k, v] : fields) os << k << "=" << v << " ";
  return os.str();
}

}  // namespace

SuiteReport redundancy_suite(std::size_t cases, std::uint64_t seed) {
  SuiteReport report;
  report.name = "redundancy";
  Rng rng(seed);
  const double ps[] = {0.3, 0.5, 0.8};
  constexpr double kTol = 1e-6;
  for (std::size_t c = 0; c < cases; ++c) {
    const int n = uniform_int(rng, 1, 8);
    const int b = uniform_int(rng, 1, 32);
    const int d = uniform_int(rng, 1, 16);
    const double p = ps[uniform_int(rng, 0, 2)];
    const double tau = uniform_int(rng, 0, 1) == 0 ? 1.0 : 0.4;
    const auto full = static_cast<std::size_t>(n) * b;
    // Every fourth case leaves the last block partly filled.
    const std::size_t length = c % 4 == 3 ? full - static_cast<std::size_t>(uniform_int(rng, 0, b - 1)) : full;
    const std::vector<Scalar> keys = clustered_keys(rng, length, d);

    const auto want_full = redundancy(keys, length, d, p, tau, 0);
    const auto want_block = redundancy(keys, length, d, p, tau, b);
    const double e_naive = max_abs_diff(redundancy_naive(keys, length, d, p, tau), want_full);
    const double e_flash = max_abs_diff(redundancy_flash(keys, length, b, d, p, tau), want_full);
    const double e_light = max_abs_diff(redundancy_lightning(keys, length, b, d, p, tau), want_block);

    // Same keys through the paged overloads on a shuffled layout.
    Layout layout = random_layout(rng, 1, 1, 1, d, std::max(b, 2), 1, n, false);
    double e_paged = 0.0;
    if (b >= 2) {
      PagedPool pool(layout.config);
      const BlockTable table = claim(pool, layout.order, length);
      scatter(pool, table, 0, 0, keys, keys);
      e_paged = std::max(max_abs_diff(redundancy_flash(pool, table, 0, 0, p, tau), want_full),
                         max_abs_diff(redundancy_lightning(pool, table, 0, 0, p, tau), want_block));
    }
    ++report.cases;
    const double worst = std::max({e_naive, e_flash, e_light, e_paged});
    report.max_error = std::max(report.max_error, worst);
    if (!(worst <= kTol)) {
      report.fail("case " + std::to_string(c) + ": " +
                  describe({{"N", n}, {"b", b}, {"d", d}, {"p", p}, {"naive", e_naive}, {"flash", e_flash},
                            {"lightning", e_light}, {"paged", e_paged}}));
    }
  }
  return report;
}

SuiteReport attention_suite(std::size_t cases, std::uint64_t seed) {
  SuiteReport report;
  report.name = "attention";
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const int layers = uniform_int(rng, 1, 2);
    const int kv_heads = uniform_int(rng, 1, 2);
    const int group = uniform_int(rng, 1, 3);
    const int d = uniform_int(rng, 1, 16);
    const int b = uniform_int(rng, 2, 16);
    const int w = uniform_int(rng, 1, b - 1);
    const int n = uniform_int(rng, 1, 6);
    Layout layout = random_layout(rng, layers, kv_heads, group, d, b, w, n, false);
    PagedPool pool(layout.config);
    QuerySlotCache slots(layout.config);
    const auto full = static_cast<std::size_t>(n) * b;
    const BlockTable table = claim(pool, layout.order, full);

    std::vector<std::vector<Scalar>> dense_k;
    std::vector<std::vector<Scalar>> dense_v;
    for (int layer = 0; layer < layers; ++layer) {
      for (int h = 0; h < kv_heads; ++h) {
        dense_k.push_back(normal_vectors(rng, full, d));
        dense_v.push_back(normal_vectors(rng, full, d));
        scatter(pool, table, layer, h, dense_k.back(), dense_v.back());
      }
    }
    const SlotId slot = *slots.acquire(0);
    // queries[layer][step][qh][d]
    std::vector<std::vector<Scalar>> pushed(static_cast<std::size_t>(layers));
    for (int layer = 0; layer < layers; ++layer) {
      for (int step = 0; step < w; ++step) {
        const auto q = normal_vectors(rng, static_cast<std::size_t>(kv_heads * group), d);
        slots.push(slot, layer, q);
        pushed[layer].insert(pushed[layer].end(), q.begin(), q.end());
      }
    }

    double e_fwd = 0.0;
    double e_scores = 0.0;
    for (int layer = 0; layer < layers; ++layer) {
      for (int h = 0; h < kv_heads; ++h) {
        const auto& k = dense_k[static_cast<std::size_t>(layer * kv_heads + h)];
        const auto& v = dense_v[static_cast<std::size_t>(layer * kv_heads + h)];
        const std::size_t length = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<int>(full)));
        const auto q = normal_vectors(rng, 1, d);
        e_fwd = std::max(e_fwd, max_abs_diff(paged_attention_forward(pool, q, table, length, layer, h),
                                             dense_attention(q, k, v, length, d)));

        std::vector<Scalar> window;
        for (int g = 0; g < group; ++g) {
          const int qh = h * group + g;
          for (int step = 0; step < w; ++step) {
            const auto* src = pushed[layer].data() + (static_cast<std::size_t>(step) * kv_heads * group + qh) * d;
            window.insert(window.end(), src, src + d);
          }
        }
        const ScoreGrid got = attention_scores(pool, slots, slot, table, layer, h);
        e_scores = std::max(e_scores, max_abs_diff(got.values, attention_scores(window, group, w, k, full, d)));
      }
    }
    ++report.cases;
    report.max_error = std::max({report.max_error, e_fwd, e_scores});
    if (!(e_fwd <= 1e-5) || !(e_scores <= 1e-6)) {
      report.fail("case " + std::to_string(c) + ": " +
                  describe({{"N", n}, {"b", b}, {"w", w}, {"d", d}, {"forward", e_fwd}, {"scores", e_scores}}));
    }
  }
  return report;
}

SuiteReport topk_suite(std::size_t cases, std::uint64_t seed) {
  SuiteReport report;
  report.name = "topk";
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    const int n_max = uniform_int(rng, 2, 5);
    const int n = n_max + uniform_int(rng, 0, 4);
    const int b = uniform_int(rng, 2, 12);
    const int w = uniform_int(rng, 1, b - 1);
    const int d = uniform_int(rng, 1, 6);
    const int layers = uniform_int(rng, 1, 2);
    const int kv_heads = uniform_int(rng, 1, 2);
    const int shared = uniform_int(rng, 0, 2) == 0 ? uniform_int(rng, 1, n) : 0;
    const auto length = static_cast<std::size_t>(n) * b;
    const std::size_t k = static_cast<std::size_t>(n_max - 1) * b;

    Layout layout = random_layout(rng, layers, kv_heads, 1, d, b, w, n, true);
    layout.config.total_blocks += n_max;  // room for fresh targets
    PagedPool pool(layout.config);
    BlockTable table = claim(pool, layout.order, length);

    struct Head {
      std::vector<Scalar> k, v;
      ScoreGrid scores, global;
    };
    std::vector<Head> heads;
    for (int layer = 0; layer < layers; ++layer) {
      for (int h = 0; h < kv_heads; ++h) {
        Head hd{normal_vectors(rng, length, d), normal_vectors(rng, length, d), ScoreGrid(n, b), ScoreGrid(n, b)};
        // Small integer scores force ties.
        for (double& s : hd.scores.values) s = uniform_int(rng, 0, 5);
        for (double& g : hd.global.values) g = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        scatter(pool, table, layer, h, hd.k, hd.v);
        heads.push_back(std::move(hd));
      }
    }
    // Another holder of the first `shared` blocks.
    for (int i = 0; i < shared; ++i) pool.retain(table.blocks[i]);
    std::vector<std::vector<Scalar>> shared_before;
    for (int i = 0; i < shared; ++i) {
      for (int layer = 0; layer < layers; ++layer) {
        for (int h = 0; h < kv_heads; ++h) {
          for (int s = 0; s < b; ++s) {
            const auto kk = pool.key(layer, table.blocks[i], s, h);
            const auto vv = pool.value(layer, table.blocks[i], s, h);
            shared_before.emplace_back(kk.begin(), kk.end());
            shared_before.emplace_back(vv.begin(), vv.end());
          }
        }
      }
    }

    bool ok = true;
    std::string why;
    auto check = [&](bool cond, const std::string& what) {
      if (!cond && ok) {
        ok = false;
        why = what;
      }
    };
    const CompressionPlan plan = plan_targets(pool, table, n_max);
    std::vector<std::vector<bool>> keeps;
    std::size_t idx = 0;
    for (int layer = 0; layer < layers; ++layer) {
      for (int h = 0; h < kv_heads; ++h, ++idx) {
        const Head& hd = heads[idx];
        const ScoreGrid pinned = pin_window(hd.scores, static_cast<std::size_t>(w), length);
        const TopKTag tag = topk_tag(pinned, k, length);
        std::vector<double> oracle_scores = hd.scores.values;
        for (std::size_t p = length - w; p < length; ++p) oracle_scores[p] = std::numeric_limits<double>::infinity();
        const std::vector<bool> keep = topk_exhaustive(oracle_scores, k);
        for (std::size_t p = 0; p < length; ++p) check(tag.at(p) == keep[p], "retained set differs from exhaustive top-k");
        for (std::size_t p = length - w; p < length; ++p) check(keep[p] && tag.at(p), "window position dropped");
        const std::size_t written = compact(pool, table, tag, plan.targets, layer, h, &hd.global);
        check(written == k, "wrote " + std::to_string(written) + " entries, expected " + std::to_string(k));
        keeps.push_back(keep);
      }
    }
    // Read back through the targets: the t-th slot must hold the t-th retained entry.
    idx = 0;
    for (int layer = 0; layer < layers; ++layer) {
      for (int h = 0; h < kv_heads; ++h, ++idx) {
        const Head& hd = heads[idx];
        std::size_t t = 0;
        for (std::size_t p = 0; p < length; ++p) {
          if (!keeps[idx][p]) continue;
          const BlockId blk = plan.targets[t / b];
          const int s = static_cast<int>(t % b);
          const auto kk = pool.key(layer, blk, s, h);
          const auto vv = pool.value(layer, blk, s, h);
          check(std::memcmp(kk.data(), hd.k.data() + p * d, d * sizeof(Scalar)) == 0, "key payload differs");
          check(std::memcmp(vv.data(), hd.v.data() + p * d, d * sizeof(Scalar)) == 0, "value payload differs");
          const Scalar f = pool.global_score(layer, blk, s, h);
          const auto expect = static_cast<Scalar>(hd.global.values[p]);
          check(std::memcmp(&f, &expect, sizeof(Scalar)) == 0, "global score payload differs");
          ++t;
        }
      }
    }
    finalize_compression(pool, table, plan, CompressionConfig{n_max, 1, {}});
    check(table.length == k && table.num_blocks() == static_cast<std::size_t>(n_max), "table not swapped");
    std::size_t sb = 0;
    for (int i = 0; i < shared; ++i) {
      const BlockId blk = layout.order[static_cast<std::size_t>(i)];
      check(pool.ref_count(blk) == 1, "shared block reference count");
      for (int layer = 0; layer < layers; ++layer) {
        for (int h = 0; h < kv_heads; ++h) {
          for (int s = 0; s < b; ++s) {
            const auto kk = pool.key(layer, blk, s, h);
            const auto vv = pool.value(layer, blk, s, h);
            check(std::equal(kk.begin(), kk.end(), shared_before[sb].begin()), "shared key modified");
            check(std::equal(vv.begin(), vv.end(), shared_before[sb + 1].begin()), "shared value modified");
            sb += 2;
          }
        }
      }
    }
    for (BlockId blk : table.blocks) check(pool.ref_count(blk) == 1, "target not exclusively owned");
    check(pool.check_conservation(), "block conservation");
    ++report.cases;
    if (!ok) {
      report.fail("case " + std::to_string(c) + ": " + why + " (" +
                  describe({{"N", n}, {"n_max", n_max}, {"b", b}, {"w", w}, {"shared", shared}}) + ")");
    }
  }
  return report;
}

SuiteReport capacity_suite(std::size_t cases, std::uint64_t seed) {
  SuiteReport report;
  report.name = "capacity";
  Rng rng(seed);
  for (std::size_t c = 0; c < cases; ++c) {
    MemoryBudget budget;
    budget.m_available = std::uniform_int_distribution<std::int64_t>(1, 100000)(rng);
    budget.m_kv = std::uniform_int_distribution<std::int64_t>(1, 256)(rng);
    budget.m_q = std::uniform_int_distribution<std::int64_t>(1, 512)(rng);
    budget.n_max = std::uniform_int_distribution<std::int64_t>(2, 16)(rng);
    budget.head_dim = std::uniform_int_distribution<std::int64_t>(1, 128)(rng);
    ++report.cases;
    std::string why;
    for (const bool global : {false, true}) {
      const CapacityResult best = capacity_bruteforce(budget, global);
      CapacityPlan closed;
      CapacityPlan tight;
      bool solved = true;
      try {
        closed = global ? solve_capacity_with_global(budget) : solve_capacity(budget);
        tight = solve_capacity_tight(budget, global);
      } catch (const InfeasibleBudget&) {
        solved = false;
      }
      const std::string tag = global ? "global: " : "base: ";
      if (solved != best.feasible) {
        why = tag + "feasibility disagrees with brute force";
        break;
      }
      if (!solved) continue;
      if (closed.max_concurrency != best.plan.max_concurrency) {
        why = tag + "M " + std::to_string(closed.max_concurrency) + " vs brute force " +
              std::to_string(best.plan.max_concurrency);
        break;
      }
      if (!(tight == best.plan)) {
        why = tag + "tight plan differs from brute force";
        break;
      }
      if (!plan_satisfies(budget, closed, global) || !plan_satisfies(budget, tight, global) ||
          !plan_is_feasible(budget, closed, global)) {
        why = tag + "returned plan violates a constraint";
        break;
      }
    }
    if (why.empty()) {
      try {
        const CapacityPlan base = solve_capacity(budget);
        try {
          const CapacityPlan g = solve_capacity_with_global(budget);
          if (g.max_concurrency > base.max_concurrency || g.total_blocks > base.total_blocks) {
            why = "global plan exceeds the base plan";
          }
        } catch (const InfeasibleBudget&) {
        }
      } catch (const InfeasibleBudget&) {
      }
    }
    if (!why.empty()) {
      report.fail("case " + std::to_string(c) + ": " + why + " (" +
                  describe({{"m", static_cast<double>(budget.m_available)},
                            {"m_kv", static_cast<double>(budget.m_kv)},
                            {"m_q", static_cast<double>(budget.m_q)},
                            {"n_max", static_cast<double>(budget.n_max)},
                            {"d", static_cast<double>(budget.head_dim)}}) + ")");
    }
  }
  return report;
}

}  // namespace cpa::oracle
