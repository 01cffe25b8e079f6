// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <vector>

#include "cpa/compressor.hpp"
#include "cpa/errors.hpp"
#include "cpa/oracle.hpp"
#include "cpa/synthetic_model.hpp"

using cpa::BlockId;
using cpa::BlockTable;
using cpa::Scalar;
using cpa::ScoreGrid;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

cpa::PoolConfig config(int blocks, int b = 2, int w = 1, int layers = 1) {
  cpa::PoolConfig c;
  c.num_layers = layers;
  c.total_blocks = blocks;
  c.block_size = b;
  c.kv_heads = 1;
  c.query_heads = 2;
  c.head_dim = 2;
  c.window = w;
  c.max_concurrency = 2;
  c.global_score_enabled = true;
  return c;
}

// Position p stores key (p, layer) and value (-p, layer).
BlockTable filled(cpa::PagedPool& pool, int blocks, std::size_t length) {
  BlockTable t;
  for (int i = 0; i < blocks; ++i) pool.allocate_block(t);
  t.length = length;
  const int b = pool.config().block_size;
  for (int l = 0; l < pool.config().num_layers; ++l) {
    for (std::size_t p = 0; p < length; ++p) {
      const auto x = static_cast<Scalar>(p);
      pool.write_kv(l, t.blocks[p / b], static_cast<int>(p % b), 0, std::vector<Scalar>{x, Scalar(l)},
                    std::vector<Scalar>{-x, Scalar(l)});
    }
  }
  return t;
}

std::vector<bool> bits(const cpa::TopKTag& t) {
  std::vector<bool> out;
  for (auto b : t.bits) out.push_back(b != 0);
  return out;
}

}  // namespace

TEST_CASE("pin_window") {
  ScoreGrid g(2, 2);
  g.values = {0.4, 0.3, 0.1, 0.2};
  const auto p = cpa::pin_window(g, 2, 4);
  CHECK(p.values == std::vector<double>{0.4, 0.3, kInf, kInf});
  // Length shorter than the grid: the window ends at the logical length.
  const auto q = cpa::pin_window(g, 1, 3);
  CHECK(q.values == std::vector<double>{0.4, 0.3, kInf, 0.2});
}

TEST_CASE("topk_tag") {
  ScoreGrid g(2, 2);
  g.values = {0.1, 0.9, 0.2, kInf};
  CHECK(bits(cpa::topk_tag(g, 2)) == std::vector<bool>{false, true, false, true});
  g.values = {0.5, 0.5, 0.5, 0.5};
  CHECK(bits(cpa::topk_tag(g, 2)) == std::vector<bool>{false, false, true, true});
  CHECK(cpa::topk_tag(g, 4).count() == 4);
  CHECK_THROWS_AS(cpa::topk_tag(g, 5), cpa::BudgetExceedsLength);
  CHECK_THROWS_AS(cpa::topk_tag(g, 3, 2), cpa::BudgetExceedsLength);
  // Pinned entries always survive.
  g.values = {9, 9, 9, 0};
  const auto pinned = cpa::pin_window(g, 1, 4);
  CHECK(cpa::topk_tag(pinned, 1).at(3));
}

TEST_CASE("compact") {
  SUBCASE("all-ones tag with identity targets leaves the bytes unchanged") {
    cpa::PagedPool pool(config(4));
    const BlockTable t = filled(pool, 2, 4);
    cpa::TopKTag tag{2, 2, {1, 1, 1, 1}};
    const auto before = pool.gather_contiguous(t, 4, 0, 0);
    CHECK(cpa::compact(pool, t, tag, t.blocks, 0, 0) == 4);
    const auto after = pool.gather_contiguous(t, 4, 0, 0);
    CHECK(before.keys == after.keys);
    CHECK(before.values == after.values);
  }
  SUBCASE("retained positions land densely in order") {
    cpa::PagedPool pool(config(4));
    const BlockTable t = filled(pool, 2, 4);
    cpa::TopKTag tag{2, 2, {0, 1, 0, 1}};
    ScoreGrid global(2, 2);
    global.values = {0.0, 0.25, 0.0, 0.75};
    const std::vector<BlockId> targets = {t.blocks[0]};
    CHECK(cpa::compact(pool, t, tag, targets, 0, 0, &global) == 2);
    CHECK(pool.key(0, t.blocks[0], 0, 0)[0] == 1);
    CHECK(pool.key(0, t.blocks[0], 1, 0)[0] == 3);
    CHECK(pool.value(0, t.blocks[0], 1, 0)[0] == -3);
    CHECK(pool.global_score(0, t.blocks[0], 0, 0) == 0.25f);
    CHECK(pool.global_score(0, t.blocks[0], 1, 0) == 0.75f);
  }
}

TEST_CASE("plan_targets") {
  SUBCASE("no shared blocks: in place") {
    cpa::PagedPool pool(config(8));
    const BlockTable t = filled(pool, 5, 10);
    const auto plan = cpa::plan_targets(pool, t, 4);
    CHECK(plan.targets == std::vector<BlockId>(t.blocks.begin(), t.blocks.begin() + 3));
    CHECK(plan.reuse_count == 3);
    CHECK(plan.fresh.empty());
    CHECK(plan.reserved == t.blocks[3]);
    CHECK_FALSE(plan.reserved_fresh);
    CHECK(plan.release == std::vector<BlockId>{t.blocks[4]});
    CHECK(plan.shared_blocks == 0);
  }
  SUBCASE("more shared blocks than targets: all fresh") {
    cpa::PagedPool pool(config(16));
    const BlockTable t = filled(pool, 6, 12);
    for (int i = 0; i < 5; ++i) pool.retain(t.blocks[i]);
    const auto plan = cpa::plan_targets(pool, t, 4);
    CHECK(plan.shared_blocks == 5);
    CHECK(plan.reuse_count == 0);
    CHECK(plan.targets.size() == 3);
    for (BlockId b : plan.targets) CHECK(std::find(t.blocks.begin(), t.blocks.end(), b) == t.blocks.end());
    // The reserved block is the only own unshared block.
    CHECK(plan.reserved == t.blocks[5]);
    for (int i = 0; i < 5; ++i) CHECK(std::count(plan.release.begin(), plan.release.end(), t.blocks[i]) == 1);
  }
  SUBCASE("two shared blocks: two fresh and one own target") {
    cpa::PagedPool pool(config(16));
    const BlockTable t = filled(pool, 5, 10);
    pool.retain(t.blocks[0]);
    pool.retain(t.blocks[1]);
    const auto plan = cpa::plan_targets(pool, t, 4);
    CHECK(plan.shared_blocks == 2);
    CHECK(plan.reuse_count == 1);
    CHECK(plan.fresh.size() == 2);
    CHECK(plan.targets[2] == t.blocks[2]);  // own block at its own index
    CHECK(plan.reserved == t.blocks[3]);
    CHECK(plan.release.size() == 3);  // two shared references plus block 4
  }
  SUBCASE("allocation failure leaves nothing allocated") {
    cpa::PagedPool pool(config(6));
    const BlockTable t = filled(pool, 6, 12);
    for (int i = 0; i < 6; ++i) pool.retain(t.blocks[i]);
    CHECK_THROWS_AS(cpa::plan_targets(pool, t, 4), cpa::NoFreeBlocks);
    CHECK(pool.num_free() == 0);
    CHECK(pool.check_conservation());
  }
}

namespace {

struct Request {
  cpa::PoolState st;
  cpa::SlotId slot;
  BlockTable table;
};

// A request whose table holds `tokens` synthetic tokens and a full query window.
Request request(const cpa::PoolConfig& c, std::size_t tokens, std::uint64_t seed = 1) {
  Request r{cpa::init_pool(c), 0, {}};
  r.slot = *r.st.slots.acquire(0);
  cpa::SyntheticModel m(seed, c.num_layers, c.kv_heads, c.query_heads, c.head_dim);
  std::vector<Scalar> k(static_cast<std::size_t>(c.head_dim));
  std::vector<Scalar> v(k.size());
  std::vector<Scalar> q(static_cast<std::size_t>(c.query_heads * c.head_dim));
  for (std::size_t p = 0; p < tokens; ++p) {
    if (r.table.last_block_full(c.block_size)) r.st.pool.allocate_block(r.table);
    for (int l = 0; l < c.num_layers; ++l) {
      m.key(seed, p, l, 0, k);
      m.value(seed, p, l, 0, v);
      r.st.pool.write_kv(l, r.table.blocks.back(), static_cast<int>(p % c.block_size), 0, k, v);
      for (int h = 0; h < c.query_heads; ++h) m.query(seed, p, l, h, std::span(q).subspan(h * c.head_dim, c.head_dim));
      r.st.slots.push(r.slot, l, q);
    }
    ++r.table.length;
  }
  return r;
}

}  // namespace

TEST_CASE("compress_request") {
  cpa::CompressionConfig cc;
  cc.n_max = 4;
  SUBCASE("exactly n_max full blocks") {
    const auto c = config(8, 4, 2);
    Request r = request(c, 16);
    CHECK(cpa::compression_due(r.table, 4, 4));
    const auto before = r.table.blocks;
    const auto rep = cpa::compress_request(r.st.pool, r.st.slots, r.slot, r.table, false, cc);
    CHECK(r.table.num_blocks() == 4);
    CHECK(r.table.length == 12);
    CHECK(r.table.blocks == before);  // in place, last block reused as the reserved one
    CHECK(rep.blocks_released == 0);
    CHECK(rep.entries_per_head == 12);
    CHECK(rep.entries_moved == 12);
    CHECK(r.st.pool.num_free() == 4);
  }
  SUBCASE("prefill overflow releases the excess") {
    const auto c = config(12, 4, 2);
    Request r = request(c, 28);  // 7 blocks = n_max + 3
    const auto rep = cpa::compress_request(r.st.pool, r.st.slots, r.slot, r.table, false, cc);
    CHECK(rep.blocks_released == 3);
    CHECK(r.table.num_blocks() == 4);
    CHECK(r.st.pool.num_free() == 8);
    CHECK(r.st.pool.check_conservation());
  }
  SUBCASE("window retained and order preserved") {
    const auto c = config(12, 4, 2);
    Request r = request(c, 24);
    const auto dense = r.st.pool.gather_contiguous(r.table, 24, 0, 0);
    cpa::compress_request(r.st.pool, r.st.slots, r.slot, r.table, false, cc);
    const auto after = r.st.pool.gather_contiguous(r.table, 12, 0, 0);
    // Map every retained key back to its old position.
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < 12; ++i) {
      for (std::size_t p = 0; p < 24; ++p) {
        if (std::memcmp(&after.keys[i * 2], &dense.keys[p * 2], 2 * sizeof(Scalar)) == 0) {
          positions.push_back(p);
          break;
        }
      }
    }
    REQUIRE(positions.size() == 12);
    CHECK(std::is_sorted(positions.begin(), positions.end()));
    CHECK(positions[10] == 22);
    CHECK(positions[11] == 23);
  }
  SUBCASE("layer stride does not change the result") {
    auto c = config(12, 4, 2, 4);
    std::vector<std::vector<Scalar>> keys;
    for (int stride : {1, 2, 4}) {
      Request r = request(c, 20, 9);
      cc.layer_stride = stride;
      const auto rep = cpa::compress_request(r.st.pool, r.st.slots, r.slot, r.table, false, cc);
      CHECK(rep.layer_chunks == static_cast<std::size_t>(4 / stride));
      std::vector<Scalar> all;
      for (int l = 0; l < 4; ++l) {
        const auto d = r.st.pool.gather_contiguous(r.table, r.table.length, l, 0);
        all.insert(all.end(), d.keys.begin(), d.keys.end());
      }
      keys.push_back(all);
    }
    CHECK(keys[0] == keys[1]);
    CHECK(keys[0] == keys[2]);
  }
}

TEST_CASE("compression trigger") {
  BlockTable t;
  t.blocks = {0, 1, 2, 3};
  t.length = 16;
  CHECK(cpa::compression_due(t, 4, 4));
  t.length = 15;
  CHECK_FALSE(cpa::compression_due(t, 4, 4));
  t.blocks = {0, 1, 2};
  t.length = 12;
  CHECK_FALSE(cpa::compression_due(t, 4, 4));
}

TEST_CASE("oracle suite agrees") { CHECK(cpa::oracle::topk_suite(100, 8).ok()); }
