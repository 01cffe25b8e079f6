// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "cpa/errors.hpp"
#include "cpa/oracle.hpp"
#include "cpa/scoring.hpp"

using cpa::Scalar;
using cpa::ScoreGrid;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

std::vector<Scalar> random_keys(std::mt19937_64& rng, std::size_t n, int d) {
  std::normal_distribution<double> g;
  std::vector<Scalar> out(n * static_cast<std::size_t>(d));
  for (Scalar& x : out) x = static_cast<Scalar>(g(rng));
  return out;
}

cpa::PoolConfig pool_config(int blocks, int b, int w, int group, int d) {
  cpa::PoolConfig c;
  c.num_layers = 1;
  c.total_blocks = blocks;
  c.block_size = b;
  c.kv_heads = 1;
  c.query_heads = group;
  c.head_dim = d;
  c.window = w;
  c.max_concurrency = 1;
  c.global_score_enabled = true;
  return c;
}

// Table over the first `blocks` blocks filled with the given keys; values unused.
cpa::BlockTable fill(cpa::PagedPool& pool, const std::vector<Scalar>& keys, int blocks) {
  const cpa::PoolConfig& c = pool.config();
  cpa::BlockTable t;
  for (int i = 0; i < blocks; ++i) pool.allocate_block(t);
  t.length = keys.size() / static_cast<std::size_t>(c.head_dim);
  for (std::size_t p = 0; p < t.length; ++p) {
    std::span<const Scalar> k(keys.data() + p * c.head_dim, static_cast<std::size_t>(c.head_dim));
    pool.write_kv(0, t.blocks[p / c.block_size], static_cast<int>(p % c.block_size), 0, k, k);
  }
  return t;
}

}  // namespace

TEST_CASE("block attention logits") {
  const std::vector<Scalar> e0 = {1, 0, 0, 0};
  const auto l = cpa::block_attention_logits(e0, e0, 1, 1, 4, false);
  CHECK(l[0] == doctest::Approx(0.5));

  // Last block, w = 2, b = 4: window rows sit at block positions 2 and 3.
  std::vector<Scalar> q(2 * 4, 1.0f);
  std::vector<Scalar> k(4 * 4, 1.0f);
  const auto m = cpa::block_attention_logits(q, k, 2, 4, 4, true);
  CHECK(std::isfinite(m[0 * 4 + 2]));
  CHECK(m[0 * 4 + 3] == -kInf);
  for (int v = 0; v < 4; ++v) CHECK(std::isfinite(m[1 * 4 + v]));
  const auto n = cpa::block_attention_logits(q, k, 2, 4, 4, false);
  for (double x : n) CHECK(std::isfinite(x));
}

TEST_CASE("attention scores") {
  SUBCASE("uniform keys give uniform scores") {
    cpa::PoolConfig c = pool_config(1, 4, 1, 1, 2);
    cpa::PagedPool pool(c);
    cpa::QuerySlotCache slots(c);
    const auto t = fill(pool, std::vector<Scalar>(8, 1.0f), 1);
    const auto s = *slots.acquire(0);
    slots.push(s, 0, std::vector<Scalar>{0.3f, 0.7f});
    const ScoreGrid g = cpa::attention_scores(pool, slots, s, t, 0, 0);
    for (double x : g.values) CHECK(x == doctest::Approx(0.25));
  }
  SUBCASE("window must be full") {
    cpa::PoolConfig c = pool_config(1, 4, 2, 1, 2);
    cpa::PagedPool pool(c);
    cpa::QuerySlotCache slots(c);
    const auto t = fill(pool, std::vector<Scalar>(8, 1.0f), 1);
    const auto s = *slots.acquire(0);
    slots.push(s, 0, std::vector<Scalar>{0.3f, 0.7f});
    CHECK_THROWS_AS(cpa::attention_scores(pool, slots, s, t, 0, 0), cpa::WindowNotFull);
  }
  SUBCASE("group max picks the dominating head") {
    // N = 2, b = 2, w = 1: query head 1 is a scaled copy of head 0 and so is sharper.
    cpa::PoolConfig c = pool_config(2, 2, 1, 2, 2);
    cpa::PagedPool pool(c);
    cpa::QuerySlotCache slots(c);
    const std::vector<Scalar> keys = {1, 0, 0, 1, -1, 0, 0.5f, 0.5f};
    const auto t = fill(pool, keys, 2);
    const auto s = *slots.acquire(0);
    const std::vector<Scalar> q = {1, 0.2f, 3, 0.6f};
    slots.push(s, 0, q);
    const ScoreGrid g = cpa::attention_scores(pool, slots, s, t, 0, 0);
    const auto want = cpa::oracle::attention_scores(
        std::vector<Scalar>{1, 0.2f, 3, 0.6f}, 2, 1, keys, 4, 2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.values[i] == doctest::Approx(want[i]).epsilon(1e-9));
    // Hand check, head 0 logits q.k / sqrt 2.
    std::vector<double> l0(4);
    std::vector<double> l1(4);
    for (int j = 0; j < 4; ++j) {
      l0[j] = (1.0 * keys[j * 2] + 0.2 * keys[j * 2 + 1]) / std::sqrt(2.0);
      l1[j] = 3 * l0[j];
    }
    auto sm = [](std::vector<double> x) {
      double z = 0;
      for (double& v : x) z += (v = std::exp(v));
      for (double& v : x) v /= z;
      return x;
    };
    const auto p0 = sm(l0);
    const auto p1 = sm(l1);
    for (int j = 0; j < 4; ++j) {
      CHECK(g.values[j] == doctest::Approx(std::max(p0[j], p1[j])).epsilon(1e-6));
      CHECK(g.values[j] >= p0[j] - 1e-6);
      CHECK(g.values[j] >= p1[j] - 1e-6);
    }
  }
}

TEST_CASE("global score update") {
  cpa::PoolConfig c = pool_config(2, 2, 1, 1, 2);
  cpa::PagedPool pool(c);
  const auto t = fill(pool, std::vector<Scalar>(8, 1.0f), 2);
  ScoreGrid s(2, 2);
  s.values = {0.3, 0.1, 0.2, 0.4};
  const ScoreGrid first = cpa::update_global_scores(s, pool, t, 0, 0, 0.8, false);
  CHECK(first.values == s.values);
  CHECK(pool.global_score(0, t.blocks[0], 0, 0) == static_cast<Scalar>(0.3));
  CHECK(pool.global_score(0, t.blocks[1], 1, 0) == static_cast<Scalar>(0.4));

  pool.set_global_score(0, t.blocks[0], 0, 0, 0.5f);
  const ScoreGrid next = cpa::update_global_scores(s, pool, t, 0, 0, 0.8, true);
  CHECK(next.values[0] == doctest::Approx(0.4).epsilon(1e-6));  // max(0.8 * 0.5, 0.3)
  CHECK(next.values[1] == doctest::Approx(0.1 * 0.8 > 0.1 ? 0.08 : 0.1).epsilon(1e-6));
  CHECK(next.values[2] == 0.2);  // last block: no history
  CHECK(pool.global_score(0, t.blocks[0], 0, 0) == doctest::Approx(0.4).epsilon(1e-6));

  const ScoreGrid zero = cpa::update_global_scores(s, pool, t, 0, 0, 0.0, true);
  CHECK(zero.values == s.values);

  cpa::PoolConfig off = c;
  off.global_score_enabled = false;
  cpa::PagedPool plain(off);
  const auto t2 = fill(plain, std::vector<Scalar>(8, 1.0f), 2);
  CHECK_THROWS_AS(cpa::update_global_scores(s, plain, t2, 0, 0, 0.8, false), cpa::GlobalDisabled);
}

TEST_CASE("shared blocks keep their F entries") {
  cpa::PoolConfig c = pool_config(3, 2, 1, 1, 2);
  cpa::PagedPool pool(c);
  const auto t = fill(pool, std::vector<Scalar>(12, 1.0f), 3);
  pool.retain(t.blocks[0]);
  ScoreGrid s(3, 2, 0.25);
  cpa::update_global_scores(s, pool, t, 0, 0, 0.8, false);
  CHECK(pool.global_score(0, t.blocks[0], 0, 0) == 0);
  CHECK(pool.global_score(0, t.blocks[1], 0, 0) == 0.25f);
}

TEST_CASE("max pooling") {
  auto pool = [](std::vector<double> v, int k) {
    ScoreGrid g(1, v.size());
    g.values = v;
    return cpa::max_pool_scores(g, k).values;
  };
  CHECK(pool({1, 5, 2}, 3) == std::vector<double>{5, 5, 5});
  CHECK(pool({0.1, 0.7, 0.3}, 1) == std::vector<double>{0.1, 0.7, 0.3});
  CHECK(pool({0, 0, 9, 0, 0}, 3) == std::vector<double>{0, 9, 9, 9, 0});
  CHECK(pool({3, 1, 1, 1, 1, 2}, 5) == std::vector<double>{3, 3, 3, 2, 2, 2});
  ScoreGrid g(1, 3);
  CHECK_THROWS_AS(cpa::max_pool_scores(g, 2), std::invalid_argument);
}

TEST_CASE("temperature softmax") {
  const std::vector<double> x = {0.0, 1.0};
  const auto one = cpa::softmax_with_temperature(x, 1.0);
  CHECK(one[1] == doctest::Approx(std::exp(1.0) / (1 + std::exp(1.0))));
  const auto flat = cpa::softmax_with_temperature(std::vector<double>{2, 2, 2}, 0.01);
  for (double v : flat) CHECK(v == doctest::Approx(1.0 / 3));
  const auto sharp = cpa::softmax_with_temperature(x, 1e-3);
  CHECK(sharp[1] == doctest::Approx(1.0));
  CHECK(sum(cpa::softmax_with_temperature(std::vector<double>{-1000, 5, 1000}, 0.4)) == doctest::Approx(1.0));
}

TEST_CASE("naive redundancy") {
  SUBCASE("two identical keys") {
    const std::vector<Scalar> k = {1, 0, 1, 0};
    const auto r = cpa::redundancy_naive(k, 2, 2, 0.5);
    CHECK(r[0] == doctest::Approx(0.5));
    CHECK(r[1] == doctest::Approx(0.5));
  }
  SUBCASE("orthogonal keys") {
    const std::vector<Scalar> k = {1, 0, 0, 1};
    const auto r = cpa::redundancy_naive(k, 2, 2, 0.5);
    CHECK(r[0] == doctest::Approx(0.5));
  }
  SUBCASE("three keys with a duplicate pair") {
    // Column 0's only entry above p is row 1 and column 1's is row 0; both are zeroed,
    // which leaves every row sum at zero.
    const std::vector<Scalar> k = {1, 0, 1, 0, 0, 1};
    const auto r = cpa::redundancy_naive(k, 3, 2, 0.5);
    for (double x : r) CHECK(x == doctest::Approx(1.0 / 3));
    const auto o = cpa::oracle::redundancy(k, 3, 2, 0.5, 1.0);
    for (int i = 0; i < 3; ++i) CHECK(r[i] == doctest::Approx(o[i]).epsilon(1e-12));
  }
  SUBCASE("three identical keys keep one surviving entry per column") {
    const std::vector<Scalar> k = {1, 0, 1, 0, 1, 0};
    const auto r = cpa::redundancy_naive(k, 3, 2, 0.5);
    // Column 0 zeroes row 2, column 1 zeroes row 2, column 2 zeroes row 1.
    // Row sums: [2, 1, 0] / 3, so earlier tokens are more redundant.
    CHECK(r[0] > r[1]);
    CHECK(r[1] > r[2]);
  }
  SUBCASE("zero norm") {
    const std::vector<Scalar> k = {1, 0, 0, 0};
    CHECK_THROWS_AS(cpa::redundancy_naive(k, 2, 2, 0.5), cpa::ZeroNormKey);
    CHECK_THROWS_AS(cpa::redundancy_flash(k, 2, 1, 2, 0.5), cpa::ZeroNormKey);
    CHECK_THROWS_AS(cpa::redundancy_lightning(k, 2, 1, 2, 0.5), cpa::ZeroNormKey);
  }
  SUBCASE("threshold is strict") {
    const std::vector<Scalar> k = {1, 0, 1, 0};
    const auto r = cpa::redundancy_naive(k, 2, 2, 1.0);  // cos = 1 does not exceed 1
    CHECK(r[0] == doctest::Approx(0.5));
    const auto o = cpa::oracle::redundancy(k, 2, 2, 1.0, 1.0);
    CHECK(r[0] == doctest::Approx(o[0]));
  }
}

TEST_CASE("flash redundancy") {
  std::mt19937_64 rng(11);
  SUBCASE("single block equals naive exactly") {
    const auto k = random_keys(rng, 6, 3);
    CHECK(cpa::redundancy_flash(k, 6, 8, 3, 0.3) == cpa::redundancy_naive(k, 6, 3, 0.3));
  }
  SUBCASE("random N=4, b=8, d=4, p=0.7") {
    const auto k = random_keys(rng, 32, 4);
    const auto a = cpa::redundancy_flash(k, 32, 8, 4, 0.7);
    const auto b = cpa::redundancy_naive(k, 32, 4, 0.7);
    for (std::size_t i = 0; i < 32; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
  }
  SUBCASE("above-threshold entries spanning two blocks") {
    // b = 2: positions 0 and 3 share a direction, so column 0's candidates are rows 3
    // (later block) and nothing else; column 3's is row 0 in the earlier block.
    const std::vector<Scalar> k = {1, 0, 0, 1, 0.6f, -0.8f, 1, 0.01f};
    const auto a = cpa::redundancy_flash(k, 4, 2, 2, 0.5);
    const auto b = cpa::redundancy_naive(k, 4, 2, 0.5);
    const auto o = cpa::oracle::redundancy(k, 4, 2, 0.5, 1.0);
    for (int i = 0; i < 4; ++i) {
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
      CHECK(a[i] == doctest::Approx(o[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("lightning redundancy") {
  std::mt19937_64 rng(12);
  SUBCASE("one block equals naive") {
    const auto k = random_keys(rng, 8, 4);
    const auto a = cpa::redundancy_lightning(k, 8, 8, 4, 0.3);
    const auto b = cpa::redundancy_naive(k, 8, 4, 0.3);
    for (int i = 0; i < 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
  SUBCASE("cross-block similarity is ignored") {
    // Each block holds orthogonal keys; blocks 1 and 2 repeat block 0.
    const std::vector<Scalar> k = {1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1};
    const auto r = cpa::redundancy_lightning(k, 6, 2, 2, 0.5);
    for (double x : r) CHECK(x == doctest::Approx(1.0 / 6));
    // Across blocks the copies are redundant, earlier ones most of all.
    const auto naive = cpa::redundancy_naive(k, 6, 2, 0.5);
    CHECK(naive[0] > naive[4]);
  }
  SUBCASE("random instances match the block-diagonal oracle") {
    const auto rep = cpa::oracle::redundancy_suite(100, 21);
    CHECK(rep.ok());
  }
}

TEST_CASE("combine") {
  ScoreGrid s(1, 2);
  s.values = {0.6, 0.4};
  const std::vector<double> r = {0.5, 0.5};
  const auto c = cpa::combine_scores(s, r, 0.2);
  CHECK(c.values[0] == doctest::Approx(0.5));
  CHECK(c.values[1] == doctest::Approx(0.3));
  CHECK(cpa::combine_scores(s, r, 0.0).values == s.values);
  // A large weight flips the argmax toward the less redundant entry.
  const std::vector<double> skew = {0.9, 0.1};
  const auto flipped = cpa::combine_scores(s, skew, 10.0);
  CHECK(flipped.values[1] > flipped.values[0]);
}

TEST_CASE("score pipeline") {
  cpa::PoolConfig c = pool_config(2, 4, 2, 2, 3);
  std::mt19937_64 rng(5);
  const auto keys = random_keys(rng, 8, 3);
  const auto q1 = random_keys(rng, 2, 3);
  const auto q2 = random_keys(rng, 2, 3);
  auto setup = [&](cpa::PagedPool& pool, cpa::QuerySlotCache& slots) {
    const auto t = fill(pool, keys, 2);
    const auto s = *slots.acquire(0);
    slots.push(s, 0, q1);
    slots.push(s, 0, q2);
    return std::pair{t, s};
  };
  SUBCASE("all optional stages off is attention_scores") {
    cpa::PagedPool pool(c);
    cpa::QuerySlotCache slots(c);
    const auto [t, s] = setup(pool, slots);
    cpa::ScoreConfig sc;
    sc.use_global = false;
    sc.pooling = cpa::Pooling::never;
    sc.lambda = 0.0;
    const auto r = cpa::score(pool, slots, s, t, 0, 0, sc, false);
    CHECK(r.scores.values == cpa::attention_scores(pool, slots, s, t, 0, 0).values);
  }
  SUBCASE("recommended config matches a dense reference") {
    cpa::PagedPool pool(c);
    cpa::QuerySlotCache slots(c);
    const auto [t, s] = setup(pool, slots);
    const cpa::ScoreConfig sc;  // lambda 0.2, tau 0.4, alpha 0.8, first-only pooling
    const auto r = cpa::score(pool, slots, s, t, 0, 0, sc, false);
    // Dense: attention -> F seeded -> pool (kernel 7) -> lightning R at tau -> S - lambda R.
    std::vector<Scalar> window;
    for (int g = 0; g < 2; ++g) {
      for (const auto* q : {&q1, &q2}) window.insert(window.end(), q->begin() + g * 3, q->begin() + g * 3 + 3);
    }
    const auto att = cpa::oracle::attention_scores(window, 2, 2, keys, 8, 3);
    std::vector<double> pooled(8);
    for (int i = 0; i < 8; ++i) {
      double m = -kInf;
      for (int j = i - 3; j <= i + 3; ++j) m = std::max(m, att[static_cast<std::size_t>(std::clamp(j, 0, 7))]);
      pooled[i] = m;
    }
    const auto red = cpa::oracle::redundancy(keys, 8, 3, sc.p, sc.tau, 4);
    for (int i = 0; i < 8; ++i) CHECK(r.scores.values[i] == doctest::Approx(pooled[i] - 0.2 * red[i]).epsilon(1e-9));
    for (int i = 0; i < 8; ++i) CHECK(r.global.values[i] == doctest::Approx(att[i]).epsilon(1e-9));
    // A later pass skips pooling; F holds att, and max(0.8 * att, att) = att.
    const auto again = cpa::score(pool, slots, s, t, 0, 0, sc, true);
    for (int i = 0; i < 8; ++i) CHECK(again.scores.values[i] == doctest::Approx(att[i] - 0.2 * red[i]).epsilon(1e-7));
  }
}

TEST_CASE("score config validation") {
  cpa::ScoreConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.tau = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.kernel = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(cpa::parse_pooling("first-only") == cpa::Pooling::first_only);
  CHECK(cpa::parse_redundancy("flash") == cpa::RedundancyVariant::flash);
  CHECK_THROWS(cpa::parse_redundancy("fast"));
}
