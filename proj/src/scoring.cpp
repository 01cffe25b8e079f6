// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "cpa/errors.hpp"

namespace cpa {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double dot(const Scalar* a, const Scalar* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Key rows addressed by logical position, either from a dense array or a paged table.
struct DenseKeys {
  std::span<const Scalar> keys;
  int head_dim;
  const Scalar* row(std::size_t pos) const { return keys.data() + pos * static_cast<std::size_t>(head_dim); }
};

struct PagedKeys {
  const PagedPool& pool;
  const BlockTable& table;
  int layer;
  int head;
  const Scalar* row(std::size_t pos) const {
    const auto b = static_cast<std::size_t>(pool.config().block_size);
    return pool.key(layer, table.blocks[pos / b], static_cast<int>(pos % b), head).data();
  }
};

template <typename Keys>
std::vector<double> key_norms(const Keys& keys, std::size_t length, int d) {
  std::vector<double> norms(length);
  for (std::size_t i = 0; i < length; ++i) {
    const Scalar* k = keys.row(i);
    norms[i] = std::sqrt(dot(k, k, d));
    if (norms[i] == 0.0) throw ZeroNormKey(i);
  }
  return norms;
}

// Row sums -> length normalisation -> temperature softmax.
std::vector<double> finish_redundancy(std::vector<double> row_sums, std::size_t length, double tau) {
  for (double& s : row_sums) s /= static_cast<double>(length);
  return softmax_with_temperature(row_sums, tau);
}

template <typename Keys>
std::vector<double> flash_impl(const Keys& keys, std::size_t length, int block_size, int d, double p,
                               double tau) {
  if (length == 0) return {};
  const auto b = static_cast<std::size_t>(block_size);
  const std::size_t n_blocks = (length + b - 1) / b;
  const auto norms = key_norms(keys, length, d);
  auto block_len = [&](std::size_t blk) { return std::min(b, length - blk * b); };

  RedundancyAccumulator acc(n_blocks, b);
  std::vector<double> tile(b * b);
  for (std::size_t m = 0; m < n_blocks; ++m) {
    const std::size_t cols = block_len(m);
    for (std::size_t i = n_blocks; i-- > 0;) {
      const std::size_t rows = block_len(i);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t gr = i * b + r;
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t gc = m * b + c;
          tile[r * b + c] = dot(keys.row(gr), keys.row(gc), d) / (norms[gr] * norms[gc]);
        }
      }
      if (i == m) {
        for (std::size_t r = 0; r < rows; ++r) tile[r * b + r] = 0.0;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        std::uint8_t& tag = acc.zeroed[m * b + c];
        if (tag) continue;
        for (std::size_t r = rows; r-- > 0;) {
          if (tile[r * b + c] > p) {
            tile[r * b + c] = 0.0;
            tag = 1;
            break;
          }
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += tile[r * b + c];
        acc.at(i, m, r) = s;
      }
    }
  }

  std::vector<double> row_sums(length, 0.0);
  for (std::size_t i = 0; i < n_blocks; ++i) {
    for (std::size_t r = 0; r < block_len(i); ++r) {
      double s = 0.0;
      for (std::size_t m = 0; m < n_blocks; ++m) s += acc.at(i, m, r);
      row_sums[i * b + r] = s;
    }
  }
  return finish_redundancy(std::move(row_sums), length, tau);
}

template <typename Keys>
std::vector<double> lightning_impl(const Keys& keys, std::size_t length, int block_size, int d, double p,
                                   double tau) {
  if (length == 0) return {};
  const auto b = static_cast<std::size_t>(block_size);
  const std::size_t n_blocks = (length + b - 1) / b;
  const auto norms = key_norms(keys, length, d);

  std::vector<double> row_sums(length, 0.0);
  std::vector<double> tile(b * b);
  for (std::size_t i = 0; i < n_blocks; ++i) {
    const std::size_t n = std::min(b, length - i * b);
    const std::size_t base = i * b;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        tile[r * b + c] =
            r == c ? 0.0 : dot(keys.row(base + r), keys.row(base + c), d) / (norms[base + r] * norms[base + c]);
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t r = n; r-- > 0;) {
        if (tile[r * b + c] > p) {
          tile[r * b + c] = 0.0;
          break;
        }
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += tile[r * b + c];
      row_sums[base + r] = s;
    }
  }
  return finish_redundancy(std::move(row_sums), length, tau);
}

void check_dense(std::span<const Scalar> keys, std::size_t length, int head_dim) {
  if (head_dim <= 0 || keys.size() < length * static_cast<std::size_t>(head_dim)) {
    throw std::invalid_argument("key array shorter than length * head_dim");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Pooling parse_pooling(std::string_view name) {
  if (name == "never") return Pooling::never;
  if (name == "first-only" || name == "first_only") return Pooling::first_only;
  if (name == "always") return Pooling::always;
  throw std::invalid_argument("unknown pooling policy '" + std::string(name) + "'");
}

RedundancyVariant parse_redundancy(std::string_view name) {
  if (name == "naive") return RedundancyVariant::naive;
  if (name == "flash") return RedundancyVariant::flash;
  if (name == "lightning") return RedundancyVariant::lightning;
  throw std::invalid_argument("unknown redundancy variant '" + std::string(name) + "'");
}

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::never: return "never";
    case Pooling::first_only: return "first-only";
    case Pooling::always: return "always";
  }
  return "?";
}

std::string_view to_string(RedundancyVariant v) {
  switch (v) {
    case RedundancyVariant::naive: return "naive";
    case RedundancyVariant::flash: return "flash";
    case RedundancyVariant::lightning: return "lightning";
  }
  return "?";
}

void ScoreConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("pooling kernel must be a positive odd integer");
}

std::vector<double> block_attention_logits(std::span<const Scalar> window_queries,
                                           std::span<const Scalar> block_keys, int window, int block_size,
                                           int head_dim, bool is_last_block) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> logits(static_cast<std::size_t>(window) * block_size);
  for (int u = 0; u < window; ++u) {
    const Scalar* q = window_queries.data() + static_cast<std::size_t>(u) * head_dim;
    for (int v = 0; v < block_size; ++v) {
      double& out = logits[static_cast<std::size_t>(u) * block_size + v];
      if (is_last_block && v > u + block_size - window) {
        out = kNegInf;
      } else {
        out = dot(q, block_keys.data() + static_cast<std::size_t>(v) * head_dim, head_dim) * scale;
      }
    }
  }
  return logits;
}

ScoreGrid attention_scores(const PagedPool& pool, const QuerySlotCache& slots, SlotId slot,
                           const BlockTable& table, int layer, int kv_head) {
  const PoolConfig& cfg = pool.config();
  const int w = cfg.window;
  const int b = cfg.block_size;
  const int d = cfg.head_dim;
  const int fill = slots.fill(slot, layer);
  if (fill < w) throw WindowNotFull(fill, w);
  if (table.empty() || table.last_block_fill(b) != static_cast<std::size_t>(b)) {
    throw std::invalid_argument("attention_scores requires a full last block");
  }
  const std::size_t n = table.num_blocks();
  const std::size_t seq = n * static_cast<std::size_t>(b);

  // Gather every block's keys once; [n][b][d].
  std::vector<Scalar> block_keys(seq * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (int s = 0; s < b; ++s) {
      const auto k = pool.key(layer, table.blocks[i], s, kv_head);
      std::copy(k.begin(), k.end(), block_keys.begin() + static_cast<std::ptrdiff_t>((i * b + s) * d));
    }
  }

  ScoreGrid grid(n, static_cast<std::size_t>(b), 0.0);
  std::vector<double> reduced(static_cast<std::size_t>(w) * seq, 0.0);  // GQA max over heads, [w][n*b]
  std::vector<double> logits(static_cast<std::size_t>(w) * seq);
  const int group = cfg.group_size();
  for (int g = 0; g < group; ++g) {
    const int qh = kv_head * group + g;
    const auto queries = slots.window(slot, layer, qh);
    for (std::size_t i = 0; i < n; ++i) {
      const auto tile = block_attention_logits(
          queries, std::span<const Scalar>(block_keys).subspan(i * b * d, static_cast<std::size_t>(b) * d), w, b,
          d, i + 1 == n);
      for (int u = 0; u < w; ++u) {
        std::copy_n(tile.begin() + static_cast<std::ptrdiff_t>(u) * b, b,
                    logits.begin() + static_cast<std::ptrdiff_t>(u * seq + i * b));
      }
    }
    for (int u = 0; u < w; ++u) {
      const auto row = std::span<const double>(logits).subspan(u * seq, seq);
      const auto probs = softmax_with_temperature(row, 1.0);
      double* dst = reduced.data() + u * seq;
      for (std::size_t j = 0; j < seq; ++j) dst[j] = g == 0 ? probs[j] : std::max(dst[j], probs[j]);
    }
  }
  for (int u = 0; u < w; ++u) {
    for (std::size_t j = 0; j < seq; ++j) grid.values[j] += reduced[u * seq + j];
  }
  for (double& v : grid.values) v /= static_cast<double>(w);
  return grid;
}

ScoreGrid update_global_scores(const ScoreGrid& scores, PagedPool& pool, const BlockTable& table, int layer,
                               int kv_head, double alpha, bool is_compressed) {
  if (!pool.has_global_scores()) throw GlobalDisabled();
  ScoreGrid out = scores;
  const std::size_t n = scores.blocks;
  for (std::size_t i = 0; i < n; ++i) {
    const BlockId block = table.blocks[i];
    const bool shared = pool.is_shared(block);
    for (std::size_t s = 0; s < scores.block_size; ++s) {
      double v = scores.at(i, s);
      if (is_compressed && i + 1 < n) {
        const double f = pool.global_score(layer, block, static_cast<int>(s), kv_head);
        v = std::max(alpha * f, v);
      }
      out.at(i, s) = v;
      if (!shared) pool.set_global_score(layer, block, static_cast<int>(s), kv_head, static_cast<Scalar>(v));
    }
  }
  return out;
}

ScoreGrid max_pool_scores(const ScoreGrid& scores, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("pooling kernel must be a positive odd integer");
  ScoreGrid out = scores;
  const std::size_t len = scores.values.size();
  const auto radius = static_cast<std::size_t>(kernel / 2);
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t lo = i >= radius ? i - radius : 0;
    const std::size_t hi = std::min(len - 1, i + radius);
    double m = scores.values[lo];
    for (std::size_t j = lo + 1; j <= hi; ++j) m = std::max(m, scores.values[j]);
    out.values[i] = m;
  }
  return out;
}

std::vector<double> softmax_with_temperature(std::span<const double> x, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double mx = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp((x[i] - mx) / tau);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> redundancy_naive(std::span<const Scalar> keys, std::size_t length, int head_dim, double p,
                                     double tau) {
  check_dense(keys, length, head_dim);
  if (length == 0) return {};
  const DenseKeys src{keys, head_dim};
  const auto norms = key_norms(src, length, head_dim);
  std::vector<double> sim(length * length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      sim[i * length + j] = i == j ? 0.0 : dot(src.row(i), src.row(j), head_dim) / (norms[i] * norms[j]);
    }
  }
  for (std::size_t j = 0; j < length; ++j) {
    for (std::size_t i = length; i-- > 0;) {
      if (sim[i * length + j] > p) {
        sim[i * length + j] = 0.0;
        break;
      }
    }
  }
  std::vector<double> row_sums(length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) row_sums[i] += sim[i * length + j];
  }
  return finish_redundancy(std::move(row_sums), length, tau);
}

std::vector<double> redundancy_flash(std::span<const Scalar> keys, std::size_t length, int block_size,
                                     int head_dim, double p, double tau) {
  check_dense(keys, length, head_dim);
  return flash_impl(DenseKeys{keys, head_dim}, length, block_size, head_dim, p, tau);
}

std::vector<double> redundancy_flash(const PagedPool& pool, const BlockTable& table, int layer, int kv_head,
                                     double p, double tau) {
  const PoolConfig& cfg = pool.config();
  return flash_impl(PagedKeys{pool, table, layer, kv_head}, table.length, cfg.block_size, cfg.head_dim, p, tau);
}

std::vector<double> redundancy_lightning(std::span<const Scalar> keys, std::size_t length, int block_size,
                                         int head_dim, double p, double tau) {
  check_dense(keys, length, head_dim);
  return lightning_impl(DenseKeys{keys, head_dim}, length, block_size, head_dim, p, tau);
}

std::vector<double> redundancy_lightning(const PagedPool& pool, const BlockTable& table, int layer,
                                         int kv_head, double p, double tau) {
  const PoolConfig& cfg = pool.config();
  return lightning_impl(PagedKeys{pool, table, layer, kv_head}, table.length, cfg.block_size, cfg.head_dim, p,
                        tau);
}

ScoreGrid combine_scores(const ScoreGrid& scores, std::span<const double> redundancy, double lambda) {
  ScoreGrid out = scores;
  const std::size_t n = std::min(out.values.size(), redundancy.size());
  for (std::size_t i = 0; i < n; ++i) out.values[i] -= lambda * redundancy[i];
  return out;
}

ScoreResult score(PagedPool& pool, const QuerySlotCache& slots, SlotId slot, const BlockTable& table, int layer,
                  int kv_head, const ScoreConfig& config, bool is_compressed) {
  ScoreResult result;
  result.scores = attention_scores(pool, slots, slot, table, layer, kv_head);
  if (config.use_global) {
    result.scores = update_global_scores(result.scores, pool, table, layer, kv_head, config.alpha, is_compressed);
    result.global = result.scores;
  }
  const bool pool_now = config.pooling == Pooling::always || (config.pooling == Pooling::first_only && !is_compressed);
  if (pool_now) result.scores = max_pool_scores(result.scores, config.kernel);
  if (config.lambda > 0.0) {
    std::vector<double> r;
    switch (config.redundancy) {
      case RedundancyVariant::naive: {
        const auto dense = pool.gather_contiguous(table, table.length, layer, kv_head);
        r = redundancy_naive(dense.keys, table.length, pool.config().head_dim, config.p, config.tau);
        break;
      }
      case RedundancyVariant::flash:
        r = redundancy_flash(pool, table, layer, kv_head, config.p, config.tau);
        break;
      case RedundancyVariant::lightning:
        r = redundancy_lightning(pool, table, layer, kv_head, config.p, config.tau);
        break;
    }
    result.scores = combine_scores(result.scores, r, config.lambda);
  }
  return result;
}

}  // namespace cpa
