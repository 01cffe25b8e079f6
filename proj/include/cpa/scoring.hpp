// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cpa/paged_store.hpp"
#include "cpa/types.hpp"

namespace cpa {

/// Importance scores of one (layer, kv head) of one request, shaped [blocks][block_size]
/// and stored flat in logical order.
struct ScoreGrid {
  std::size_t blocks = 0;
  std::size_t block_size = 0;
  std::vector<double> values;

  ScoreGrid() = default;
  ScoreGrid(std::size_t n_blocks, std::size_t b, double fill = 0.0)
      : blocks(n_blocks), block_size(b), values(n_blocks * b, fill) {}

  std::size_t size() const { return values.size(); }
  double& at(std::size_t block, std::size_t slot) { return values[block * block_size + slot]; }
  double at(std::size_t block, std::size_t slot) const { return values[block * block_size + slot]; }
};

enum class Pooling { never, first_only, always };
enum class RedundancyVariant { naive, flash, lightning };

Pooling parse_pooling(std::string_view name);
RedundancyVariant parse_redundancy(std::string_view name);
std::string_view to_string(Pooling p);
std::string_view to_string(RedundancyVariant v);

struct ScoreConfig {
  double alpha = 0.8;   ///< global-score decay
  double lambda = 0.2;  ///< redundancy weight
  double tau = 0.4;     ///< redundancy softmax temperature
  double p = 0.8;       ///< cosine-similarity threshold
  Pooling pooling = Pooling::first_only;
  int kernel = 7;
  RedundancyVariant redundancy = RedundancyVariant::lightning;
  bool use_global = true;

  void validate() const;
};

/// Streaming state of the flash redundancy computation: per (row block, column block)
/// partial row sums, plus one zero-out tag per column.
struct RedundancyAccumulator {
  std::size_t blocks = 0;
  std::size_t block_size = 0;
  std::vector<double> accum;          ///< [blocks][blocks][block_size], indexed [row][col][slot]
  std::vector<std::uint8_t> zeroed;   ///< [blocks * block_size]

  RedundancyAccumulator(std::size_t n, std::size_t b)
      : blocks(n), block_size(b), accum(n * n * b, 0.0), zeroed(n * b, 0) {}
  double& at(std::size_t row_block, std::size_t col_block, std::size_t slot) {
    return accum[(row_block * blocks + col_block) * block_size + slot];
  }
};

/// QK^T / sqrt(d) for one block, [window][block_size] row-major. For the last block,
/// window token u sits at block position u + b - w and every later position is masked
/// to -inf.
std::vector<double> block_attention_logits(std::span<const Scalar> window_queries,
                                           std::span<const Scalar> block_keys, int window, int block_size,
                                           int head_dim, bool is_last_block);

/// Softmax over all positions per window row and query head, max across the query
/// heads of the kv-head group, mean over window rows. Requires a full window that
/// lies entirely in the last block. Throws WindowNotFull.
ScoreGrid attention_scores(const PagedPool& pool, const QuerySlotCache& slots, SlotId slot,
                           const BlockTable& table, int layer, int kv_head);

/// Decayed running max against the global-score cache F. Uncompressed requests only
/// seed F; compressed ones take max(alpha * F, S) on every block but the last.
/// F is not written for shared blocks: their scores are request-private and travel to
/// the compression targets through the returned grid. Throws GlobalDisabled.
ScoreGrid update_global_scores(const ScoreGrid& scores, PagedPool& pool, const BlockTable& table, int layer,
                               int kv_head, double alpha, bool is_compressed);

/// Stride-1 sliding max of odd width over the flattened sequence, edge-replicated.
ScoreGrid max_pool_scores(const ScoreGrid& scores, int kernel);

/// softmax(x / tau) with max subtraction.
std::vector<double> softmax_with_temperature(std::span<const double> x, double tau);

/// Dense redundancy over `length` contiguous keys ([length][head_dim]): full cosine
/// matrix, diagonal zeroed, the last entry above `p` in each column zeroed, row sums
/// divided by length, softmax at temperature `tau`. Throws ZeroNormKey.
std::vector<double> redundancy_naive(std::span<const Scalar> keys, std::size_t length, int head_dim, double p,
                                     double tau = 1.0);

/// Block-streaming redundancy. Walks row blocks from the last one back so that each
/// column zeroes only its globally last above-threshold entry. Numerically equal to
/// redundancy_naive.
std::vector<double> redundancy_flash(std::span<const Scalar> keys, std::size_t length, int block_size,
                                     int head_dim, double p, double tau = 1.0);
std::vector<double> redundancy_flash(const PagedPool& pool, const BlockTable& table, int layer, int kv_head,
                                     double p, double tau = 1.0);

/// Within-block redundancy: similarity and zeroing restricted to each block's b x b
/// diagonal tile. Still normalised by the full sequence length.
std::vector<double> redundancy_lightning(std::span<const Scalar> keys, std::size_t length, int block_size,
                                         int head_dim, double p, double tau = 1.0);
std::vector<double> redundancy_lightning(const PagedPool& pool, const BlockTable& table, int layer,
                                         int kv_head, double p, double tau = 1.0);

/// S - lambda * R elementwise; R is laid out like S.values (entries past R's end count as 0).
ScoreGrid combine_scores(const ScoreGrid& scores, std::span<const double> redundancy, double lambda);

struct ScoreResult {
  ScoreGrid scores;  ///< final scores, ready for window pinning
  ScoreGrid global;  ///< post global-update grid (empty unless use_global); mirrors F
};

/// Full scoring pipeline for one (layer, kv head): attention scores, global update,
/// pooling (per policy), temperature-scaled redundancy, combination.
ScoreResult score(PagedPool& pool, const QuerySlotCache& slots, SlotId slot, const BlockTable& table, int layer,
                  int kv_head, const ScoreConfig& config, bool is_compressed);

}  // namespace cpa
