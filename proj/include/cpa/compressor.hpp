// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "cpa/paged_store.hpp"
#include "cpa/scoring.hpp"

namespace cpa {

/// Retention mask over [blocks][block_size] positions of one (layer, kv head).
struct TopKTag {
  std::size_t blocks = 0;
  std::size_t block_size = 0;
  std::vector<std::uint8_t> bits;

  std::size_t count() const;
  bool at(std::size_t pos) const { return bits[pos] != 0; }
};

/// Where a compression writes its survivors and what it gives back.
struct CompressionPlan {
  std::vector<BlockId> targets;   ///< n_max - 1 exclusively owned blocks, in write order
  std::size_t reuse_count = 0;    ///< targets taken from the request's own table
  std::vector<BlockId> fresh;     ///< blocks newly allocated for this plan (targets and maybe reserved)
  BlockId reserved = kInvalidBlock;  ///< empty decoding block appended after the targets
  bool reserved_fresh = false;
  std::vector<BlockId> release;   ///< table blocks that drop one reference after compaction
  std::size_t shared_blocks = 0;  ///< N_prefix: table blocks with ref_count > 1 at planning time
};

struct CompressionReport {
  std::size_t entries_moved = 0;           ///< summed over every (layer, kv head)
  std::size_t entries_per_head = 0;        ///< (n_max - 1) * b
  std::size_t blocks_released = 0;         ///< references dropped, shared ones included
  std::size_t layer_chunks = 0;
  std::uint64_t peak_activation_estimate = 0;  ///< layer_stride * h_q * N * b * w for one request
};

struct CompressionConfig {
  int n_max = 4;
  int layer_stride = 1;
  ScoreConfig score;

  void validate() const;
};

/// Sets the last `window` logical positions (of `length`) to +inf.
ScoreGrid pin_window(const ScoreGrid& scores, std::size_t window, std::size_t length);

/// Marks the k highest scores among the first `length` positions. Equal scores favour
/// the later position. Throws BudgetExceedsLength when k > length.
TopKTag topk_tag(const ScoreGrid& scores, std::size_t k, std::size_t length);
inline TopKTag topk_tag(const ScoreGrid& scores, std::size_t k) { return topk_tag(scores, k, scores.size()); }

/// Two-pointer compaction of one (layer, kv head): tagged entries of `table` are copied
/// in logical order into consecutive slots of `targets`. When `global` is given, the
/// matching global scores are written to F at the destination slots. Targets that are
/// also table blocks must sit at their own table index so that no write lands on an
/// unread entry. Returns the number of entries written.
std::size_t compact(PagedPool& pool, const BlockTable& table, const TopKTag& tag,
                    const std::vector<BlockId>& targets, int layer, int kv_head,
                    const ScoreGrid* global = nullptr);

/// Chooses target blocks. With no shared blocks the first n_max - 1 own blocks are
/// reused in place. With N_prefix shared blocks at the front, N_prefix fresh blocks
/// replace them (all n_max - 1 fresh once N_prefix >= n_max - 1) and the remaining
/// targets are own blocks at their own index. The reserved block is the first own,
/// unshared, non-target block, or a fresh one if there is none. All allocation happens
/// here; on NoFreeBlocks nothing is left allocated.
CompressionPlan plan_targets(PagedPool& pool, const BlockTable& table, int n_max);

/// Scores every (layer, kv head) in chunks of `layer_stride` layers and compacts into
/// the plan's targets. Touches only the request's own blocks plus reads of shared ones,
/// so it may run concurrently with decoding of other requests.
CompressionReport execute_compression(PagedPool& pool, const QuerySlotCache& slots, SlotId slot,
                                      const BlockTable& table, const CompressionPlan& plan, bool is_compressed,
                                      const CompressionConfig& config);

/// Swaps in [targets..., reserved] with length (n_max - 1) * b and drops the released
/// references. Returns the number of references dropped.
std::size_t finalize_compression(PagedPool& pool, BlockTable& table, const CompressionPlan& plan,
                                 const CompressionConfig& config);

/// plan_targets + execute_compression + finalize_compression.
CompressionReport compress_request(PagedPool& pool, const QuerySlotCache& slots, SlotId slot, BlockTable& table,
                                   bool is_compressed, const CompressionConfig& config);

/// True when a request holding `table` must compress: at least n_max blocks and a full
/// last block.
bool compression_due(const BlockTable& table, int n_max, int block_size);

}  // namespace cpa
