// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <unordered_map>
#include <vector>

#include "cpa/types.hpp"

namespace cpa {

struct PoolConfig {
  int num_layers = 1;
  int total_blocks = 1;
  int block_size = 16;
  int kv_heads = 1;
  int query_heads = 1;
  int head_dim = 8;
  int max_concurrency = 1;
  int window = 4;
  bool global_score_enabled = false;

  /// Throws std::invalid_argument on non-positive counts, a query-head count that is
  /// not a multiple of the kv-head count, or a window outside [1, block_size).
  void validate() const;
  int group_size() const { return query_heads / kv_heads; }
};

/// Ordered block ids owned by one request plus its logical length in tokens.
/// All blocks but the last are full.
struct BlockTable {
  std::vector<BlockId> blocks;
  std::size_t length = 0;

  std::size_t num_blocks() const { return blocks.size(); }
  bool empty() const { return blocks.empty(); }
  /// True when there is no room for another token without allocating.
  bool last_block_full(int block_size) const {
    return length == blocks.size() * static_cast<std::size_t>(block_size);
  }
  /// Tokens held by the last block (0 for an empty table).
  std::size_t last_block_fill(int block_size) const {
    if (blocks.empty()) return 0;
    return length - (blocks.size() - 1) * static_cast<std::size_t>(block_size);
  }
};

struct PrefixMatch {
  std::vector<BlockId> blocks;
  std::size_t tokens = 0;
};

/// Pre-allocated paged K/V storage laid out [layer][block][slot][kv_head][dim], the
/// optional global-score cache F laid out [layer][block][slot][kv_head], the free list,
/// per-block reference counts and the prefix index.
///
/// Threading contract: metadata (free list, reference counts, prefix index) is mutated
/// only by the owning driver. Tensor payloads may be read and written from several
/// threads at once as long as no block is written by one party while another touches it.
/// The scheduler guarantees this by keeping a compressing request out of every decode
/// batch. Shared blocks (ref_count > 1) are never written.
class PagedPool {
 public:
  explicit PagedPool(const PoolConfig& config);

  const PoolConfig& config() const { return config_; }

  /// Pops the lowest free block id and sets its reference count to 1.
  BlockId allocate();
  /// allocate() and append to `table`. The table length is left untouched.
  BlockId allocate_block(BlockTable& table);
  /// Drops one reference; the block returns to the free list at zero.
  void free_block(BlockId block);
  void free_blocks(std::span<const BlockId> blocks);
  /// Adds a reference to an owned block.
  void retain(BlockId block);

  /// Relaxed atomic read: a compression thread may ask whether a block is shared while
  /// the driver retains or frees other holders' references.
  int ref_count(BlockId block) const {
    return std::atomic_ref<int>(const_cast<int&>(ref_counts_.at(static_cast<std::size_t>(block))))
        .load(std::memory_order_relaxed);
  }
  bool is_free(BlockId block) const { return ref_count(block) == 0; }
  bool is_shared(BlockId block) const { return ref_count(block) > 1; }
  std::size_t num_free() const { return free_list_.size(); }
  std::size_t num_owned() const { return static_cast<std::size_t>(config_.total_blocks) - free_list_.size(); }

  /// Checked write. Throws SharedBlockWrite for shared blocks and std::out_of_range for
  /// bad indices. Drops the block from the prefix index since its content changes.
  void write_kv(int layer, BlockId block, int slot, int head, std::span<const Scalar> key,
                std::span<const Scalar> value);

  std::span<const Scalar> key(int layer, BlockId block, int slot, int head) const;
  std::span<const Scalar> value(int layer, BlockId block, int slot, int head) const;

  // Unchecked mutable views used by compaction, which has already validated ownership.
  std::span<Scalar> key_mut(int layer, BlockId block, int slot, int head);
  std::span<Scalar> value_mut(int layer, BlockId block, int slot, int head);

  bool has_global_scores() const { return config_.global_score_enabled; }
  /// Throws GlobalDisabled when F was not allocated.
  Scalar global_score(int layer, BlockId block, int slot, int head) const;
  void set_global_score(int layer, BlockId block, int slot, int head, Scalar value);

  /// Registers a full block under its chained content hash.
  void register_prefix(std::uint64_t chain_hash, BlockId block);
  void unregister_prefix(BlockId block);
  bool is_registered(BlockId block) const { return hash_of_block_.count(block) != 0; }
  /// Longest run of registered blocks matching `block_hashes` from the front. Each
  /// matched block gains a reference.
  PrefixMatch match_prefix(std::span<const std::uint64_t> block_hashes);
  /// Number of leading blocks match_prefix would return, without taking references.
  std::size_t peek_prefix(std::span<const std::uint64_t> block_hashes) const;

  /// Logically ordered K and V rows ([length][head_dim] each) of one (layer, kv head).
  struct Dense {
    std::vector<Scalar> keys;
    std::vector<Scalar> values;
  };
  Dense gather_contiguous(const BlockTable& table, std::size_t length, int layer, int head) const;

  /// |free| + |owned| == total_blocks and every ref count is consistent with the free list.
  bool check_conservation() const;

 private:
  std::size_t kv_offset(int layer, BlockId block, int slot, int head) const;
  std::size_t f_offset(int layer, BlockId block, int slot, int head) const;
  void check_index(int layer, BlockId block, int slot, int head) const;

  PoolConfig config_;
  std::vector<Scalar> keys_;
  std::vector<Scalar> values_;
  std::vector<Scalar> global_;
  std::set<BlockId> free_list_;
  std::vector<int> ref_counts_;
  std::unordered_map<std::uint64_t, BlockId> block_of_hash_;
  std::unordered_map<BlockId, std::uint64_t> hash_of_block_;
};

/// Observation-window query cache Q laid out [layer][slot][window][query_head][dim].
/// Each (slot, layer) is a ring buffer holding the most recent `window` query states.
class QuerySlotCache {
 public:
  explicit QuerySlotCache(const PoolConfig& config);

  /// Lowest free slot, bound to `owner` with an empty window; nullopt when all are taken.
  std::optional<SlotId> acquire(RequestId owner);
  void release(SlotId slot);
  std::optional<RequestId> owner(SlotId slot) const;
  std::size_t num_free() const { return free_.size(); }
  int num_slots() const { return config_.max_concurrency; }

  /// Appends one token's query states for all query heads ([query_heads][dim]).
  /// Throws UnboundSlot when the slot has no owner.
  void push(SlotId slot, int layer, std::span<const Scalar> queries);
  int fill(SlotId slot, int layer) const;
  /// Window queries of one query head in generation order, [fill][dim].
  std::vector<Scalar> window(SlotId slot, int layer, int query_head) const;

 private:
  std::size_t offset(SlotId slot, int layer, int pos, int head) const;
  std::size_t ring(SlotId slot, int layer) const;
  void check_bound(SlotId slot) const;

  PoolConfig config_;
  std::vector<Scalar> queries_;
  std::set<SlotId> free_;
  std::vector<std::optional<RequestId>> owners_;
  std::vector<int> cursor_;
  std::vector<int> fill_;
};

struct PoolState {
  PagedPool pool;
  QuerySlotCache slots;
};

PoolState init_pool(const PoolConfig& config);

}  // namespace cpa
