// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/paged_store.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <string>

#include "cpa/errors.hpp"

namespace cpa {

void PoolConfig::validate() const {
  if (num_layers <= 0 || total_blocks <= 0 || block_size <= 0 || kv_heads <= 0 || query_heads <= 0 ||
      head_dim <= 0 || max_concurrency <= 0) {
    throw std::invalid_argument("pool dimensions must be strictly positive");
  }
  if (query_heads % kv_heads != 0) {
    throw std::invalid_argument("query_heads must be a multiple of kv_heads");
  }
  if (window < 1 || window >= block_size) {
    throw std::invalid_argument("window must satisfy 1 <= window < block_size");
  }
}

// ---------------------------------------------------------------------------
// PagedPool

PagedPool::PagedPool(const PoolConfig& config) : config_(config) {
  config_.validate();
  const std::size_t entries = static_cast<std::size_t>(config_.num_layers) * config_.total_blocks *
                              config_.block_size * config_.kv_heads;
  keys_.assign(entries * config_.head_dim, Scalar{0});
  values_.assign(entries * config_.head_dim, Scalar{0});
  if (config_.global_score_enabled) global_.assign(entries, Scalar{0});
  ref_counts_.assign(static_cast<std::size_t>(config_.total_blocks), 0);
  for (BlockId b = 0; b < config_.total_blocks; ++b) free_list_.insert(free_list_.end(), b);
}

BlockId PagedPool::allocate() {
  if (free_list_.empty()) throw NoFreeBlocks();
  const BlockId block = *free_list_.begin();
  free_list_.erase(free_list_.begin());
  std::atomic_ref<int>(ref_counts_[static_cast<std::size_t>(block)]).store(1, std::memory_order_relaxed);
  return block;
}

BlockId PagedPool::allocate_block(BlockTable& table) {
  const BlockId block = allocate();
  table.blocks.push_back(block);
  return block;
}

void PagedPool::free_block(BlockId block) {
  if (block < 0 || block >= config_.total_blocks) throw std::out_of_range("block id out of range");
  std::atomic_ref<int> rc(ref_counts_[static_cast<std::size_t>(block)]);
  if (rc.load(std::memory_order_relaxed) == 0) throw DoubleFree(block);
  if (rc.fetch_sub(1, std::memory_order_relaxed) == 1) {
    unregister_prefix(block);
    free_list_.insert(block);
  }
}

void PagedPool::free_blocks(std::span<const BlockId> blocks) {
  for (BlockId b : blocks) free_block(b);
}

void PagedPool::retain(BlockId block) {
  std::atomic_ref<int> rc(ref_counts_.at(static_cast<std::size_t>(block)));
  if (rc.load(std::memory_order_relaxed) == 0) throw std::logic_error("cannot retain a free block");
  rc.fetch_add(1, std::memory_order_relaxed);
}

std::size_t PagedPool::kv_offset(int layer, BlockId block, int slot, int head) const {
  return f_offset(layer, block, slot, head) * static_cast<std::size_t>(config_.head_dim);
}

std::size_t PagedPool::f_offset(int layer, BlockId block, int slot, int head) const {
  return ((static_cast<std::size_t>(layer) * config_.total_blocks + static_cast<std::size_t>(block)) *
              config_.block_size +
          static_cast<std::size_t>(slot)) *
             config_.kv_heads +
         static_cast<std::size_t>(head);
}

void PagedPool::check_index(int layer, BlockId block, int slot, int head) const {
  if (layer < 0 || layer >= config_.num_layers || block < 0 || block >= config_.total_blocks || slot < 0 ||
      slot >= config_.block_size || head < 0 || head >= config_.kv_heads) {
    throw std::out_of_range("KV index out of range (layer " + std::to_string(layer) + ", block " +
                            std::to_string(block) + ", slot " + std::to_string(slot) + ", head " +
                            std::to_string(head) + ")");
  }
}

void PagedPool::write_kv(int layer, BlockId block, int slot, int head, std::span<const Scalar> key,
                         std::span<const Scalar> value) {
  check_index(layer, block, slot, head);
  if (key.size() != static_cast<std::size_t>(config_.head_dim) || value.size() != key.size()) {
    throw std::invalid_argument("key/value length must equal head_dim");
  }
  if (is_free(block)) throw std::logic_error("write to free block " + std::to_string(block));
  if (is_shared(block)) throw SharedBlockWrite(block);
  unregister_prefix(block);
  const std::size_t off = kv_offset(layer, block, slot, head);
  std::copy(key.begin(), key.end(), keys_.begin() + static_cast<std::ptrdiff_t>(off));
  std::copy(value.begin(), value.end(), values_.begin() + static_cast<std::ptrdiff_t>(off));
}

std::span<const Scalar> PagedPool::key(int layer, BlockId block, int slot, int head) const {
  check_index(layer, block, slot, head);
  return {keys_.data() + kv_offset(layer, block, slot, head), static_cast<std::size_t>(config_.head_dim)};
}

std::span<const Scalar> PagedPool::value(int layer, BlockId block, int slot, int head) const {
  check_index(layer, block, slot, head);
  return {values_.data() + kv_offset(layer, block, slot, head), static_cast<std::size_t>(config_.head_dim)};
}

std::span<Scalar> PagedPool::key_mut(int layer, BlockId block, int slot, int head) {
  return {keys_.data() + kv_offset(layer, block, slot, head), static_cast<std::size_t>(config_.head_dim)};
}

std::span<Scalar> PagedPool::value_mut(int layer, BlockId block, int slot, int head) {
  return {values_.data() + kv_offset(layer, block, slot, head), static_cast<std::size_t>(config_.head_dim)};
}

Scalar PagedPool::global_score(int layer, BlockId block, int slot, int head) const {
  if (!config_.global_score_enabled) throw GlobalDisabled();
  check_index(layer, block, slot, head);
  return global_[f_offset(layer, block, slot, head)];
}

void PagedPool::set_global_score(int layer, BlockId block, int slot, int head, Scalar value) {
  if (!config_.global_score_enabled) throw GlobalDisabled();
  check_index(layer, block, slot, head);
  global_[f_offset(layer, block, slot, head)] = value;
}

void PagedPool::register_prefix(std::uint64_t chain_hash, BlockId block) {
  if (is_free(block)) throw std::logic_error("cannot register a free block");
  if (block_of_hash_.count(chain_hash) != 0) return;  // an identical block is already indexed
  unregister_prefix(block);
  block_of_hash_.emplace(chain_hash, block);
  hash_of_block_.emplace(block, chain_hash);
}

void PagedPool::unregister_prefix(BlockId block) {
  const auto it = hash_of_block_.find(block);
  if (it == hash_of_block_.end()) return;
  block_of_hash_.erase(it->second);
  hash_of_block_.erase(it);
}

PrefixMatch PagedPool::match_prefix(std::span<const std::uint64_t> block_hashes) {
  PrefixMatch match;
  for (std::uint64_t h : block_hashes) {
    const auto it = block_of_hash_.find(h);
    if (it == block_of_hash_.end()) break;
    match.blocks.push_back(it->second);
  }
  for (BlockId b : match.blocks) retain(b);
  match.tokens = match.blocks.size() * static_cast<std::size_t>(config_.block_size);
  return match;
}

std::size_t PagedPool::peek_prefix(std::span<const std::uint64_t> block_hashes) const {
  std::size_t n = 0;
  while (n < block_hashes.size() && block_of_hash_.count(block_hashes[n]) != 0) ++n;
  return n;
}

PagedPool::Dense PagedPool::gather_contiguous(const BlockTable& table, std::size_t length, int layer,
                                              int head) const {
  const auto b = static_cast<std::size_t>(config_.block_size);
  if (length > table.blocks.size() * b) throw std::out_of_range("length exceeds block table capacity");
  Dense out;
  out.keys.reserve(length * config_.head_dim);
  out.values.reserve(length * config_.head_dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    const BlockId block = table.blocks[pos / b];
    const int slot = static_cast<int>(pos % b);
    const auto k = key(layer, block, slot, head);
    const auto v = value(layer, block, slot, head);
    out.keys.insert(out.keys.end(), k.begin(), k.end());
    out.values.insert(out.values.end(), v.begin(), v.end());
  }
  return out;
}

bool PagedPool::check_conservation() const {
  std::size_t owned = 0;
  for (BlockId b = 0; b < config_.total_blocks; ++b) {
    const int rc = ref_count(b);
    const bool listed = free_list_.count(b) != 0;
    if (rc < 0 || (rc == 0) != listed) return false;
    if (rc > 0) ++owned;
  }
  return owned + free_list_.size() == static_cast<std::size_t>(config_.total_blocks);
}

// ---------------------------------------------------------------------------
// QuerySlotCache

QuerySlotCache::QuerySlotCache(const PoolConfig& config) : config_(config) {
  config_.validate();
  const auto slots = static_cast<std::size_t>(config_.max_concurrency);
  queries_.assign(static_cast<std::size_t>(config_.num_layers) * slots * config_.window * config_.query_heads *
                      config_.head_dim,
                  Scalar{0});
  owners_.assign(slots, std::nullopt);
  cursor_.assign(slots * config_.num_layers, 0);
  fill_.assign(slots * config_.num_layers, 0);
  for (SlotId s = 0; s < config_.max_concurrency; ++s) free_.insert(free_.end(), s);
}

std::optional<SlotId> QuerySlotCache::acquire(RequestId owner) {
  if (free_.empty()) return std::nullopt;
  const SlotId slot = *free_.begin();
  free_.erase(free_.begin());
  owners_[static_cast<std::size_t>(slot)] = owner;
  for (int layer = 0; layer < config_.num_layers; ++layer) {
    cursor_[ring(slot, layer)] = 0;
    fill_[ring(slot, layer)] = 0;
  }
  return slot;
}

void QuerySlotCache::release(SlotId slot) {
  check_bound(slot);
  owners_[static_cast<std::size_t>(slot)] = std::nullopt;
  free_.insert(slot);
}

std::optional<RequestId> QuerySlotCache::owner(SlotId slot) const {
  if (slot < 0 || slot >= config_.max_concurrency) throw std::out_of_range("slot id out of range");
  return owners_[static_cast<std::size_t>(slot)];
}

void QuerySlotCache::check_bound(SlotId slot) const {
  if (!owner(slot)) throw UnboundSlot(slot);
}

std::size_t QuerySlotCache::ring(SlotId slot, int layer) const {
  return static_cast<std::size_t>(slot) * config_.num_layers + static_cast<std::size_t>(layer);
}

std::size_t QuerySlotCache::offset(SlotId slot, int layer, int pos, int head) const {
  return (((static_cast<std::size_t>(layer) * config_.max_concurrency + static_cast<std::size_t>(slot)) *
               config_.window +
           static_cast<std::size_t>(pos)) *
              config_.query_heads +
          static_cast<std::size_t>(head)) *
         config_.head_dim;
}

void QuerySlotCache::push(SlotId slot, int layer, std::span<const Scalar> queries) {
  check_bound(slot);
  if (layer < 0 || layer >= config_.num_layers) throw std::out_of_range("layer out of range");
  const std::size_t per_token = static_cast<std::size_t>(config_.query_heads) * config_.head_dim;
  if (queries.size() != per_token) throw std::invalid_argument("query length must be query_heads * head_dim");
  const std::size_t r = ring(slot, layer);
  std::copy(queries.begin(), queries.end(),
            queries_.begin() + static_cast<std::ptrdiff_t>(offset(slot, layer, cursor_[r], 0)));
  cursor_[r] = (cursor_[r] + 1) % config_.window;
  fill_[r] = std::min(fill_[r] + 1, config_.window);
}

int QuerySlotCache::fill(SlotId slot, int layer) const {
  check_bound(slot);
  return fill_[ring(slot, layer)];
}

std::vector<Scalar> QuerySlotCache::window(SlotId slot, int layer, int query_head) const {
  check_bound(slot);
  const std::size_t r = ring(slot, layer);
  const int n = fill_[r];
  // Oldest entry sits at the cursor once the ring has wrapped, otherwise at 0.
  const int start = n == config_.window ? cursor_[r] : 0;
  std::vector<Scalar> out;
  out.reserve(static_cast<std::size_t>(n) * config_.head_dim);
  for (int i = 0; i < n; ++i) {
    const int pos = (start + i) % config_.window;
    const Scalar* q = queries_.data() + offset(slot, layer, pos, query_head);
    out.insert(out.end(), q, q + config_.head_dim);
  }
  return out;
}

PoolState init_pool(const PoolConfig& config) { return PoolState{PagedPool(config), QuerySlotCache(config)}; }

}  // namespace cpa
