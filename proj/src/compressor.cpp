// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/compressor.hpp"

#include <algorithm>
#include <cassert>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "cpa/errors.hpp"

namespace cpa {

std::size_t TopKTag::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

void CompressionConfig::validate() const {
  if (n_max < 2) throw std::invalid_argument("n_max must be at least 2");
  if (layer_stride < 1) throw std::invalid_argument("layer_stride must be at least 1");
  score.validate();
}

bool compression_due(const BlockTable& table, int n_max, int block_size) {
  return table.num_blocks() >= static_cast<std::size_t>(n_max) && table.last_block_full(block_size);
}

ScoreGrid pin_window(const ScoreGrid& scores, std::size_t window, std::size_t length) {
  if (length > scores.size() || window > length) throw std::invalid_argument("window exceeds sequence length");
  ScoreGrid out = scores;
  for (std::size_t i = length - window; i < length; ++i) out.values[i] = std::numeric_limits<double>::infinity();
  return out;
}

TopKTag topk_tag(const ScoreGrid& scores, std::size_t k, std::size_t length) {
  if (length > scores.size()) throw std::invalid_argument("length exceeds score grid");
  if (k > length) throw BudgetExceedsLength(k, length);
  std::vector<std::size_t> order(length);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& v = scores.values;
  const auto better = [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a > b); };
  if (k < length) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  TopKTag tag{scores.blocks, scores.block_size, std::vector<std::uint8_t>(scores.size(), 0)};
  for (std::size_t i = 0; i < k; ++i) tag.bits[order[i]] = 1;
  return tag;
}

std::size_t compact(PagedPool& pool, const BlockTable& table, const TopKTag& tag,
                    const std::vector<BlockId>& targets, int layer, int kv_head, const ScoreGrid* global) {
  const auto b = static_cast<std::size_t>(pool.config().block_size);
  const std::size_t d = static_cast<std::size_t>(pool.config().head_dim);
  const std::size_t capacity = targets.size() * b;
  std::vector<Scalar> k(d);
  std::vector<Scalar> v(d);

  std::size_t written = 0;
  for (std::size_t read = 0; read < table.length; ++read) {
    if (!tag.at(read)) continue;
    if (written == capacity) throw std::logic_error("top-k tag selects more entries than the targets hold");
    const BlockId src = table.blocks[read / b];
    const int src_slot = static_cast<int>(read % b);
    const BlockId dst = targets[written / b];
    const int dst_slot = static_cast<int>(written % b);
    assert(pool.ref_count(dst) == 1 && "compaction target must be exclusively owned");
    // A target that is also a table block is only ever written at or behind the read cursor.
    assert(dst != table.blocks[written / b] || written <= read);
    if (src != dst || src_slot != dst_slot) {
      const auto sk = pool.key(layer, src, src_slot, kv_head);
      const auto sv = pool.value(layer, src, src_slot, kv_head);
      std::copy(sk.begin(), sk.end(), k.begin());
      std::copy(sv.begin(), sv.end(), v.begin());
      std::copy(k.begin(), k.end(), pool.key_mut(layer, dst, dst_slot, kv_head).begin());
      std::copy(v.begin(), v.end(), pool.value_mut(layer, dst, dst_slot, kv_head).begin());
    }
    if (global != nullptr) {
      pool.set_global_score(layer, dst, dst_slot, kv_head, static_cast<Scalar>(global->values[read]));
    }
    ++written;
  }
  return written;
}

CompressionPlan plan_targets(PagedPool& pool, const BlockTable& table, int n_max) {
  const auto keep = static_cast<std::size_t>(n_max - 1);
  if (table.num_blocks() < static_cast<std::size_t>(n_max)) {
    throw std::invalid_argument("compression needs at least n_max blocks");
  }
  CompressionPlan plan;
  std::vector<bool> shared(table.num_blocks());
  for (std::size_t i = 0; i < table.num_blocks(); ++i) {
    shared[i] = pool.is_shared(table.blocks[i]);
    if (shared[i]) ++plan.shared_blocks;
  }
  // Shared blocks always form a prefix of the table: matching walks from the front,
  // so a later block never has more holders than an earlier one.
  for (std::size_t i = plan.shared_blocks; i < shared.size(); ++i) {
    if (shared[i]) throw std::logic_error("shared blocks do not form a prefix of the block table");
  }

  const std::size_t n_fresh_targets = std::min(plan.shared_blocks, keep);
  std::vector<bool> used(table.num_blocks(), false);
  for (std::size_t j = n_fresh_targets; j < keep; ++j) used[j] = true;
  std::size_t reserved_index = table.num_blocks();
  for (std::size_t i = keep; i < table.num_blocks(); ++i) {
    if (!shared[i]) {
      reserved_index = i;
      break;
    }
  }
  const bool reserved_fresh = reserved_index == table.num_blocks();
  const std::size_t needed = n_fresh_targets + (reserved_fresh ? 1 : 0);
  if (pool.num_free() < needed) throw NoFreeBlocks();

  for (std::size_t i = 0; i < needed; ++i) plan.fresh.push_back(pool.allocate());
  for (std::size_t j = 0; j < keep; ++j) {
    if (j < n_fresh_targets) {
      plan.targets.push_back(plan.fresh[j]);
    } else {
      plan.targets.push_back(table.blocks[j]);
      // Its content is about to change; it may no longer serve as a cached prefix.
      pool.unregister_prefix(table.blocks[j]);
      ++plan.reuse_count;
    }
  }
  if (reserved_fresh) {
    plan.reserved = plan.fresh.back();
    plan.reserved_fresh = true;
  } else {
    plan.reserved = table.blocks[reserved_index];
    used[reserved_index] = true;
    pool.unregister_prefix(plan.reserved);
  }
  for (std::size_t i = 0; i < table.num_blocks(); ++i) {
    if (!used[i]) plan.release.push_back(table.blocks[i]);
  }
  return plan;
}

CompressionReport execute_compression(PagedPool& pool, const QuerySlotCache& slots, SlotId slot,
                                      const BlockTable& table, const CompressionPlan& plan, bool is_compressed,
                                      const CompressionConfig& config) {
  const PoolConfig& pc = pool.config();
  const auto b = static_cast<std::size_t>(pc.block_size);
  const std::size_t k = static_cast<std::size_t>(config.n_max - 1) * b;
  const int stride = std::min(config.layer_stride, pc.num_layers);
  const bool relocate_global = config.score.use_global && pool.has_global_scores();

  CompressionReport report;
  report.entries_per_head = k;
  report.layer_chunks = static_cast<std::size_t>((pc.num_layers + stride - 1) / stride);
  report.peak_activation_estimate = static_cast<std::uint64_t>(stride) * pc.query_heads * table.num_blocks() * b *
                                    static_cast<std::uint64_t>(pc.window);

  struct Pending {
    TopKTag tag;
    ScoreGrid global;
  };
  std::vector<Pending> chunk;
  for (int first = 0; first < pc.num_layers; first += stride) {
    const int last = std::min(first + stride, pc.num_layers);
    // Score the whole chunk before moving anything, as a batched kernel would.
    chunk.clear();
    for (int layer = first; layer < last; ++layer) {
      for (int head = 0; head < pc.kv_heads; ++head) {
        ScoreResult scored = score(pool, slots, slot, table, layer, head, config.score, is_compressed);
        const ScoreGrid pinned = pin_window(scored.scores, static_cast<std::size_t>(pc.window), table.length);
        chunk.push_back({topk_tag(pinned, k, table.length), std::move(scored.global)});
      }
    }
    std::size_t idx = 0;
    for (int layer = first; layer < last; ++layer) {
      for (int head = 0; head < pc.kv_heads; ++head, ++idx) {
        const ScoreGrid* g = relocate_global ? &chunk[idx].global : nullptr;
        report.entries_moved += compact(pool, table, chunk[idx].tag, plan.targets, layer, head, g);
      }
    }
  }
  return report;
}

std::size_t finalize_compression(PagedPool& pool, BlockTable& table, const CompressionPlan& plan,
                                 const CompressionConfig& config) {
  pool.free_blocks(plan.release);
  table.blocks = plan.targets;
  table.blocks.push_back(plan.reserved);
  table.length = static_cast<std::size_t>(config.n_max - 1) * static_cast<std::size_t>(pool.config().block_size);
  return plan.release.size();
}

CompressionReport compress_request(PagedPool& pool, const QuerySlotCache& slots, SlotId slot, BlockTable& table,
                                   bool is_compressed, const CompressionConfig& config) {
  const CompressionPlan plan = plan_targets(pool, table, config.n_max);
  CompressionReport report;
  try {
    report = execute_compression(pool, slots, slot, table, plan, is_compressed, config);
  } catch (...) {
    pool.free_blocks(plan.fresh);
    throw;
  }
  report.blocks_released = finalize_compression(pool, table, plan, config);
  return report;
}

}  // namespace cpa
