// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/scheduler.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "cpa/errors.hpp"
#include "cpa/synthetic_model.hpp"

namespace cpa {

SchedulerMode parse_scheduler_mode(std::string_view name) {
  if (name == "constrained") return SchedulerMode::constrained;
  if (name == "hybrid") return SchedulerMode::hybrid;
  if (name == "full_kv" || name == "full-kv") return SchedulerMode::full_kv;
  throw std::invalid_argument("unknown scheduler mode '" + std::string(name) + "'");
}

std::string_view to_string(SchedulerMode mode) {
  switch (mode) {
    case SchedulerMode::constrained: return "constrained";
    case SchedulerMode::hybrid: return "hybrid";
    case SchedulerMode::full_kv: return "full_kv";
  }
  return "?";
}

std::string_view to_string(RequestState state) {
  switch (state) {
    case RequestState::Waiting: return "waiting";
    case RequestState::RunningWithSlot: return "running_with_slot";
    case RequestState::RunningNoSlot: return "running_no_slot";
    case RequestState::Blocked: return "blocked";
    case RequestState::Finished: return "finished";
  }
  return "?";
}

namespace {

std::size_t blocks_for(std::size_t tokens, int block_size) {
  const auto b = static_cast<std::size_t>(block_size);
  return (tokens + b - 1) / b;
}

}  // namespace

Scheduler::Scheduler(const SchedulerConfig& config, PagedPool& pool, QuerySlotCache& slots)
    : config_(config), pool_(pool), slots_(slots) {
  if (config.max_concurrency < 1) throw std::invalid_argument("max_concurrency must be positive");
  if (config.n_max < 2) throw std::invalid_argument("n_max must be at least 2");
  if (config.window < 1 || config.window >= config.block_size) {
    throw std::invalid_argument("window must lie in [1, block_size)");
  }
}

void Scheduler::submit(Request request) {
  if (request.prompt.empty()) throw std::invalid_argument("request prompt must not be empty");
  if (request.output_len < 1) throw std::invalid_argument("request output_len must be positive");
  if (!arrivals_.empty() && request.arrival_step < requests_[static_cast<std::size_t>(arrivals_.back())].arrival_step) {
    throw std::invalid_argument("requests must be submitted in arrival order");
  }
  request.id = static_cast<RequestId>(requests_.size());
  request.state = RequestState::Waiting;
  arrivals_.push_back(request.id);
  requests_.push_back(std::move(request));
}

void Scheduler::release_arrivals(std::int64_t step) {
  while (next_arrival_ < arrivals_.size() && request(arrivals_[next_arrival_]).arrival_step <= step) {
    waiting_.push_back(arrivals_[next_arrival_]);
    ++next_arrival_;
  }
}

std::optional<std::int64_t> Scheduler::next_arrival_step() const {
  if (next_arrival_ >= arrivals_.size()) return std::nullopt;
  return request(arrivals_[next_arrival_]).arrival_step;
}

std::vector<std::uint64_t> Scheduler::prompt_block_hashes(const Request& r) const {
  const auto b = static_cast<std::size_t>(config_.block_size);
  std::vector<std::uint64_t> hashes;
  hashes.reserve(r.prompt.size() / b);
  std::uint64_t ctx = kChainRoot;
  for (std::size_t p = 0; p < r.prompt.size(); ++p) {
    ctx = chain_hash(ctx, r.prompt[p]);
    if ((p + 1) % b == 0) hashes.push_back(ctx);
  }
  return hashes;
}

bool Scheduler::slotless_eligible(std::size_t length, std::size_t blocks) const {
  if (blocks < static_cast<std::size_t>(config_.n_max)) return true;
  const std::size_t fill = length - (blocks - 1) * static_cast<std::size_t>(config_.block_size);
  return fill < static_cast<std::size_t>(config_.block_size - config_.window);
}

bool Scheduler::check_slotless_eligibility(const Request& r) const {
  return slotless_eligible(r.table.length, r.table.num_blocks());
}

std::size_t Scheduler::slotted_count() const {
  std::size_t n = 0;
  for (RequestId id : running_) n += request(id).has_slot() ? 1 : 0;
  return n;
}

void Scheduler::bind_slot(Request& r) {
  const auto slot = slots_.acquire(r.id);
  if (!slot) throw std::logic_error("no free query slot to bind");
  r.slot = *slot;
  if (r.state == RequestState::Blocked && r.blocked_on == BlockReason::NoBlock) return;
  r.state = RequestState::RunningWithSlot;
  r.blocked_on = BlockReason::None;
}

void Scheduler::release_slot(Request& r) {
  if (!r.has_slot()) return;
  slots_.release(r.slot);
  r.slot = kNoSlot;
}

void Scheduler::release_blocks(Request& r) {
  pool_.free_blocks(r.table.blocks);
  r.table = BlockTable{};
}

void Scheduler::remove_running(RequestId id) {
  running_.erase(std::remove(running_.begin(), running_.end(), id), running_.end());
}

std::vector<RequestId> Scheduler::admit(const std::function<void(Request&)>& on_admit) {
  std::vector<RequestId> admitted;
  assign_freed_slots();
  while (!waiting_.empty()) {
    Request& r = request(waiting_.front());
    const std::size_t total = r.total_tokens();
    const std::size_t blocks = blocks_for(total, config_.block_size);
    std::vector<std::uint64_t> hashes;
    std::size_t matched = 0;
    if (config_.prefix_sharing) {
      hashes = prompt_block_hashes(r);
      matched = pool_.peek_prefix(hashes);
    }
    if (blocks - matched > pool_.num_free()) break;

    bool with_slot = false;
    switch (config_.mode) {
      case SchedulerMode::constrained:
        if (slots_.num_free() == 0) return admitted;
        with_slot = true;
        break;
      case SchedulerMode::hybrid:
        with_slot = slots_.num_free() > 0;
        // A slotless admission must still be able to decode until a slot frees up.
        if (!with_slot && !slotless_eligible(total, blocks)) return admitted;
        break;
      case SchedulerMode::full_kv:
        break;
    }

    waiting_.pop_front();
    if (config_.prefix_sharing) {
      PrefixMatch m = pool_.match_prefix(std::span<const std::uint64_t>(hashes.data(), matched));
      r.table.blocks = std::move(m.blocks);
      r.matched_tokens = std::min(m.tokens, total);
    } else {
      r.matched_tokens = 0;
    }
    while (r.table.num_blocks() < blocks) pool_.allocate_block(r.table);
    r.table.length = total;
    r.admit_seq = admit_counter_++;
    r.state = RequestState::RunningNoSlot;
    r.blocked_on = BlockReason::None;
    running_.push_back(r.id);
    if (with_slot) bind_slot(r);
    if (!r.ever_prefilled) stats_.first_prefill_order.push_back(r.id);
    r.ever_prefilled = true;
    ++stats_.admissions;

    if (on_admit) on_admit(r);
    if (config_.prefix_sharing) {
      for (std::size_t i = 0; i < hashes.size() && i < r.table.num_blocks(); ++i) {
        if (!pool_.is_registered(r.table.blocks[i])) pool_.register_prefix(hashes[i], r.table.blocks[i]);
      }
    }
    admitted.push_back(r.id);
  }
  return admitted;
}

void Scheduler::assign_freed_slots() {
  if (config_.mode == SchedulerMode::full_kv) return;
  for (RequestId id : running_) {
    if (slots_.num_free() == 0) return;
    Request& r = request(id);
    if (r.has_slot()) continue;
    bind_slot(r);
  }
}

bool Scheduler::can_preempt(const Request& c) const {
  return c.running() && !c.compressed && !c.compressing;
}

std::optional<RequestId> Scheduler::preempt(const Request& requester) {
  (void)requester;
  std::optional<RequestId> victim;
  if (config_.mode == SchedulerMode::full_kv || config_.prefix_sharing) {
    // Newest uncompressed request, slotted or not, the requester included.
    for (auto it = running_.rbegin(); it != running_.rend(); ++it) {
      if (can_preempt(request(*it))) {
        victim = *it;
        break;
      }
    }
    if (!victim && config_.prefix_sharing) {
      throw NoPreemptable();
    }
  } else if (config_.mode == SchedulerMode::hybrid) {
    for (auto it = running_.rbegin(); it != running_.rend(); ++it) {
      const Request& c = request(*it);
      if (!c.has_slot() && can_preempt(c)) {
        victim = *it;
        break;
      }
    }
  }
  if (!victim) return std::nullopt;
  Request& v = request(*victim);
  if (v.compressed) ++stats_.preempted_compressed;
  offload(v);
  return victim;
}

void Scheduler::offload(Request& victim) {
  release_slot(victim);
  release_blocks(victim);
  remove_running(victim.id);
  victim.state = RequestState::Waiting;
  victim.blocked_on = BlockReason::None;
  ++victim.preemptions;
  ++stats_.preemptions;
  waiting_.push_front(victim.id);
  assign_freed_slots();
}

template <typename Alloc>
bool Scheduler::with_preemption(Request& requester, std::size_t needed, Alloc&& alloc) {
  while (true) {
    if (pool_.num_free() >= needed) {
      try {
        alloc();
        return true;
      } catch (const NoFreeBlocks&) {
      }
    }
    const auto victim = preempt(requester);
    if (!victim) {
      requester.state = RequestState::Blocked;
      requester.blocked_on = BlockReason::NoBlock;
      return false;
    }
    if (*victim == requester.id) return false;
  }
}

bool Scheduler::ensure_block(Request& r) {
  if (!r.table.last_block_full(config_.block_size)) {
    if (r.state == RequestState::Blocked && r.blocked_on == BlockReason::NoBlock) {
      r.state = r.has_slot() ? RequestState::RunningWithSlot : RequestState::RunningNoSlot;
      r.blocked_on = BlockReason::None;
    }
    return true;
  }
  const bool ok = with_preemption(r, 1, [&] { pool_.allocate_block(r.table); });
  if (ok) {
    r.state = r.has_slot() ? RequestState::RunningWithSlot : RequestState::RunningNoSlot;
    r.blocked_on = BlockReason::None;
  }
  return ok;
}

bool Scheduler::begin_compression(Request& r) {
  if (!r.has_slot()) throw std::logic_error("compression requires a bound query slot");
  const bool ok = with_preemption(r, 0, [&] { r.pending = plan_targets(pool_, r.table, config_.n_max); });
  if (!ok) return false;
  r.compressing = true;
  r.state = RequestState::RunningWithSlot;
  r.blocked_on = BlockReason::None;
  return true;
}

void Scheduler::end_compression(Request& r) {
  r.compressing = false;
  r.compressed = true;
  r.pending.reset();
  ++r.compressions;
}

bool Scheduler::compression_due(const Request& r) const {
  return config_.mode != SchedulerMode::full_kv && r.running() && r.has_slot() && !r.compressing &&
         cpa::compression_due(r.table, config_.n_max, config_.block_size);
}

std::vector<RequestId> Scheduler::compression_candidates() const {
  std::vector<RequestId> out;
  for (RequestId id : running_) {
    if (compression_due(request(id))) out.push_back(id);
  }
  return out;
}

ScheduleDecision Scheduler::step_schedule() {
  ScheduleDecision d;
  for (RequestId id : running_) {
    Request& r = request(id);
    if (r.compressing) continue;
    if (r.state == RequestState::Blocked && r.blocked_on == BlockReason::NoSlot) continue;
    if (config_.mode == SchedulerMode::hybrid && !r.has_slot() && !check_slotless_eligibility(r)) {
      r.state = RequestState::Blocked;
      r.blocked_on = BlockReason::NoSlot;
      continue;
    }
    if (compression_due(r)) {
      d.compress.push_back(id);
      continue;
    }
    d.decode.push_back(id);
  }
  return d;
}

void Scheduler::finish(Request& r) {
  release_slot(r);
  release_blocks(r);
  remove_running(r.id);
  r.state = RequestState::Finished;
  r.blocked_on = BlockReason::None;
  ++finished_;
  assign_freed_slots();
}

bool Scheduler::check_block_accounting() const {
  if (!pool_.check_conservation()) return false;
  std::unordered_map<BlockId, int> holders;
  for (RequestId id : running_) {
    const Request& r = request(id);
    for (BlockId b : r.table.blocks) ++holders[b];
    if (r.pending) {
      for (BlockId b : r.pending->fresh) ++holders[b];
    }
  }
  for (BlockId b = 0; b < pool_.config().total_blocks; ++b) {
    const auto it = holders.find(b);
    const int expected = it == holders.end() ? 0 : it->second;
    if (pool_.ref_count(b) != expected) return false;
  }
  return true;
}

}  // namespace cpa
