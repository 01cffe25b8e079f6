// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "cpa/compressor.hpp"
#include "cpa/paged_store.hpp"
#include "cpa/types.hpp"

namespace cpa {

enum class RequestState { Waiting, RunningWithSlot, RunningNoSlot, Blocked, Finished };
enum class BlockReason { None, NoSlot, NoBlock };

/// constrained: at most M running, all slotted, no preemption without prefix sharing.
/// hybrid: slotless requests fill spare blocks and are the first to be preempted.
/// full_kv: compression off; admit while blocks last, preempt the newest on exhaustion.
enum class SchedulerMode { constrained, hybrid, full_kv };

SchedulerMode parse_scheduler_mode(std::string_view name);
std::string_view to_string(SchedulerMode mode);
std::string_view to_string(RequestState state);

struct SchedulerConfig {
  SchedulerMode mode = SchedulerMode::constrained;
  bool prefix_sharing = false;
  int max_concurrency = 1;
  int n_max = 4;
  int block_size = 16;
  int window = 4;
};

struct Request {
  RequestId id = 0;
  std::int64_t arrival_step = 0;
  std::vector<std::uint64_t> prompt;
  std::int64_t output_len = 1;
  std::uint64_t seed = 0;

  std::int64_t generated = 0;
  BlockTable table;
  SlotId slot = kNoSlot;
  RequestState state = RequestState::Waiting;
  BlockReason blocked_on = BlockReason::None;
  bool compressed = false;
  bool compressing = false;
  std::optional<CompressionPlan> pending;  ///< set while a compression is in flight

  // Bookkeeping for the driver and metrics.
  std::uint64_t admit_seq = 0;       ///< position in running-queue order
  std::size_t matched_tokens = 0;    ///< prefix-cache hit of the latest admission
  std::int64_t preemptions = 0;
  std::int64_t compressions = 0;
  bool ever_prefilled = false;

  std::size_t total_tokens() const { return prompt.size() + static_cast<std::size_t>(generated); }
  bool running() const {
    return state == RequestState::RunningWithSlot || state == RequestState::RunningNoSlot ||
           state == RequestState::Blocked;
  }
  bool has_slot() const { return slot != kNoSlot; }
};

struct ScheduleDecision {
  std::vector<RequestId> prefill;
  std::vector<RequestId> decode;     ///< candidates in running-queue order
  std::vector<RequestId> compress;   ///< filled after decoding by compression_candidates()
};

/// Counters the invariant checks read.
struct SchedulerStats {
  std::int64_t preemptions = 0;
  std::int64_t preempted_compressed = 0;  ///< must stay 0
  std::int64_t admissions = 0;
  std::vector<RequestId> first_prefill_order;
};

/// Single owner of request lifecycle state. All methods run on the driver thread.
class Scheduler {
 public:
  Scheduler(const SchedulerConfig& config, PagedPool& pool, QuerySlotCache& slots);

  const SchedulerConfig& config() const { return config_; }

  /// Requests must be submitted in nondecreasing arrival order.
  void submit(Request request);

  /// Moves arrived requests (arrival_step <= step) into the waiting queue.
  void release_arrivals(std::int64_t step);

  /// FCFS admission from the waiting queue. `on_admit` runs right after a request's
  /// blocks (and slot) are bound, before its prefix blocks are published, so it can
  /// write the prompt K/V. Returns admitted ids in order.
  std::vector<RequestId> admit(const std::function<void(Request&)>& on_admit);

  /// Slotless decoding is allowed while the request holds fewer than n_max blocks or
  /// its last block holds fewer than b - w tokens.
  bool check_slotless_eligibility(const Request& request) const;
  bool slotless_eligible(std::size_t length, std::size_t blocks) const;

  /// Gives free slots to the foremost slotless running requests.
  void assign_freed_slots();

  /// Chooses and offloads a victim after `requester` failed to allocate. Returns the
  /// victim's id, or nullopt when the mode allows none (the requester then blocks).
  std::optional<RequestId> preempt(const Request& requester);

  /// Admission is done separately; this classifies running requests into decode
  /// candidates and slot-blocked ones.
  ScheduleDecision step_schedule();

  /// Ensures room for one more token, preempting per mode. False means the request is
  /// now Blocked on blocks or was itself preempted.
  bool ensure_block(Request& request);

  /// Plans compression targets into `request.pending`, preempting per mode when blocks
  /// run out. False means no plan was made: the request is Blocked on blocks or was
  /// itself preempted.
  bool begin_compression(Request& request);
  void end_compression(Request& request);

  /// Running, slotted, not compressing and at the trigger.
  std::vector<RequestId> compression_candidates() const;
  bool compression_due(const Request& request) const;

  /// Releases the slot (reassigning it) and then the blocks.
  void finish(Request& request);

  Request& request(RequestId id) { return requests_.at(static_cast<std::size_t>(id)); }
  const Request& request(RequestId id) const { return requests_.at(static_cast<std::size_t>(id)); }
  const std::vector<Request>& requests() const { return requests_; }
  const std::vector<RequestId>& running() const { return running_; }
  const std::deque<RequestId>& waiting() const { return waiting_; }
  std::size_t pending_arrivals() const { return arrivals_.size() - next_arrival_; }
  std::optional<std::int64_t> next_arrival_step() const;
  bool all_finished() const { return finished_ == requests_.size(); }
  std::size_t slotted_count() const;
  const SchedulerStats& stats() const { return stats_; }

  /// Block hashes of a request's full prompt blocks (prefix-cache keys).
  std::vector<std::uint64_t> prompt_block_hashes(const Request& request) const;

  /// Block conservation plus ref counts equal to table membership.
  bool check_block_accounting() const;

 private:
  void offload(Request& victim);
  void bind_slot(Request& request);
  void release_slot(Request& request);
  void release_blocks(Request& request);
  void remove_running(RequestId id);
  bool can_preempt(const Request& candidate) const;
  template <typename Alloc>
  bool with_preemption(Request& requester, std::size_t needed, Alloc&& alloc);

  SchedulerConfig config_;
  PagedPool& pool_;
  QuerySlotCache& slots_;
  std::vector<Request> requests_;
  std::vector<RequestId> arrivals_;
  std::size_t next_arrival_ = 0;
  std::deque<RequestId> waiting_;
  std::vector<RequestId> running_;
  std::uint64_t admit_counter_ = 0;
  std::size_t finished_ = 0;
  SchedulerStats stats_;
};

}  // namespace cpa
