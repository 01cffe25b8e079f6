// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <string_view>
#include <vector>

#include "cpa/compressor.hpp"
#include "cpa/errors.hpp"
#include "cpa/paged_store.hpp"
#include "cpa/scheduler.hpp"
#include "cpa/synthetic_model.hpp"
#include "cpa/workload.hpp"

namespace cpa {

enum class ClockMode { simulated, wallclock };

ClockMode parse_clock_mode(std::string_view name);
std::string_view to_string(ClockMode mode);

/// Simulated time per step. Decode costs c0 + c1 * batch, a batch of compressions
/// costs c2, and a batch of prefills costs prefill_base + prefill_per_token * written.
struct CostModel {
  double c0 = 1.0;
  double c1 = 0.05;
  double c2 = 4.0;
  double prefill_base = 0.5;
  double prefill_per_token = 0.002;

  void validate() const;
  double decode(std::size_t batch) const { return c0 + c1 * static_cast<double>(batch); }
};

struct EngineConfig {
  PoolConfig pool;  ///< total_blocks and max_concurrency come from the capacity plan
  CompressionConfig compression;
  bool compression_enabled = true;
  SchedulerConfig scheduler;
  ClockMode clock = ClockMode::simulated;
  bool async = true;
  bool decode_forward = true;  ///< run paged attention for every decoded token
  bool data_plane = true;      ///< false: block/slot bookkeeping only, no tensors
  bool check_invariants = false;
  std::uint64_t seed = 0;
  std::int64_t max_steps = 10'000'000;
  CostModel cost;
  int histogram_bucket = 10;

  /// Copies shared dimensions (n_max, b, w, M) into the sub-configs and validates.
  void finalize();
};

struct RequestMetrics {
  RequestId id = 0;
  std::int64_t arrival_step = 0;
  std::size_t prompt_len = 0;
  std::int64_t output_len = 0;
  std::int64_t generated = 0;
  double first_token_time = 0.0;
  double last_token_time = 0.0;
  double tpot = 0.0;  ///< (last - first) / generated
  std::int64_t finish_step = -1;
  std::int64_t preemptions = 0;
  std::int64_t compressions = 0;
  std::uint64_t kv_digest = 0;  ///< hash of the retained K/V just before release
};

struct StageTimes {
  double prefill = 0.0;
  double decode = 0.0;
  double compression = 0.0;
  double total() const { return prefill + decode + compression; }
};

struct EngineMetrics {
  std::int64_t total_steps = 0;
  double total_time = 0.0;
  std::int64_t tokens_generated = 0;
  double tps = 0.0;
  double mean_tpot = 0.0;
  StageTimes stage_time;
  std::int64_t compressions = 0;
  std::int64_t preemptions = 0;
  std::int64_t prefill_token_writes = 0;
  std::int64_t prefix_hit_tokens = 0;
  std::int64_t entries_moved = 0;
  std::size_t max_running = 0;
  std::size_t max_slotted = 0;
  bool truncated = false;  ///< max_steps reached before every request finished
  int histogram_bucket = 10;
  std::vector<std::int64_t> concurrency_histogram;  ///< steps per running-count bucket

  // One entry per step.
  std::vector<std::int64_t> running;
  std::vector<std::int64_t> waiting;
  std::vector<double> utilization;
  std::vector<double> throughput;  ///< tokens decoded / step duration
  std::vector<std::int64_t> compression_launches;

  std::vector<RequestMetrics> requests;

  double stage_share(double stage) const {
    const double t = stage_time.total();
    return t > 0.0 ? stage / t : 0.0;
  }
};

/// What one step did, handed to the optional observer.
struct StepRecord {
  std::int64_t step = 0;
  double clock = 0.0;
  std::size_t admitted = 0;
  std::size_t decode_candidates = 0;
  std::size_t decoded = 0;
  std::size_t compressions_launched = 0;
  std::size_t compressions_completed = 0;
  std::size_t finished = 0;
  std::size_t running = 0;
  std::size_t runnable = 0;  ///< running, not blocked, not compressing at schedule time
  /// Schedulable requests that are still running, unblocked and idle after the step:
  /// they neither decoded nor started compressing. Must stay 0.
  std::size_t stranded = 0;
  std::size_t blocked = 0;
  std::size_t in_flight = 0;
};

/// Raised when no request can ever make progress again.
class Stalled : public Error {
 public:
  explicit Stalled(const std::string& what) : Error("engine stalled: " + what) {}
};

class Engine {
 public:
  explicit Engine(EngineConfig config);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  /// Runs the workload to completion (or max_steps).
  EngineMetrics run(const Workload& workload);

  /// Called after every step with the scheduler in its end-of-step state.
  void set_observer(std::function<void(const Engine&, const StepRecord&)> observer) {
    observer_ = std::move(observer);
  }

  const EngineConfig& config() const { return config_; }
  const PagedPool& pool() const { return state_.pool; }
  const QuerySlotCache& slots() const { return state_.slots; }
  const Scheduler& scheduler() const { return *scheduler_; }

  /// Checks every scheduler and pool invariant for the current state. Throws
  /// std::logic_error naming the first violation.
  void check_invariants(const StepRecord& record) const;

  /// Hash of the first `length` K/V entries of `table` over every layer and kv head.
  static std::uint64_t kv_digest(const PagedPool& pool, const BlockTable& table);

 private:
  struct Context {
    std::uint64_t ctx = 0;  ///< chain hash through the last stored token
    double first_token_time = -1.0;
    double last_token_time = 0.0;
  };
  struct InFlight {
    RequestId id = 0;
    double done_at = 0.0;
    std::future<CompressionReport> job;  ///< wallclock async only
    bool ready = false;
    CompressionReport report;
  };

  void prefill(Request& request);
  void decode_token(Request& request);
  void launch_compressions(const std::vector<RequestId>& ids, StepRecord& record, double& compress_time);
  std::size_t apply_completed(bool wait_one);
  void finish_request(Request& request);
  std::uint64_t token_at(const Request& request, std::size_t position) const;
  void push_queries(const Request& request, std::uint64_t ctx, std::size_t position);
  double now() const;
  void validate_workload(const Workload& workload) const;

  EngineConfig config_;
  PoolState state_;
  std::unique_ptr<Scheduler> scheduler_;
  SyntheticModel model_;
  std::vector<Context> contexts_;
  std::vector<InFlight> in_flight_;
  std::vector<RequestId> launched_ids_;  ///< compressions started in the current step
  std::vector<RequestMetrics> request_metrics_;
  std::function<void(const Engine&, const StepRecord&)> observer_;
  double clock_ = 0.0;
  std::int64_t step_ = 0;
  std::int64_t prefill_writes_ = 0;
  std::int64_t prefix_hits_ = 0;
  std::int64_t entries_moved_ = 0;
  std::int64_t compressions_ = 0;
  double prefill_written_this_step_ = 0.0;
  std::size_t prefills_this_step_ = 0;
  std::int64_t wall_start_ns_ = 0;
};

}  // namespace cpa
