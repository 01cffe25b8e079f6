// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <stdexcept>
#include <string>

#include "cpa/attention.hpp"
#include "cpa/errors.hpp"

namespace cpa {

ClockMode parse_clock_mode(std::string_view name) {
  if (name == "simulated") return ClockMode::simulated;
  if (name == "wallclock") return ClockMode::wallclock;
  throw std::invalid_argument("unknown clock mode '" + std::string(name) + "'");
}

std::string_view to_string(ClockMode mode) {
  return mode == ClockMode::simulated ? "simulated" : "wallclock";
}

void CostModel::validate() const {
  if (c0 < 0 || c1 < 0 || c2 < 0 || prefill_base < 0 || prefill_per_token < 0) {
    throw std::invalid_argument("cost model constants must be non-negative");
  }
  if (c0 + c1 <= 0) throw std::invalid_argument("a decode step must cost more than zero");
}

void EngineConfig::finalize() {
  if (scheduler.mode == SchedulerMode::full_kv) compression_enabled = false;
  if (!compression_enabled && scheduler.mode != SchedulerMode::full_kv) {
    throw std::invalid_argument("constrained and hybrid scheduling need compression enabled");
  }
  pool.global_score_enabled = compression_enabled && data_plane && compression.score.use_global;
  if (!pool.global_score_enabled) compression.score.use_global = false;
  pool.validate();
  compression.validate();
  compression.score.validate();
  cost.validate();
  scheduler.n_max = compression.n_max;
  scheduler.block_size = pool.block_size;
  scheduler.window = pool.window;
  scheduler.max_concurrency = pool.max_concurrency;
  if (histogram_bucket < 1) throw std::invalid_argument("histogram bucket must be positive");
  if (max_steps < 1) throw std::invalid_argument("max_steps must be positive");
}

Engine::Engine(EngineConfig config)
    : config_([&] {
        config.finalize();
        return config;
      }()),
      state_(init_pool(config_.pool)),
      scheduler_(std::make_unique<Scheduler>(config_.scheduler, state_.pool, state_.slots)),
      model_(config_.seed, config_.pool.num_layers, config_.pool.kv_heads, config_.pool.query_heads,
             config_.pool.head_dim) {}

Engine::~Engine() {
  for (InFlight& f : in_flight_) {
    if (f.job.valid()) f.job.wait();
  }
}

double Engine::now() const {
  const auto t = std::chrono::steady_clock::now().time_since_epoch();
  const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(t).count();
  return static_cast<double>(ns - wall_start_ns_) * 1e-9;
}

std::uint64_t Engine::token_at(const Request& r, std::size_t position) const {
  if (position < r.prompt.size()) return r.prompt[position];
  return SyntheticModel::generated_token(r.seed, position);
}

void Engine::push_queries(const Request& r, std::uint64_t ctx, std::size_t position) {
  const PoolConfig& pc = config_.pool;
  const auto d = static_cast<std::size_t>(pc.head_dim);
  std::vector<Scalar> q(static_cast<std::size_t>(pc.query_heads) * d);
  for (int layer = 0; layer < pc.num_layers; ++layer) {
    for (int qh = 0; qh < pc.query_heads; ++qh) {
      model_.query(ctx, position, layer, qh, std::span<Scalar>(q.data() + qh * d, d));
    }
    state_.slots.push(r.slot, layer, q);
  }
}

void Engine::prefill(Request& r) {
  const std::size_t total = r.total_tokens();
  const std::size_t start = std::min(r.matched_tokens, total);
  prefill_writes_ += static_cast<std::int64_t>(total - start);
  prefix_hits_ += static_cast<std::int64_t>(start);
  prefill_written_this_step_ += static_cast<double>(total - start);
  ++prefills_this_step_;
  if (!config_.data_plane) return;

  const PoolConfig& pc = config_.pool;
  const auto b = static_cast<std::size_t>(pc.block_size);
  const auto d = static_cast<std::size_t>(pc.head_dim);
  const std::size_t window_start = total > static_cast<std::size_t>(pc.window) ? total - pc.window : 0;
  std::vector<Scalar> k(d);
  std::vector<Scalar> v(d);
  std::uint64_t ctx = kChainRoot;
  for (std::size_t p = 0; p < total; ++p) {
    ctx = chain_hash(ctx, token_at(r, p));
    if (p >= start) {
      const BlockId block = r.table.blocks[p / b];
      const int slot = static_cast<int>(p % b);
      for (int layer = 0; layer < pc.num_layers; ++layer) {
        for (int h = 0; h < pc.kv_heads; ++h) {
          model_.key(ctx, p, layer, h, k);
          model_.value(ctx, p, layer, h, v);
          state_.pool.write_kv(layer, block, slot, h, k, v);
        }
      }
    }
    if (r.has_slot() && p >= window_start) push_queries(r, ctx, p);
  }
  contexts_[static_cast<std::size_t>(r.id)].ctx = ctx;
}

void Engine::decode_token(Request& r) {
  if (r.compressing) throw std::logic_error("request " + std::to_string(r.id) + " decoded while compressing");
  const std::size_t position = r.total_tokens();
  Context& c = contexts_[static_cast<std::size_t>(r.id)];
  if (config_.data_plane) {
    const PoolConfig& pc = config_.pool;
    const auto b = static_cast<std::size_t>(pc.block_size);
    const auto d = static_cast<std::size_t>(pc.head_dim);
    c.ctx = chain_hash(c.ctx, token_at(r, position));
    const std::size_t store = r.table.length;
    const BlockId block = r.table.blocks[store / b];
    const int slot = static_cast<int>(store % b);
    std::vector<Scalar> k(d);
    std::vector<Scalar> v(d);
    for (int layer = 0; layer < pc.num_layers; ++layer) {
      for (int h = 0; h < pc.kv_heads; ++h) {
        model_.key(c.ctx, position, layer, h, k);
        model_.value(c.ctx, position, layer, h, v);
        state_.pool.write_kv(layer, block, slot, h, k, v);
      }
    }
    r.table.length = store + 1;
    if (config_.decode_forward) {
      std::vector<Scalar> q(d);
      for (int layer = 0; layer < pc.num_layers; ++layer) {
        for (int qh = 0; qh < pc.query_heads; ++qh) {
          model_.query(c.ctx, position, layer, qh, q);
          paged_attention_forward(state_.pool, q, r.table, r.table.length, layer, qh / pc.group_size());
        }
      }
    }
    if (r.has_slot()) push_queries(r, c.ctx, position);
  } else {
    ++r.table.length;
  }
  ++r.generated;
}

std::uint64_t Engine::kv_digest(const PagedPool& pool, const BlockTable& table) {
  const PoolConfig& pc = pool.config();
  const auto b = static_cast<std::size_t>(pc.block_size);
  std::uint64_t h = mix64(table.length);
  auto absorb = [&h](std::span<const Scalar> xs) {
    for (Scalar x : xs) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &x, sizeof(Scalar));
      h = mix64(h ^ bits);
    }
  };
  for (int layer = 0; layer < pc.num_layers; ++layer) {
    for (int head = 0; head < pc.kv_heads; ++head) {
      for (std::size_t p = 0; p < table.length; ++p) {
        absorb(pool.key(layer, table.blocks[p / b], static_cast<int>(p % b), head));
        absorb(pool.value(layer, table.blocks[p / b], static_cast<int>(p % b), head));
      }
    }
  }
  return h;
}

void Engine::finish_request(Request& r) {
  RequestMetrics& m = request_metrics_[static_cast<std::size_t>(r.id)];
  const Context& c = contexts_[static_cast<std::size_t>(r.id)];
  m.generated = r.generated;
  m.first_token_time = c.first_token_time;
  m.last_token_time = c.last_token_time;
  m.tpot = r.generated > 0 ? (c.last_token_time - c.first_token_time) / static_cast<double>(r.generated) : 0.0;
  m.finish_step = step_;
  m.preemptions = r.preemptions;
  m.compressions = r.compressions;
  if (config_.data_plane) m.kv_digest = kv_digest(state_.pool, r.table);
  scheduler_->finish(r);
}

void Engine::launch_compressions(const std::vector<RequestId>& ids, StepRecord& record, double& compress_time) {
  const double launch_at = clock_ + compress_time;
  std::size_t launched = 0;
  for (RequestId id : ids) {
    Request& r = scheduler_->request(id);
    if (!scheduler_->compression_due(r)) continue;  // preempted or blocked by an earlier launch
    if (!scheduler_->begin_compression(r)) continue;
    ++launched;
    launched_ids_.push_back(id);
    ++compressions_;
    const CompressionPlan& plan = *r.pending;
    if (!config_.async) {
      if (config_.data_plane) {
        const CompressionReport rep = execute_compression(state_.pool, state_.slots, r.slot, r.table, plan,
                                                          r.compressed, config_.compression);
        entries_moved_ += static_cast<std::int64_t>(rep.entries_moved);
      }
      finalize_compression(state_.pool, r.table, plan, config_.compression);
      scheduler_->end_compression(r);
      continue;
    }
    InFlight f;
    f.id = id;
    f.done_at = launch_at + config_.cost.c2;
    if (config_.data_plane) {
      if (config_.clock == ClockMode::wallclock) {
        // The job sees only this request's blocks; the driver keeps it out of every batch.
        f.job = std::async(std::launch::async,
                           [this, slot = r.slot, table = r.table, plan, compressed = r.compressed] {
                             return execute_compression(state_.pool, state_.slots, slot, table, plan, compressed,
                                                        config_.compression);
                           });
      } else {
        // Nothing else reads or writes these blocks while the request is in flight, so
        // running the work now is indistinguishable from running it later.
        f.report = execute_compression(state_.pool, state_.slots, r.slot, r.table, plan, r.compressed,
                                       config_.compression);
        f.ready = true;
      }
    } else {
      f.ready = true;
    }
    in_flight_.push_back(std::move(f));
  }
  record.compressions_launched = launched;
  if (launched > 0 && !config_.async) compress_time += config_.cost.c2;
}

std::size_t Engine::apply_completed(bool wait_one) {
  std::size_t done = 0;
  bool waited = false;
  std::vector<InFlight> keep;
  for (InFlight& f : in_flight_) {
    bool complete = false;
    if (config_.clock == ClockMode::simulated) {
      complete = f.done_at <= clock_ + 1e-12;
    } else if (!config_.data_plane) {
      complete = true;
    } else {
      if (wait_one && !waited) {
        f.job.wait();
        waited = true;
      }
      complete = f.job.wait_for(std::chrono::seconds(0)) == std::future_status::ready;
      if (complete) {
        f.report = f.job.get();
        f.ready = true;
      }
    }
    if (!complete) {
      keep.push_back(std::move(f));
      continue;
    }
    Request& r = scheduler_->request(f.id);
    entries_moved_ += static_cast<std::int64_t>(f.report.entries_moved);
    finalize_compression(state_.pool, r.table, *r.pending, config_.compression);
    scheduler_->end_compression(r);
    ++done;
  }
  in_flight_ = std::move(keep);
  return done;
}

void Engine::validate_workload(const Workload& workload) const {
  const auto b = static_cast<std::size_t>(config_.pool.block_size);
  const auto blocks = static_cast<std::size_t>(config_.pool.total_blocks);
  for (std::size_t i = 0; i < workload.requests.size(); ++i) {
    const RequestSpec& r = workload.requests[i];
    if (r.prompt.empty() || r.output_len < 1) {
      throw std::invalid_argument("request " + std::to_string(i) + " needs a prompt and a positive output_len");
    }
    std::size_t tokens = r.prompt.size();
    if (!config_.compression_enabled) tokens += static_cast<std::size_t>(r.output_len);
    // A request can be admitted at any point up to its last token after a preemption.
    else tokens += static_cast<std::size_t>(r.output_len) - 1;
    const std::size_t need = (tokens + b - 1) / b;
    if (config_.compression_enabled) {
      const std::size_t prompt_need = (r.prompt.size() + b - 1) / b;
      if (prompt_need > blocks) {
        throw std::invalid_argument("request " + std::to_string(i) + " prompt needs " + std::to_string(prompt_need) +
                                    " blocks but the pool has " + std::to_string(blocks));
      }
    } else if (need > blocks) {
      throw std::invalid_argument("request " + std::to_string(i) + " needs " + std::to_string(need) +
                                  " blocks without compression but the pool has " + std::to_string(blocks));
    }
  }
}

void Engine::check_invariants(const StepRecord& record) const {
  auto fail = [&](const std::string& what) {
    throw std::logic_error("invariant violated at step " + std::to_string(record.step) + ": " + what);
  };
  const Scheduler& s = *scheduler_;
  const SchedulerConfig& sc = s.config();
  if (!s.check_block_accounting()) fail("block conservation or reference counts");
  if (s.slotted_count() > static_cast<std::size_t>(sc.max_concurrency)) fail("more slotted requests than slots");
  if (sc.mode != SchedulerMode::full_kv &&
      s.slotted_count() + state_.slots.num_free() != static_cast<std::size_t>(state_.slots.num_slots())) {
    fail("query slots leaked");
  }
  for (RequestId id : s.running()) {
    const Request& r = s.request(id);
    if (r.has_slot() && state_.slots.owner(r.slot) != r.id) fail("slot owner mismatch");
  }
  if (sc.mode == SchedulerMode::hybrid) {
    // Free slots are handed to slotless requests straight away.
    for (RequestId id : s.running()) {
      if (!s.request(id).has_slot() && state_.slots.num_free() > 0) fail("free slot left while a request lacks one");
    }
  }
  if (s.stats().preempted_compressed != 0) fail("a compressed request was preempted");
  if (sc.mode == SchedulerMode::constrained && !sc.prefix_sharing && s.stats().preemptions != 0) {
    fail("constrained scheduling preempted a request");
  }
  if (sc.mode == SchedulerMode::constrained && s.running().size() > static_cast<std::size_t>(sc.max_concurrency)) {
    fail("constrained scheduling runs more than M requests");
  }
  for (RequestId id : s.running()) {
    const Request& r = s.request(id);
    if (r.state == RequestState::RunningWithSlot && !r.has_slot()) fail("RunningWithSlot without a slot");
    if (r.state == RequestState::RunningNoSlot && r.has_slot()) fail("RunningNoSlot holding a slot");
    if (r.compressing && !r.pending) fail("compressing request without a plan");
    if (r.table.length > r.table.num_blocks() * static_cast<std::size_t>(sc.block_size)) fail("table overflow");
  }
  if (record.stranded > 0) fail(std::to_string(record.stranded) + " runnable requests left out of the step");
}

EngineMetrics Engine::run(const Workload& workload) {
  validate_workload(workload);
  if (step_ != 0 || !scheduler_->requests().empty()) throw std::logic_error("an engine runs one workload");
  for (const RequestSpec& spec : workload.requests) {
    Request r;
    r.arrival_step = spec.arrival_step;
    r.prompt = spec.prompt;
    r.output_len = spec.output_len;
    r.seed = spec.seed;
    scheduler_->submit(std::move(r));
  }
  contexts_.assign(workload.requests.size(), Context{});
  request_metrics_.assign(workload.requests.size(), RequestMetrics{});
  for (const Request& r : scheduler_->requests()) {
    RequestMetrics& m = request_metrics_[static_cast<std::size_t>(r.id)];
    m.id = r.id;
    m.arrival_step = r.arrival_step;
    m.prompt_len = r.prompt.size();
    m.output_len = r.output_len;
  }

  EngineMetrics metrics;
  metrics.histogram_bucket = config_.histogram_bucket;
  const bool wall = config_.clock == ClockMode::wallclock;
  wall_start_ns_ = std::chrono::duration_cast<std::chrono::nanoseconds>(
                       std::chrono::steady_clock::now().time_since_epoch())
                       .count();
  const auto total_blocks = static_cast<double>(config_.pool.total_blocks);
  std::vector<RequestId> decoded_ids;

  while (!scheduler_->all_finished()) {
    if (step_ >= config_.max_steps) {
      metrics.truncated = true;
      break;
    }
    StepRecord rec;
    rec.step = step_;
    if (wall) clock_ = now();
    const double step_start = clock_;
    const std::int64_t preemptions_before = scheduler_->stats().preemptions;

    scheduler_->release_arrivals(step_);
    rec.compressions_completed = apply_completed(false);

    prefill_written_this_step_ = 0.0;
    prefills_this_step_ = 0;
    rec.admitted = scheduler_->admit([this](Request& r) { prefill(r); }).size();
    double prefill_time = 0.0;
    if (prefills_this_step_ > 0) {
      prefill_time = wall ? now() - step_start
                          : config_.cost.prefill_base + config_.cost.prefill_per_token * prefill_written_this_step_;
    }

    const ScheduleDecision decision = scheduler_->step_schedule();
    rec.decode_candidates = decision.decode.size();
    rec.runnable = decision.decode.size() + decision.compress.size();
    decoded_ids.clear();
    const double decode_start = wall ? now() : 0.0;
    for (RequestId id : decision.decode) {
      Request& r = scheduler_->request(id);
      if (!r.running() || r.compressing) continue;  // preempted by an earlier allocation this step
      if (!scheduler_->ensure_block(r)) continue;
      decode_token(r);
      decoded_ids.push_back(id);
    }
    rec.decoded = decoded_ids.size();
    double decode_time = 0.0;
    if (!decoded_ids.empty()) decode_time = wall ? now() - decode_start : config_.cost.decode(decoded_ids.size());
    const double token_time = step_start + prefill_time + decode_time;
    for (RequestId id : decoded_ids) {
      Request& r = scheduler_->request(id);
      Context& c = contexts_[static_cast<std::size_t>(id)];
      if (c.first_token_time < 0.0) c.first_token_time = token_time;
      c.last_token_time = token_time;
      if (r.generated >= r.output_len) {
        finish_request(r);
        ++rec.finished;
      }
    }

    clock_ = token_time;
    double compress_time = 0.0;
    const double compress_start = wall ? now() : 0.0;
    launched_ids_.clear();
    launch_compressions(scheduler_->compression_candidates(), rec, compress_time);
    for (const auto* ids : {&decision.decode, &decision.compress}) {
      for (RequestId id : *ids) {
        const Request& r = scheduler_->request(id);
        if (r.running() && r.state != RequestState::Blocked && !r.compressing &&
            std::find(decoded_ids.begin(), decoded_ids.end(), id) == decoded_ids.end() &&
            std::find(launched_ids_.begin(), launched_ids_.end(), id) == launched_ids_.end()) {
          ++rec.stranded;
        }
      }
    }
    if (wall && !config_.async && rec.compressions_launched > 0) compress_time = now() - compress_start;
    clock_ = token_time + compress_time;
    if (rec.compressions_launched > 0) {
      metrics.stage_time.compression += config_.async && !wall ? config_.cost.c2 : compress_time;
    }
    metrics.stage_time.prefill += prefill_time;
    metrics.stage_time.decode += decode_time;

    double duration = prefill_time + decode_time + compress_time;
    const bool preempted = scheduler_->stats().preemptions != preemptions_before;
    if (duration <= 0.0) {
      if (!in_flight_.empty()) {
        if (wall) {
          rec.compressions_completed += apply_completed(true);
        } else {
          double next = in_flight_.front().done_at;
          for (const InFlight& f : in_flight_) next = std::min(next, f.done_at);
          clock_ = std::max(clock_, next);
        }
      } else if (scheduler_->pending_arrivals() > 0 || !scheduler_->waiting().empty() || preempted ||
                 rec.compressions_completed > 0 || rec.finished > 0) {
        if (!wall) clock_ += config_.cost.c0;
      }
      if (in_flight_.empty() && rec.admitted == 0 && rec.compressions_completed == 0 && rec.finished == 0 &&
          !preempted && scheduler_->pending_arrivals() == 0 && !scheduler_->all_finished()) {
        throw Stalled(std::to_string(scheduler_->running().size()) + " running, " +
                      std::to_string(scheduler_->waiting().size()) + " waiting, " +
                      std::to_string(state_.pool.num_free()) + " free blocks at step " + std::to_string(step_));
      }
    }
    if (wall) clock_ = now();
    duration = clock_ - step_start;

    rec.running = scheduler_->running().size();
    rec.in_flight = in_flight_.size();
    std::size_t slotted = 0;
    for (RequestId id : scheduler_->running()) {
      const Request& r = scheduler_->request(id);
      if (r.state == RequestState::Blocked) ++rec.blocked;
      if (r.has_slot()) ++slotted;
    }
    rec.clock = clock_;
    metrics.running.push_back(static_cast<std::int64_t>(rec.running));
    metrics.waiting.push_back(static_cast<std::int64_t>(scheduler_->waiting().size()));
    metrics.utilization.push_back(static_cast<double>(state_.pool.num_owned()) / total_blocks);
    metrics.throughput.push_back(duration > 0.0 ? static_cast<double>(rec.decoded) / duration : 0.0);
    metrics.compression_launches.push_back(static_cast<std::int64_t>(rec.compressions_launched));
    metrics.tokens_generated += static_cast<std::int64_t>(rec.decoded);
    metrics.max_running = std::max(metrics.max_running, rec.running);
    metrics.max_slotted = std::max(metrics.max_slotted, slotted);
    const auto bucket = rec.running / static_cast<std::size_t>(config_.histogram_bucket);
    if (metrics.concurrency_histogram.size() <= bucket) metrics.concurrency_histogram.resize(bucket + 1, 0);
    ++metrics.concurrency_histogram[bucket];

    if (config_.check_invariants) check_invariants(rec);
    if (observer_) observer_(*this, rec);
    ++step_;
  }

  for (InFlight& f : in_flight_) {
    if (f.job.valid()) f.job.wait();
  }
  metrics.total_steps = step_;
  metrics.total_time = clock_;
  metrics.tps = clock_ > 0.0 ? static_cast<double>(metrics.tokens_generated) / clock_ : 0.0;
  metrics.compressions = compressions_;
  metrics.preemptions = scheduler_->stats().preemptions;
  metrics.prefill_token_writes = prefill_writes_;
  metrics.prefix_hit_tokens = prefix_hits_;
  metrics.entries_moved = entries_moved_;
  double tpot_sum = 0.0;
  std::size_t finished = 0;
  for (const RequestMetrics& m : request_metrics_) {
    if (m.finish_step < 0) continue;
    tpot_sum += m.tpot;
    ++finished;
  }
  metrics.mean_tpot = finished > 0 ? tpot_sum / static_cast<double>(finished) : 0.0;
  metrics.requests = request_metrics_;
  return metrics;
}

}  // namespace cpa
