// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/metrics_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cpa {

using nlohmann::ordered_json;

MetricsFormat parse_metrics_format(std::string_view name) {
  if (name == "json") return MetricsFormat::json;
  if (name == "csv") return MetricsFormat::csv;
  throw std::invalid_argument("unknown metrics format '" + std::string(name) + "' (expected json or csv)");
}

namespace {

// Summary rows shared by both formats, in output order.
std::vector<std::pair<std::string, ordered_json>> summary_rows(const EngineMetrics& m) {
  return {
      {"total_steps", m.total_steps},
      {"total_time", m.total_time},
      {"tokens_generated", m.tokens_generated},
      {"tps", m.tps},
      {"mean_tpot", m.mean_tpot},
      {"compressions", m.compressions},
      {"preemptions", m.preemptions},
      {"prefill_token_writes", m.prefill_token_writes},
      {"prefix_hit_tokens", m.prefix_hit_tokens},
      {"entries_moved", m.entries_moved},
      {"max_running", m.max_running},
      {"max_slotted", m.max_slotted},
      {"truncated", m.truncated},
      {"time_prefill", m.stage_time.prefill},
      {"time_decode", m.stage_time.decode},
      {"time_compression", m.stage_time.compression},
      {"share_prefill", m.stage_share(m.stage_time.prefill)},
      {"share_decode", m.stage_share(m.stage_time.decode)},
      {"share_compression", m.stage_share(m.stage_time.compression)},
  };
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const ordered_json& v) {
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_number_float()) return fmt_double(v.get<double>());
  return v.dump();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

template <typename T>
void write_series(const std::filesystem::path& dir, const std::string& name, const std::vector<T>& values) {
  auto out = open_out(dir / (name + ".csv"));
  out << "step," << name << "\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      out << i << "," << fmt_double(values[i]) << "\n";
    } else {
      out << i << "," << values[i] << "\n";
    }
  }
}

}  // namespace

std::string metrics_to_json(const EngineMetrics& m) {
  ordered_json doc;
  ordered_json summary = ordered_json::object();
  for (auto& [k, v] : summary_rows(m)) summary[k] = v;
  doc["summary"] = std::move(summary);
  doc["concurrency_histogram"] = {{"bucket", m.histogram_bucket}, {"counts", m.concurrency_histogram}};
  doc["series"] = {{"running", m.running},
                   {"waiting", m.waiting},
                   {"utilization", m.utilization},
                   {"throughput", m.throughput},
                   {"compression_launches", m.compression_launches}};
  ordered_json reqs = ordered_json::array();
  for (const RequestMetrics& r : m.requests) {
    reqs.push_back({{"id", r.id},
                    {"arrival_step", r.arrival_step},
                    {"prompt_len", r.prompt_len},
                    {"output_len", r.output_len},
                    {"generated", r.generated},
                    {"first_token_time", r.first_token_time},
                    {"last_token_time", r.last_token_time},
                    {"tpot", r.tpot},
                    {"finish_step", r.finish_step},
                    {"preemptions", r.preemptions},
                    {"compressions", r.compressions},
                    {"kv_digest", r.kv_digest}});
  }
  doc["requests"] = std::move(reqs);
  return doc.dump(2) + "\n";
}

void emit_metrics(const EngineMetrics& m, MetricsFormat format, const std::string& path) {
  if (format == MetricsFormat::json) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    auto out = open_out(p);
    out << metrics_to_json(m);
    return;
  }
  const std::filesystem::path dir(path);
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "summary.csv");
    out << "key,value\n";
    for (const auto& [k, v] : summary_rows(m)) out << k << "," << fmt(v) << "\n";
  }
  write_series(dir, "running", m.running);
  write_series(dir, "waiting", m.waiting);
  write_series(dir, "utilization", m.utilization);
  write_series(dir, "throughput", m.throughput);
  write_series(dir, "compression_launches", m.compression_launches);
  {
    auto out = open_out(dir / "concurrency_histogram.csv");
    out << "bucket_start,steps\n";
    for (std::size_t i = 0; i < m.concurrency_histogram.size(); ++i) {
      out << i * static_cast<std::size_t>(m.histogram_bucket) << "," << m.concurrency_histogram[i] << "\n";
    }
  }
  auto out = open_out(dir / "requests.csv");
  out << "id,arrival_step,prompt_len,output_len,generated,first_token_time,last_token_time,tpot,finish_step,"
         "preemptions,compressions,kv_digest\n";
  for (const RequestMetrics& r : m.requests) {
    out << r.id << "," << r.arrival_step << "," << r.prompt_len << "," << r.output_len << "," << r.generated << ","
        << fmt_double(r.first_token_time) << "," << fmt_double(r.last_token_time) << "," << fmt_double(r.tpot) << ","
        << r.finish_step << "," << r.preemptions << "," << r.compressions << "," << r.kv_digest << "\n";
  }
}

}  // namespace cpa
