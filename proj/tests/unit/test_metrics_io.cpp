// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "cpa/metrics_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("cpa_metrics_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

cpa::EngineMetrics sample(std::size_t steps) {
  cpa::EngineMetrics m;
  m.total_steps = static_cast<std::int64_t>(steps);
  m.total_time = 1.0 / 3.0;
  m.tokens_generated = 77;
  m.tps = 0.1 + 0.2;
  m.stage_time = {0.125, 2.0 / 7.0, 1e-17};
  m.truncated = true;
  m.concurrency_histogram = {static_cast<std::int64_t>(steps)};
  for (std::size_t i = 0; i < steps; ++i) {
    m.running.push_back(static_cast<std::int64_t>(i % 7));
    m.waiting.push_back(static_cast<std::int64_t>(i % 3));
    m.utilization.push_back(static_cast<double>(i) / static_cast<double>(steps + 1));
    m.throughput.push_back(1.0 / (1.0 + static_cast<double>(i)));
    m.compression_launches.push_back(i % 11 == 0 ? 1 : 0);
  }
  cpa::RequestMetrics r;
  r.id = 0;
  r.prompt_len = 12;
  r.generated = 77;
  r.tpot = 0.7;
  r.kv_digest = 0xfedcba9876543210ULL;
  m.requests.push_back(r);
  return m;
}

}  // namespace

TEST_CASE("empty run") {
  const cpa::EngineMetrics m;
  const json doc = json::parse(cpa::metrics_to_json(m));
  CHECK(doc["summary"]["total_steps"] == 0);
  CHECK(doc["series"]["running"].empty());
  CHECK(doc["requests"].empty());
  CHECK(doc["summary"]["share_decode"] == 0.0);
  const auto dir = temp_dir("empty");
  cpa::emit_metrics(m, cpa::MetricsFormat::csv, dir.string());
  CHECK(read_csv(dir / "running.csv").size() == 1);  // header only
  CHECK(read_csv(dir / "requests.csv").size() == 1);
  fs::remove_all(dir);
}

TEST_CASE("series lengths follow the step count") {
  const auto m = sample(100);
  const json doc = json::parse(cpa::metrics_to_json(m));
  for (const char* s : {"running", "waiting", "utilization", "throughput", "compression_launches"}) {
    CHECK(doc["series"][s].size() == 100);
  }
  const auto dir = temp_dir("len");
  cpa::emit_metrics(m, cpa::MetricsFormat::csv, dir.string());
  for (const char* s : {"running", "waiting", "utilization", "throughput", "compression_launches"}) {
    const auto rows = read_csv(dir / (std::string(s) + ".csv"));
    REQUIRE(rows.size() == 101);
    CHECK(rows[0] == std::vector<std::string>{"step", s});
    CHECK(rows[100][0] == "99");
  }
  fs::remove_all(dir);
}

TEST_CASE("json and csv carry identical values") {
  const auto m = sample(40);
  const auto dir = temp_dir("same");
  const auto json_path = dir / "metrics.json";
  cpa::emit_metrics(m, cpa::MetricsFormat::json, json_path.string());
  cpa::emit_metrics(m, cpa::MetricsFormat::csv, (dir / "csv").string());
  std::ifstream in(json_path);
  const json doc = json::parse(in);

  for (const auto& row : read_csv(dir / "csv" / "summary.csv")) {
    if (row[0] == "key") continue;
    const json& v = doc["summary"].at(row[0]);
    if (v.is_boolean()) {
      CHECK(row[1] == (v.get<bool>() ? "1" : "0"));
    } else {
      CHECK(std::strtod(row[1].c_str(), nullptr) == v.get<double>());
    }
  }
  const auto util = read_csv(dir / "csv" / "utilization.csv");
  const auto tput = read_csv(dir / "csv" / "throughput.csv");
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(std::strtod(util[i + 1][1].c_str(), nullptr) == doc["series"]["utilization"][i].get<double>());
    CHECK(std::strtod(tput[i + 1][1].c_str(), nullptr) == doc["series"]["throughput"][i].get<double>());
    CHECK(std::strtod(tput[i + 1][1].c_str(), nullptr) == m.throughput[i]);
  }
  const auto reqs = read_csv(dir / "csv" / "requests.csv");
  REQUIRE(reqs.size() == 2);
  CHECK(reqs[1].back() == std::to_string(0xfedcba9876543210ULL));
  CHECK(doc["requests"][0]["kv_digest"].get<std::uint64_t>() == 0xfedcba9876543210ULL);
  const auto hist = read_csv(dir / "csv" / "concurrency_histogram.csv");
  CHECK(hist[1] == std::vector<std::string>{"0", "40"});
  fs::remove_all(dir);
}

TEST_CASE("format names") {
  CHECK(cpa::parse_metrics_format("json") == cpa::MetricsFormat::json);
  CHECK(cpa::parse_metrics_format("csv") == cpa::MetricsFormat::csv);
  CHECK_THROWS(cpa::parse_metrics_format("xml"));
}
