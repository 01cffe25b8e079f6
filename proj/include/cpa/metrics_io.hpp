// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include "cpa/engine.hpp"

namespace cpa {

enum class MetricsFormat { json, csv };

MetricsFormat parse_metrics_format(std::string_view name);

/// Single JSON document: summary, stage shares, histogram, per-step series, requests.
std::string metrics_to_json(const EngineMetrics& metrics);

/// json: writes `path` as one file. csv: `path` is a directory that receives
/// summary.csv, one <series>.csv per time series (step,value), requests.csv and
/// concurrency_histogram.csv. Doubles use %.17g so both formats carry the same values.
void emit_metrics(const EngineMetrics& metrics, MetricsFormat format, const std::string& path);

}  // namespace cpa
