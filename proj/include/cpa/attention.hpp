// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "cpa/paged_store.hpp"

namespace cpa {

/// softmax(q K^T / sqrt(d)) V over the first `length` logical entries of `table` for one
/// (layer, kv head), reading K/V straight out of the paged pool. Single pass with an
/// online max so no dense copy is made.
std::vector<double> paged_attention_forward(const PagedPool& pool, std::span<const Scalar> query,
                                            const BlockTable& table, std::size_t length, int layer, int kv_head);

}  // namespace cpa
