// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace cpa {

// Storage precision for K, V, Q and F. Score arithmetic is carried out in double.
#ifdef CPA_SCALAR_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using BlockId = std::int32_t;
using SlotId = std::int32_t;
using RequestId = std::int64_t;

inline constexpr BlockId kInvalidBlock = -1;
inline constexpr SlotId kNoSlot = -1;

}  // namespace cpa
