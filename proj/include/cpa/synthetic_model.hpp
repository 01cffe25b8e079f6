// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpa/types.hpp"

namespace cpa {

/// SplitMix64 finaliser; the building block of every counter-based stream here.
std::uint64_t mix64(std::uint64_t x);

/// Chained token hash: the context identity of a position given its predecessor's.
/// Identical token prefixes yield identical chains, which is what makes their K/V
/// (and prefix-cache block hashes) coincide.
std::uint64_t chain_hash(std::uint64_t previous, std::uint64_t token);
inline constexpr std::uint64_t kChainRoot = 0x243f6a8885a308d3ULL;

/// Deterministic stand-in for a transformer forward pass. Every (context, position,
/// layer, head) tuple maps to fixed unit-norm q/k/v vectors with no state shared
/// between tuples.
class SyntheticModel {
 public:
  SyntheticModel(std::uint64_t seed, int num_layers, int kv_heads, int query_heads, int head_dim);

  struct States {
    std::vector<Scalar> q;
    std::vector<Scalar> k;
    std::vector<Scalar> v;
  };

  /// q uses `head` as a query head; k and v use it as a kv head.
  States states(std::uint64_t context, std::uint64_t position, int layer, int head) const;

  void query(std::uint64_t context, std::uint64_t position, int layer, int query_head, std::span<Scalar> out) const;
  void key(std::uint64_t context, std::uint64_t position, int layer, int kv_head, std::span<Scalar> out) const;
  void value(std::uint64_t context, std::uint64_t position, int layer, int kv_head, std::span<Scalar> out) const;

  /// Token id a request emits at `position`. Generated tokens are a counter, not a sample.
  static std::uint64_t generated_token(std::uint64_t request_seed, std::uint64_t position);

  int head_dim() const { return head_dim_; }

 private:
  void fill(std::uint64_t stream, std::span<Scalar> out) const;
  std::uint64_t stream(std::uint64_t context, std::uint64_t position, int layer, int head, int kind) const;

  std::uint64_t seed_;
  int num_layers_;
  int kv_heads_;
  int query_heads_;
  int head_dim_;
};

}  // namespace cpa
