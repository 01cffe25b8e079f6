// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cpa {

std::vector<double> paged_attention_forward(const PagedPool& pool, std::span<const Scalar> query,
                                            const BlockTable& table, std::size_t length, int layer, int kv_head) {
  const PoolConfig& cfg = pool.config();
  const auto d = static_cast<std::size_t>(cfg.head_dim);
  const auto b = static_cast<std::size_t>(cfg.block_size);
  if (length == 0) throw std::invalid_argument("attention over an empty sequence");
  if (query.size() != d) throw std::invalid_argument("query length must equal head_dim");
  if (length > table.num_blocks() * b) throw std::out_of_range("length exceeds block table capacity");

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  double running_max = -std::numeric_limits<double>::infinity();
  double denom = 0.0;
  std::vector<double> acc(d, 0.0);
  for (std::size_t pos = 0; pos < length; ++pos) {
    const BlockId block = table.blocks[pos / b];
    const int slot = static_cast<int>(pos % b);
    const auto k = pool.key(layer, block, slot, kv_head);
    double logit = 0.0;
    for (std::size_t i = 0; i < d; ++i) logit += static_cast<double>(query[i]) * static_cast<double>(k[i]);
    logit *= scale;
    if (logit > running_max) {
      const double rescale = std::exp(running_max - logit);
      denom *= rescale;
      for (double& a : acc) a *= rescale;
      running_max = logit;
    }
    const double w = std::exp(logit - running_max);
    denom += w;
    const auto v = pool.value(layer, block, slot, kv_head);
    for (std::size_t i = 0; i < d; ++i) acc[i] += w * static_cast<double>(v[i]);
  }
  for (double& a : acc) a /= denom;
  return acc;
}

}  // namespace cpa
