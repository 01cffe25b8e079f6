// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "cpa/oracle.hpp"

namespace cpa::oracle {

namespace {

double dot(const Scalar* a, const Scalar* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

std::vector<double> softmax(const std::vector<double>& x) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : x) hi = std::max(hi, v);
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::isinf(x[i]) && x[i] < 0 ? 0.0 : std::exp(x[i] - hi);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace

std::vector<double> dense_attention(std::span<const Scalar> query, std::span<const Scalar> keys,
                                    std::span<const Scalar> values, std::size_t length, int head_dim) {
  if (length == 0) throw std::invalid_argument("empty attention");
  std::vector<double> logits(length);
  for (std::size_t j = 0; j < length; ++j) {
    logits[j] = dot(query.data(), keys.data() + j * head_dim, head_dim) / std::sqrt(static_cast<double>(head_dim));
  }
  const std::vector<double> weights = softmax(logits);
  std::vector<double> out(static_cast<std::size_t>(head_dim), 0.0);
  for (std::size_t j = 0; j < length; ++j) {
    for (int i = 0; i < head_dim; ++i) out[i] += weights[j] * static_cast<double>(values[j * head_dim + i]);
  }
  return out;
}

std::vector<double> attention_scores(std::span<const Scalar> window_queries, int group, int window,
                                     std::span<const Scalar> keys, std::size_t length, int head_dim) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> result(length, 0.0);
  for (int u = 0; u < window; ++u) {
    const std::size_t own = length - static_cast<std::size_t>(window) + static_cast<std::size_t>(u);
    std::vector<double> best(length, 0.0);
    for (int g = 0; g < group; ++g) {
      const Scalar* q = window_queries.data() + (static_cast<std::size_t>(g) * window + u) * head_dim;
      std::vector<double> logits(length);
      for (std::size_t j = 0; j < length; ++j) {
        logits[j] = j <= own ? dot(q, keys.data() + j * head_dim, head_dim) * scale
                             : -std::numeric_limits<double>::infinity();
      }
      const std::vector<double> probs = softmax(logits);
      for (std::size_t j = 0; j < length; ++j) best[j] = g == 0 ? probs[j] : std::max(best[j], probs[j]);
    }
    for (std::size_t j = 0; j < length; ++j) result[j] += best[j] / window;
  }
  return result;
}

std::vector<double> redundancy(std::span<const Scalar> keys, std::size_t length, int head_dim, double p, double tau,
                               int block_size) {
  std::vector<double> norm(length);
  for (std::size_t i = 0; i < length; ++i) {
    norm[i] = std::sqrt(dot(keys.data() + i * head_dim, keys.data() + i * head_dim, head_dim));
    if (norm[i] == 0.0) throw std::invalid_argument("zero-norm key");
  }
  std::vector<std::vector<double>> sim(length, std::vector<double>(length, 0.0));
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      if (i == j) continue;
      if (block_size > 0 && i / block_size != j / block_size) continue;
      sim[i][j] = dot(keys.data() + i * head_dim, keys.data() + j * head_dim, head_dim) / (norm[i] * norm[j]);
    }
  }
  for (std::size_t j = 0; j < length; ++j) {
    for (std::size_t i = length; i-- > 0;) {
      if (sim[i][j] > p) {
        sim[i][j] = 0.0;
        break;
      }
    }
  }
  std::vector<double> rows(length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) rows[i] += sim[i][j];
    rows[i] = rows[i] / static_cast<double>(length) / tau;
  }
  return softmax(rows);
}

std::vector<bool> topk_exhaustive(std::span<const double> scores, std::size_t k) {
  std::vector<bool> keep(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::size_t beaten_by = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j > i)) ++beaten_by;
    }
    keep[i] = beaten_by < k;
  }
  return keep;
}

namespace {

__extension__ using i128 = __int128;

// Everything scaled by 2d: a block costs 2d*m_kv, plus m_kv more when F is sized in
// (one scalar per K/V pair, i.e. 1/(2d) of the block).
bool memory_ok(const MemoryBudget& budget, std::int64_t m, std::int64_t n, bool with_global) {
  const i128 two_d = 2 * static_cast<i128>(budget.head_dim);
  const i128 block_cost = (with_global ? two_d + 1 : two_d) * budget.m_kv;
  return block_cost * n + two_d * budget.m_q * m <= two_d * budget.m_available;
}

}  // namespace

bool plan_satisfies(const MemoryBudget& budget, const CapacityPlan& plan, bool with_global) {
  if (plan.max_concurrency < 1 || plan.total_blocks < 1) return false;
  return memory_ok(budget, plan.max_concurrency, plan.total_blocks, with_global) &&
         static_cast<i128>(plan.max_concurrency) * budget.n_max <= plan.total_blocks;
}

CapacityResult capacity_bruteforce(const MemoryBudget& budget, bool with_global) {
  CapacityResult best;
  for (std::int64_t m = 1;; ++m) {
    if (!memory_ok(budget, m, m * budget.n_max, with_global)) break;
    // Memory use grows with N, so bisect for the largest N that still fits.
    std::int64_t lo = m * budget.n_max;
    std::int64_t hi = budget.m_available / budget.m_kv + 1;
    while (lo + 1 < hi) {
      const std::int64_t mid = lo + (hi - lo) / 2;
      (memory_ok(budget, m, mid, with_global) ? lo : hi) = mid;
    }
    best = {true, {m, lo}};
  }
  return best;
}

void SuiteReport::fail(std::string message) {
  ++failures;
  if (messages.size() < 8) messages.push_back(std::move(message));
}

}  // namespace cpa::oracle
