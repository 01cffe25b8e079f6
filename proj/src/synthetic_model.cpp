// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpa/synthetic_model.hpp"

#include <cmath>
#include <stdexcept>

namespace cpa {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t chain_hash(std::uint64_t previous, std::uint64_t token) {
  return mix64(previous ^ mix64(token + 0x632be59bd9b4e019ULL));
}

SyntheticModel::SyntheticModel(std::uint64_t seed, int num_layers, int kv_heads, int query_heads, int head_dim)
    : seed_(seed), num_layers_(num_layers), kv_heads_(kv_heads), query_heads_(query_heads), head_dim_(head_dim) {
  if (num_layers <= 0 || kv_heads <= 0 || query_heads <= 0 || head_dim <= 0) {
    throw std::invalid_argument("synthetic model dimensions must be positive");
  }
}

std::uint64_t SyntheticModel::stream(std::uint64_t context, std::uint64_t position, int layer, int head,
                                     int kind) const {
  std::uint64_t h = mix64(seed_ ^ 0xd1b54a32d192ed03ULL);
  h = mix64(h ^ context);
  h = mix64(h ^ position);
  h = mix64(h ^ (static_cast<std::uint64_t>(layer) << 32 | static_cast<std::uint64_t>(head) << 8 |
                 static_cast<std::uint64_t>(kind)));
  return h;
}

void SyntheticModel::fill(std::uint64_t stream, std::span<Scalar> out) const {
  // Box-Muller over a counter stream gives isotropic directions after normalisation.
  double norm2 = 0.0;
  std::vector<double> tmp(out.size());
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const std::uint64_t a = mix64(stream + 2 * i + 1);
    const std::uint64_t b = mix64(stream + 2 * i + 2);
    const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    tmp[i] = r * std::cos(2.0 * M_PI * u2);
    if (i + 1 < out.size()) tmp[i + 1] = r * std::sin(2.0 * M_PI * u2);
  }
  for (double x : tmp) norm2 += x * x;
  if (norm2 == 0.0) {
    tmp.assign(tmp.size(), 0.0);
    tmp[0] = 1.0;
    norm2 = 1.0;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(tmp[i] * inv);
}

void SyntheticModel::query(std::uint64_t context, std::uint64_t position, int layer, int query_head,
                           std::span<Scalar> out) const {
  fill(stream(context, position, layer, query_head, 0), out);
}

void SyntheticModel::key(std::uint64_t context, std::uint64_t position, int layer, int kv_head,
                         std::span<Scalar> out) const {
  fill(stream(context, position, layer, kv_head, 1), out);
}

void SyntheticModel::value(std::uint64_t context, std::uint64_t position, int layer, int kv_head,
                           std::span<Scalar> out) const {
  fill(stream(context, position, layer, kv_head, 2), out);
}

SyntheticModel::States SyntheticModel::states(std::uint64_t context, std::uint64_t position, int layer,
                                              int head) const {
  States s{std::vector<Scalar>(head_dim_), std::vector<Scalar>(head_dim_), std::vector<Scalar>(head_dim_)};
  query(context, position, layer, head, s.q);
  key(context, position, layer, head, s.k);
  value(context, position, layer, head, s.v);
  return s;
}

std::uint64_t SyntheticModel::generated_token(std::uint64_t request_seed, std::uint64_t position) {
  return mix64(mix64(request_seed ^ 0xa0761d6478bd642fULL) + position);
}

}  // namespace cpa
