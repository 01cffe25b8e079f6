// Copyright 2026 The cpa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cpa {

/// Base class for every recoverable error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pool / storage.
class NoFreeBlocks : public Error {
 public:
  NoFreeBlocks() : Error("no free KV blocks") {}
};

class DoubleFree : public Error {
 public:
  explicit DoubleFree(int block) : Error("block " + std::to_string(block) + " is already free") {}
};

class SharedBlockWrite : public Error {
 public:
  explicit SharedBlockWrite(int block)
      : Error("block " + std::to_string(block) + " is shared and immutable") {}
};

class UnboundSlot : public Error {
 public:
  explicit UnboundSlot(int slot) : Error("query slot " + std::to_string(slot) + " is not bound") {}
};

// Capacity planning.
class InfeasibleBudget : public Error {
 public:
  using Error::Error;
};

// Scoring.
class WindowNotFull : public Error {
 public:
  WindowNotFull(int fill, int window)
      : Error("observation window holds " + std::to_string(fill) + " of " +
              std::to_string(window) + " query states") {}
};

class GlobalDisabled : public Error {
 public:
  GlobalDisabled() : Error("global score cache is not enabled for this pool") {}
};

class ZeroNormKey : public Error {
 public:
  explicit ZeroNormKey(std::size_t position)
      : Error("key at position " + std::to_string(position) + " has zero norm") {}
};

// Compression.
class BudgetExceedsLength : public Error {
 public:
  BudgetExceedsLength(std::size_t k, std::size_t length)
      : Error("budget " + std::to_string(k) + " exceeds sequence length " + std::to_string(length)) {}
};

// Scheduling.
class NoPreemptable : public Error {
 public:
  NoPreemptable() : Error("allocation failed and no request is eligible for preemption") {}
};

// Harness: configuration and workload files. `where` names the field or line.
class SchemaError : public Error {
 public:
  SchemaError(const std::string& where, const std::string& what)
      : Error(where + ": " + what), where_(where) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

}  // namespace cpa
