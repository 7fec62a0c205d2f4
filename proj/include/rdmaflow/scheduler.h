/* Copyright 2026 The rdmaflow Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Operator scheduling with three execution modes. Synchronous operators run
// to completion when popped; asynchronous ones start work whose completion
// is delivered later as a separate activation; polling-async operators are
// polled, go back to the tail of the queue while pending, and turn into an
// asynchronous completion once ready.

#ifndef RDMAFLOW_SCHEDULER_H_
#define RDMAFLOW_SCHEDULER_H_

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <vector>

#include "rdmaflow/graph.h"

namespace rdmaflow {

enum class PollResult : uint8_t { kPending, kReady };
enum class Phase : uint8_t { kRun, kComplete };

struct Activation {
  uint32_t op = 0;
  Phase phase = Phase::kRun;
  bool operator==(const Activation&) const = default;
};

class ReadyQueue {
 public:
  void Push(Activation a);
  std::optional<Activation> Pop();
  size_t size() const;
  std::vector<Activation> Snapshot() const;

 private:
  mutable std::mutex mu_;
  std::deque<Activation> q_;
};

class OpTable {
 public:
  virtual ~OpTable() = default;
  virtual ExecMode ModeOf(uint32_t op) const = 0;
  virtual void RunSync(uint32_t op) = 0;
  // Async start. The implementation enqueues the Complete activation once
  // its work finishes (possibly from another thread).
  virtual void StartAsync(uint32_t op) = 0;
  virtual PollResult Poll(uint32_t op) = 0;
  virtual void Complete(uint32_t op) = 0;
};

enum class StepOutcome : uint8_t {
  kIdle,
  kRanSync,
  kStartedAsync,
  kPolledPending,
  kPolledReady,
  kCompleted,
};

struct StepTrace {
  uint64_t step = 0;
  Activation activation;
  StepOutcome outcome = StepOutcome::kIdle;
};

class Scheduler {
 public:
  explicit Scheduler(OpTable& ops) : ops_(ops) {}

  void Enqueue(Activation a) { queue_.Push(a); }
  // Pops one activation and runs it.
  StepOutcome Step();
  // Marks every op as Polling again; called at iteration start.
  void ResetPhases(size_t num_ops);

  void set_trace(std::function<void(const StepTrace&)> fn) { trace_ = std::move(fn); }
  ReadyQueue& queue() { return queue_; }
  const ReadyQueue& queue() const { return queue_; }
  uint64_t steps() const { return steps_.load(); }
  uint64_t polls() const { return polls_.load(); }

 private:
  OpTable& ops_;
  ReadyQueue queue_;
  // 1 once a polling op observed ready in the current activation cycle. An
  // op has at most one queued activation, so each slot has one writer.
  std::vector<uint8_t> completing_;
  std::atomic<uint64_t> steps_{0};
  std::atomic<uint64_t> polls_{0};
  std::function<void(const StepTrace&)> trace_;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_SCHEDULER_H_
