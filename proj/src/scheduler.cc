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

#include "rdmaflow/scheduler.h"

#include "rdmaflow/errors.h"

namespace rdmaflow {

void ReadyQueue::Push(Activation a) {
  std::lock_guard<std::mutex> lock(mu_);
  q_.push_back(a);
}

std::optional<Activation> ReadyQueue::Pop() {
  std::lock_guard<std::mutex> lock(mu_);
  if (q_.empty()) return std::nullopt;
  Activation a = q_.front();
  q_.pop_front();
  return a;
}

size_t ReadyQueue::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return q_.size();
}

std::vector<Activation> ReadyQueue::Snapshot() const {
  std::lock_guard<std::mutex> lock(mu_);
  return {q_.begin(), q_.end()};
}

void Scheduler::ResetPhases(size_t num_ops) {
  completing_.assign(num_ops, 0);
}

StepOutcome Scheduler::Step() {
  std::optional<Activation> a = queue_.Pop();
  if (!a) return StepOutcome::kIdle;
  StepOutcome outcome;
  if (a->phase == Phase::kComplete) {
    ops_.Complete(a->op);
    outcome = StepOutcome::kCompleted;
  } else {
    switch (ops_.ModeOf(a->op)) {
      case ExecMode::kSync:
        ops_.RunSync(a->op);
        outcome = StepOutcome::kRanSync;
        break;
      case ExecMode::kAsync:
        ops_.StartAsync(a->op);
        outcome = StepOutcome::kStartedAsync;
        break;
      case ExecMode::kPollingAsync:
      default: {
        if (a->op >= completing_.size()) completing_.resize(a->op + 1, 0);
        if (completing_[a->op]) {
          Fail(ErrorCode::kProtocolViolation,
               "op " + std::to_string(a->op) + " polled after it became ready");
        }
        polls_.fetch_add(1);
        if (ops_.Poll(a->op) == PollResult::kPending) {
          queue_.Push(*a);
          outcome = StepOutcome::kPolledPending;
        } else {
          completing_[a->op] = 1;
          ops_.StartAsync(a->op);
          outcome = StepOutcome::kPolledReady;
        }
        break;
      }
    }
  }
  const uint64_t step = steps_.fetch_add(1);
  if (trace_) trace_(StepTrace{step, *a, outcome});
  return outcome;
}

}  // namespace rdmaflow
