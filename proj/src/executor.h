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

#ifndef RDMAFLOW_SRC_EXECUTOR_H_
#define RDMAFLOW_SRC_EXECUTOR_H_

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rdmaflow/analyzer.h"
#include "rdmaflow/kernels.h"
#include "rdmaflow/runtime.h"
#include "rdmaflow/scheduler.h"
#include "rdmaflow/transfer.h"

namespace rdmaflow {

struct ExecutorShared {
  Fabric* fabric = nullptr;
  const DataFlowGraph* graph = nullptr;  // partitioned
  const kernels::KernelTable* kernels = nullptr;
  uint64_t seed = 1;
  bool tracing = false;
  std::atomic<double>* arrival = nullptr;  // by cross-edge index
  EdgeCapture* capture = nullptr;
  std::optional<int64_t> audit_iteration;
};

// Runs the nodes placed on one server.
class Executor final : public OpTable {
 public:
  Executor(ServerId server, const ExecutorShared& shared, MemorySpace& space,
           ArenaAllocator& arena, ArenaAllocator& heap, RdmaDevice& device,
           const std::vector<NodeId>& nodes);
  ~Executor() override;

  void SetStaticSender(NodeId n, std::unique_ptr<StaticSender> ep);
  void SetStaticReceiver(NodeId n, std::unique_ptr<StaticReceiver> ep);
  void SetDynSender(NodeId n, std::unique_ptr<DynSender> ep);
  void SetDynReceiver(NodeId n, std::unique_ptr<DynReceiver> ep);
  void SetRpcSender(NodeId n, std::unique_ptr<RpcSender> ep);
  void SetRpcReceiver(NodeId n, std::unique_ptr<RpcReceiver> ep);
  void AddRecvResident(int64_t bytes);

  void BeginIteration(int64_t iteration, double sim_start);
  bool Done() const { return done_count_.load() == ops_.size(); }
  // Routes up to `max_events` CQ events; returns how many were handled.
  size_t PumpCompletions(size_t max_events);
  // Runs up to `budget` scheduler steps; returns the steps other than
  // polls that found nothing.
  size_t RunSteps(size_t budget);
  void EndIteration(ServerIterationStats* out);
  double max_finish() const;
  std::string PendingOps() const;

  void FreezeTrace() { trace_.Freeze(); }
  void FreezeAudit() { audit_.Freeze(); }
  uint64_t RelocateVariables();
  Tensor variable(NodeId n) const;
  const TraceState& trace() const { return trace_; }
  const TraceState& audit() const { return audit_; }
  std::map<EdgeId, uint64_t> TakeEdgeBytes();
  void ReleaseRetained();

  // OpTable
  ExecMode ModeOf(uint32_t op) const override;
  void RunSync(uint32_t op) override;
  void StartAsync(uint32_t op) override;
  PollResult Poll(uint32_t op) override;
  void Complete(uint32_t op) override;

 private:
  struct Consumer {
    uint32_t op;
    uint32_t port;
    EdgeId edge;
  };
  struct OpState {
    const Node* node = nullptr;
    std::vector<Consumer> consumers;
    // Guarded by mu_.
    std::vector<Tensor> inputs;
    uint32_t missing = 0;
    double ready_at = 0;
    // Owned by whichever thread runs the op's current activation.
    double finish_at = 0;
    uint32_t alloc_index = 0;
    std::atomic<int> gate{0};
    std::atomic<bool> done{false};
    Tensor result;      // recv output or in-flight send tensor
    double result_at = 0;
    Tensor storage;     // Variable
    std::unique_ptr<StaticSender> static_send;
    std::unique_ptr<StaticReceiver> static_recv;
    std::unique_ptr<DynSender> dyn_send;
    std::unique_ptr<DynReceiver> dyn_recv;
    std::unique_ptr<RpcSender> rpc_send;
    std::unique_ptr<RpcReceiver> rpc_recv;
  };

  OpState& StateOf(NodeId n);
  Tensor Allocate(OpState& st, std::vector<uint64_t> dims, ElemType t);
  Tensor Compute(OpState& st, std::vector<Tensor>& in);
  void Publish(OpState& st, const Tensor& out, double at);
  void MarkDone(OpState& st, double at);
  void GateDown(uint32_t op);
  void StartSend(uint32_t op);
  double ArrivalOf(const OpState& st) const;
  void OnRecvBufferReleased(const RegionHandle& h);

  ServerId server_;
  ExecutorShared shared_;
  MemorySpace& space_;
  ArenaAllocator& arena_;
  ArenaAllocator& heap_;
  RdmaDevice& device_;

  std::atomic<int64_t> recv_resident_{0};
  std::atomic<int64_t> recv_resident_peak_{0};
  CopyCounters attributed_;
  TraceState trace_;
  TraceState audit_;

  mutable std::mutex mu_;
  std::vector<std::unique_ptr<OpState>> ops_;
  std::map<NodeId, uint32_t> index_;
  Scheduler sched_;
  std::atomic<size_t> done_count_{0};
  int64_t iteration_ = 0;
  double sim_start_ = 0;
  bool audit_active_ = false;

  // Per-iteration statistics.
  CopyCounterSnapshot copies_at_start_;
  uint64_t arena_at_start_ = 0;
  int64_t recv_at_start_ = 0;
  uint64_t steps_at_start_ = 0;
  uint64_t polls_at_start_ = 0;
  std::atomic<uint64_t> transfers_{0};
  std::atomic<uint64_t> bytes_sent_{0};
  std::atomic<uint64_t> wire_bytes_{0};
  std::atomic<uint64_t> writes_{0};
  std::atomic<uint64_t> reads_{0};
  std::atomic<uint64_t> sends_{0};
  std::atomic<uint64_t> violations_{0};
  std::mutex edge_mu_;
  std::map<EdgeId, uint64_t> edge_bytes_;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_SRC_EXECUTOR_H_
