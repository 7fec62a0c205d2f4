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

// Multi-server execution of a partitioned dataflow graph: one executor per
// simulated server, a mini-batch loop with a global barrier per iteration,
// and run reports.

#ifndef RDMAFLOW_RUNTIME_H_
#define RDMAFLOW_RUNTIME_H_

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rdmaflow/analyzer.h"
#include "rdmaflow/fabric.h"
#include "rdmaflow/graph.h"
#include "rdmaflow/kernels.h"
#include "rdmaflow/memspace.h"
#include "rdmaflow/tensor.h"

namespace rdmaflow {

// zerocp: RDMA mechanisms with allocation-site tracing.
// cp:     RDMA mechanisms, tracing off, so every send stages a copy.
// rpc:    fragmenting send/recv baseline.
enum class TransferMode : uint8_t { kZeroCopy, kCopy, kRpc };
std::string_view TransferModeName(TransferMode m);
std::optional<TransferMode> ParseTransferMode(std::string_view s);

enum class DriverKind : uint8_t {
  // One thread steps every executor and the fabric in a fixed order.
  // Fully deterministic, arena peaks included.
  kCooperative,
  // Executor worker threads plus fabric delivery threads.
  kThreaded,
};

struct SessionOptions {
  TransferMode mode = TransferMode::kZeroCopy;
  ClassifyMode classify = ClassifyMode::kAuto;
  // Defaults to on for zerocp and off otherwise.
  std::optional<bool> tracing;
  DriverKind driver = DriverKind::kCooperative;
  int executor_threads = 2;  // per server, threaded driver
  int delivery_threads = 2;  // fabric workers, threaded driver

  uint64_t space_bytes = 64 * kMiB;  // per server
  uint64_t arena_bytes = 24 * kMiB;
  uint64_t heap_bytes = 24 * kMiB;
  FabricOptions fabric;
  DeviceOptions device{1, 4};
  uint64_t seed = 1;
  const kernels::KernelTable* kernels = nullptr;  // ActiveKernels() if null

  // Scheduler rounds without any progress before Deadlock is raised.
  uint64_t watchdog_rounds = 200'000;
  // Threaded driver: wall time without any progress before Deadlock.
  double watchdog_seconds = 5.0;
  // Keep a copy of every edge tensor of every iteration.
  bool capture_edges = false;
  // Re-trace this iteration (without affecting allocation) for comparison
  // against the set built during iteration 1.
  std::optional<int64_t> audit_iteration;
};

struct ServerIterationStats {
  ServerId server = 0;
  uint64_t transfers = 0;   // send activations
  uint64_t bytes_sent = 0;  // tensor payload bytes handed to sends
  uint64_t wire_bytes = 0;
  uint64_t writes_posted = 0;
  uint64_t reads_posted = 0;
  uint64_t sends_posted = 0;
  // Copies on transfer paths only (staging, serialization, copy-out).
  uint64_t payload_bytes_copied = 0;
  uint64_t payload_copy_events = 0;
  uint64_t serialize_bytes = 0;
  uint64_t arena_resident_start = 0;
  uint64_t arena_resident_end = 0;
  uint64_t arena_peak_bytes = 0;  // within this iteration
  // Receive-side transfer buffers (static regions, meta blocks, rings and
  // live dynamic payloads).
  uint64_t recv_resident_start = 0;
  uint64_t recv_resident_end = 0;
  uint64_t recv_resident_peak = 0;
  uint64_t polls = 0;
  uint64_t scheduler_steps = 0;
  // Sends from iteration 2 on whose buffer was not arena-backed although
  // tracing was enabled.
  uint64_t soundness_violations = 0;
  double simulated_time_us = 0;  // latest op finish relative to iteration start
};

struct IterationStats {
  int64_t iteration = 0;
  double simulated_time_us = 0;
  double wall_time_us = 0;
  std::vector<ServerIterationStats> servers;

  uint64_t bytes_sent() const;
  uint64_t payload_bytes_copied() const;
  uint64_t serialize_bytes() const;
  uint64_t arena_peak_bytes() const;  // max over servers
  uint64_t soundness_violations() const;
  const ServerIterationStats& server(ServerId s) const;
};

struct RunReport {
  std::vector<IterationStats> iterations;
  // Original edge id -> payload bytes carried across servers over the run.
  std::map<EdgeId, uint64_t> edge_bytes;
  // Variable storage copied into the arena once tracing finished.
  uint64_t relocation_bytes = 0;

  uint64_t total_bytes_sent() const;
  uint64_t total_payload_bytes_copied() const;
  uint64_t total_soundness_violations() const;
  // Everything except wall time; `with_arena_peaks` adds the arena columns,
  // which only the cooperative driver reproduces exactly.
  std::string Fingerprint(bool with_arena_peaks = true) const;
};

// Edge tensors recorded per iteration, keyed by edge id of the partitioned
// graph.
class EdgeCapture {
 public:
  struct Value {
    std::vector<uint64_t> dims;
    ElemType elem_type = ElemType::kF32;
    std::vector<std::byte> bytes;
    bool operator==(const Value&) const = default;
  };

  void Record(int64_t iteration, EdgeId edge, const Tensor& t);
  const Value* Get(int64_t iteration, EdgeId edge) const;
  size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::pair<int64_t, EdgeId>, Value> values_;
};

class Session {
 public:
  // Partitions `g`, infers shapes, classifies and plans transfers, creates
  // one memory space, arena, heap and device per server, connects them and
  // distributes receiver addresses.
  Session(const DataFlowGraph& g, const Placement& placement,
          const Annotations& annotations, SessionOptions options = {});
  ~Session();

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  // Runs `n` more iterations. Throws Deadlock or the first protocol error.
  RunReport Run(int64_t n);

  const PartitionResult& partition() const { return partition_; }
  const ShapeMap& shapes() const { return shapes_; }
  const TransferPlan& plan() const { return plan_; }
  const SessionOptions& options() const { return options_; }
  bool tracing() const { return tracing_; }
  const std::vector<ServerId>& servers() const { return servers_; }

  Fabric& fabric() { return *fabric_; }
  MemorySpace& space(ServerId s);
  ArenaAllocator& arena(ServerId s);
  ArenaAllocator& heap(ServerId s);
  const TraceState& trace(ServerId s) const;
  // Set built at `options().audit_iteration`, for comparison with trace().
  const TraceState& audit_trace(ServerId s) const;
  const EdgeCapture& capture() const { return capture_; }
  // Persistent storage of a Variable node.
  Tensor variable(NodeId n) const;

 private:
  struct Server;

  void RunIteration(int64_t it, IterationStats* out);
  void DriveCooperative();
  void DriveThreaded();
  void RelocateVariables(RunReport* report);
  Server& server(ServerId s) const;

  SessionOptions options_;
  bool tracing_ = false;
  PartitionResult partition_;
  ShapeMap shapes_;
  TransferPlan plan_;
  std::vector<ServerId> servers_;
  std::unique_ptr<Fabric> fabric_;
  std::map<ServerId, std::unique_ptr<Server>> by_server_;
  std::unique_ptr<std::atomic<double>[]> arrival_;
  EdgeCapture capture_;
  int64_t next_iteration_ = 1;
  double sim_clock_ = 0;
  bool relocated_ = false;
};

// Benchmark output.
struct CsvRow {
  std::string scenario;
  std::string mechanism;
  int64_t iteration = 0;
  uint64_t bytes_sent = 0;
  uint64_t payload_bytes_copied = 0;
  uint64_t arena_peak_bytes = 0;
  double simulated_time_us = 0;
  double wall_time_us = 0;
};

inline constexpr std::string_view kCsvHeader =
    "scenario,mechanism,iteration,bytes_sent,payload_bytes_copied,"
    "arena_peak_bytes,simulated_time_us,wall_time_us";

// Writes "# key = value" comment lines, the header, then the rows.
void WriteCsv(std::ostream& os,
              const std::vector<std::pair<std::string, std::string>>& config,
              const std::vector<CsvRow>& rows);

}  // namespace rdmaflow

#endif  // RDMAFLOW_RUNTIME_H_
