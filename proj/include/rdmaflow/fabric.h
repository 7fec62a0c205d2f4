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

// In-process simulation of an RDMA fabric: devices, reliable-connected queue
// pairs, completion queues, one-sided read/write delivered as ascending
// address chunks, send/recv messaging, and a small RPC used to distribute
// remote addresses.

#ifndef RDMAFLOW_FABRIC_H_
#define RDMAFLOW_FABRIC_H_

#include <atomic>
#include <compare>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "rdmaflow/memspace.h"

namespace rdmaflow {

struct Endpoint {
  ServerId server = 0;
  uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;
  std::string ToString() const;
};

// Simulated-time cost model, in seconds.
struct CostModel {
  double alpha = 1e-6;      // per verb
  double beta = 0.08e-9;    // per byte on the wire (100 Gbps)
  double gamma = 0.05e-9;   // per byte memory-copied
  // Per-node compute time overrides keyed by node id; nodes fall back to
  // their own attribute when absent.
  std::unordered_map<uint32_t, double> compute_time;

  double VerbTime(uint64_t bytes) const { return alpha + beta * bytes; }
  double CopyTime(uint64_t bytes) const { return gamma * bytes; }
  void Validate() const;
};

enum class VerbKind : uint8_t { kWrite, kRead, kSend, kRecv };
std::string_view VerbKindName(VerbKind k);

enum class CompletionStatus : uint8_t {
  kSuccess,
  kRecvBufferTooSmall,
  kNoPostedReceive,
};

using VerbId = uint64_t;

struct CompletionEvent {
  VerbId verb_id = 0;
  VerbKind kind = VerbKind::kWrite;
  CompletionStatus status = CompletionStatus::kSuccess;
  uint64_t user_tag = 0;
  uint64_t byte_len = 0;
  uint32_t qp_id = 0;
  double sim_time = 0;  // simulated completion time
};

// How delivery splits a verb into chunks. Without a script, chunk sizes are
// drawn uniformly from [1, max_chunk] using the fabric's seeded RNG.
struct ChunkPolicy {
  uint64_t max_chunk = 4096;
  // Returns chunk sizes summing to `len`; used for scripted tests.
  std::function<std::vector<uint64_t>(VerbKind, uint64_t len)> script;
};

struct FabricOptions {
  CostModel cost;
  ChunkPolicy chunking;
  uint64_t seed = 1;
  // A send waiting for a posted receive fails with NoPostedReceive after this
  // many delivery attempts (manual mode) or this much wall time (threaded).
  uint64_t send_retry_limit = 4'000'000;
  double send_timeout_seconds = 10.0;
  double rpc_timeout_seconds = 10.0;
  // Fault injection: verbs for which this returns true are accepted but
  // never delivered.
  std::function<bool(VerbKind, uint64_t tag)> withhold;
};

struct DeviceOptions {
  uint32_t num_cqs = 1;
  uint32_t qps_per_peer = 1;
};

// A channel is a value naming one queue pair of a connection.
struct Channel {
  Endpoint local;
  Endpoint remote;
  uint32_t qp_index = 0;  // index among the connection's data QPs
  uint32_t qp_id = 0;     // device-unique id
  uint32_t cq_index = 0;
};

class Fabric;

using RpcHandler =
    std::function<std::vector<std::byte>(std::span<const std::byte> request)>;

class RdmaDevice {
 public:
  RdmaDevice(Fabric& fabric, Endpoint endpoint, MemorySpace& space,
             DeviceOptions options);
  ~RdmaDevice();

  RdmaDevice(const RdmaDevice&) = delete;
  RdmaDevice& operator=(const RdmaDevice&) = delete;

  Endpoint endpoint() const { return endpoint_; }
  MemorySpace& space() { return space_; }
  const DeviceOptions& options() const { return options_; }

  // Creates qps_per_peer data QPs to `peer` (and the matching passive QPs
  // on the peer). Each new QP is bound to CQ (device-global counter mod
  // num_cqs). Connecting twice returns the existing channels.
  std::vector<Channel> Connect(Endpoint peer);
  std::vector<Channel> Channels(Endpoint peer) const;
  Channel GetChannel(Endpoint peer, uint32_t qp_index) const;

  VerbId PostWrite(const Channel& ch, const RegionHandle& src,
                   uint64_t src_offset, uint64_t len, Addr dst_addr,
                   Token dst_token, uint64_t tag,
                   std::optional<double> sim_post = std::nullopt);
  VerbId PostRead(const Channel& ch, Addr src_addr, Token src_token,
                  const RegionHandle& dst, uint64_t dst_offset, uint64_t len,
                  uint64_t tag, std::optional<double> sim_post = std::nullopt);
  VerbId PostSend(const Channel& ch, const RegionHandle& src,
                  uint64_t src_offset, uint64_t len, uint64_t tag,
                  std::optional<double> sim_post = std::nullopt);
  VerbId PostRecv(const Channel& ch, const RegionHandle& dst,
                  uint64_t dst_offset, uint64_t len, uint64_t tag);

  std::optional<CompletionEvent> PollCq(uint32_t cq_index);
  // Polls every CQ once, starting after the last CQ that yielded an event.
  std::optional<CompletionEvent> PollAnyCq();
  size_t num_cqs() const { return cqs_.size(); }

  void RegisterRpcHandler(uint32_t method, RpcHandler handler);
  // Blocking request/response over send/recv on the connection's control
  // queue pairs. Throws HandlerMissing or Timeout.
  std::vector<std::byte> RpcCall(const Channel& ch, uint32_t method,
                                 std::span<const std::byte> request);

 private:
  friend class Fabric;

  struct CompletionQueue {
    std::mutex mu;
    std::deque<CompletionEvent> events;
  };

  Fabric& fabric_;
  Endpoint endpoint_;
  MemorySpace& space_;
  DeviceOptions options_;
  std::vector<std::unique_ptr<CompletionQueue>> cqs_;
  std::atomic<uint32_t> poll_cursor_{0};
  uint32_t next_cq_ = 0;  // guarded by fabric mutex
  // Control traffic lives in a private NIC-side space so it does not
  // consume the server's regions.
  std::unique_ptr<MemorySpace> control_space_;
  std::mutex call_mu_;  // one outstanding RpcCall per device
  std::mutex rpc_mu_;   // guards rpc_handlers_
  std::map<uint32_t, RpcHandler> rpc_handlers_;
};

class Fabric {
 public:
  explicit Fabric(FabricOptions options = {});
  ~Fabric();

  Fabric(const Fabric&) = delete;
  Fabric& operator=(const Fabric&) = delete;

  RdmaDevice& CreateDevice(Endpoint endpoint, MemorySpace& space,
                           DeviceOptions options = {});
  RdmaDevice* FindDevice(Endpoint endpoint);

  // Manual delivery: advances up to `max_chunks` chunks (one per pick, QPs
  // picked by the seeded RNG). Returns the number of chunks delivered.
  // Must not be called while worker threads run.
  size_t Progress(size_t max_chunks = 1);
  // Manual delivery until no verb can make progress.
  void RunUntilIdle();
  // True when no posted verb is waiting for delivery.
  bool Idle() const;

  // Threaded delivery.
  void StartWorkers(int count);
  void StopWorkers();
  bool threaded() const { return !workers_.empty(); }

  // Drives delivery (manual) or waits (threaded) until `done` holds.
  // Returns false on timeout.
  bool WaitUntil(const std::function<bool()>& done, double timeout_seconds);

  const CostModel& cost() const { return options_.cost; }
  const FabricOptions& options() const { return options_; }
  double sim_now() const;

  uint64_t posted_verbs() const { return posted_.load(); }
  uint64_t completed_verbs() const { return completed_.load(); }
  uint64_t delivered_chunks() const { return chunks_.load(); }
  uint64_t wire_bytes() const { return wire_bytes_.load(); }

  // Reads a byte of any device's memory without a verb. Used by protocol
  // assertions only.
  uint8_t PeekByte(Endpoint endpoint, Addr addr);

 private:
  friend class RdmaDevice;

  struct Verb;
  struct PostedRecv {
    MemorySpace* space;
    Addr addr;
    uint64_t len;
    uint64_t tag;
    VerbId id;
    std::function<void(const CompletionEvent&)> internal_done;
  };
  struct QueuePair {
    uint32_t qp_id = 0;
    RdmaDevice* device = nullptr;
    Endpoint peer;
    uint32_t cq_index = 0;
    QueuePair* remote = nullptr;
    bool control = false;
    std::deque<std::shared_ptr<Verb>> send_queue;
    std::deque<PostedRecv> recv_queue;
    bool busy = false;
    double sim_busy_until = 0;
  };
  struct Connection {
    std::vector<QueuePair*> data;  // local side, by qp_index
    QueuePair* control_out = nullptr;  // requests this side initiates
    QueuePair* control_in = nullptr;   // requests the peer initiates
    MemorySpace* control_space = nullptr;
    RegionHandle control_region;
  };
  struct ChunkWork {
    std::shared_ptr<Verb> verb;
    QueuePair* qp = nullptr;
    uint64_t offset = 0;
    uint64_t len = 0;
  };

  QueuePair* NewQp(RdmaDevice* device, Endpoint peer, bool control);
  std::vector<Channel> ConnectLocked(RdmaDevice* device, Endpoint peer);
  QueuePair* FindQp(const Channel& ch);
  Connection* FindConnection(Endpoint local, Endpoint peer);
  VerbId Enqueue(QueuePair* qp, std::shared_ptr<Verb> verb);
  void PostRecvLocked(QueuePair* qp, PostedRecv recv);

  // Picks the next chunk of deliverable work; fails blocked sends that
  // exhausted their retry budget. Caller holds mu_.
  bool NextChunkLocked(ChunkWork* work, std::vector<std::function<void()>>* done);
  bool HeadReadyLocked(QueuePair* qp, std::vector<std::function<void()>>* done);
  void DeliverChunk(const ChunkWork& work);
  void FinishChunkLocked(const ChunkWork& work,
                         std::vector<std::function<void()>>* done);
  void CompleteLocked(QueuePair* qp, const std::shared_ptr<Verb>& verb,
                      CompletionStatus status,
                      std::vector<std::function<void()>>* done);
  void FailRecvLocked(QueuePair* qp, PostedRecv recv, CompletionStatus status,
                      uint64_t len, double sim_time,
                      std::vector<std::function<void()>>* done);
  std::function<void()> MakeDelivery(RdmaDevice* device, uint32_t cq_index,
                                     CompletionEvent ev,
                                     std::function<void(const CompletionEvent&)> internal);
  uint64_t NextChunkSize(Verb& verb);
  void WorkerLoop();
  void RpcServe(RdmaDevice* callee, Connection* conn, QueuePair* qp,
                const CompletionEvent& ev);
  void PostServiceRecvLocked(RdmaDevice* callee, Connection* conn);

  FabricOptions options_;
  mutable std::mutex mu_;
  std::condition_variable work_cv_;
  std::map<Endpoint, std::unique_ptr<RdmaDevice>> devices_;
  std::vector<std::unique_ptr<QueuePair>> qps_;
  std::map<std::pair<Endpoint, Endpoint>, Connection> connections_;
  std::vector<QueuePair*> active_;  // QPs with a non-empty send queue
  std::mt19937_64 rng_;
  VerbId next_verb_ = 1;
  double sim_now_ = 0;
  std::atomic<uint64_t> posted_{0};
  std::atomic<uint64_t> completed_{0};
  std::atomic<uint64_t> chunks_{0};
  std::atomic<uint64_t> wire_bytes_{0};
  bool stop_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_FABRIC_H_
