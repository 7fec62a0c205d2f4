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

// Per-edge protocol endpoints. Each pair implements one way of moving a
// tensor between servers:
//
//   StaticSender / StaticReceiver  payload+flag written into a preallocated
//                                  region; the receiver polls the flag.
//   DynSender / DynReceiver        a meta block is written; the receiver
//                                  allocates and pulls the payload with a read.
//   RpcSender / RpcReceiver        fragments over send/recv into a ring, then
//                                  copied out (the copy-heavy baseline).
//
// Endpoints never block. Completions arrive on the device CQs tagged with
// MakeTag() and are routed back by the executor.

#ifndef RDMAFLOW_TRANSFER_H_
#define RDMAFLOW_TRANSFER_H_

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <vector>

#include "rdmaflow/fabric.h"
#include "rdmaflow/graph.h"
#include "rdmaflow/tensor.h"

namespace rdmaflow {

enum class TagKind : uint8_t {
  kSendDone = 1,   // write or fragment send issued by a send node
  kReadDone = 2,   // payload read issued by a dynamic recv node
  kSlotFilled = 3, // ring slot receive completed
};

struct DecodedTag {
  TagKind kind;
  NodeId node;
  uint32_t slot;
};

// (kind << 56) | (slot << 32) | node
uint64_t MakeTag(TagKind kind, NodeId node, uint32_t slot = 0);
DecodedTag DecodeTag(uint64_t tag);

struct RemoteRegion {
  Addr addr = 0;
  Token token = 0;
  uint64_t len = 0;
};

struct SendResult {
  uint64_t verbs = 0;         // verbs posted (completions to expect)
  uint64_t wire_bytes = 0;
  uint64_t staged_bytes = 0;  // payload bytes copied before posting
  double arrival = 0;         // simulated time the data is observable remotely
};

class StaticSender {
 public:
  StaticSender(Fabric& fabric, RdmaDevice& device, Channel channel,
               RemoteRegion remote, ArenaAllocator& staging);

  // One write of payload+flag. Sources outside registered memory are first
  // copied into an arena staging buffer (counted on `attributed`).
  SendResult Send(const Tensor& t, uint64_t tag, double sim_ready,
                  CopyCounters* attributed);
  // Called once the write completed.
  void Finish();

 private:
  Fabric& fabric_;
  RdmaDevice& device_;
  Channel channel_;
  RemoteRegion remote_;
  ArenaAllocator& staging_;
  Tensor inflight_;
  std::optional<RegionHandle> staged_;
};

class StaticReceiver {
 public:
  StaticReceiver(MemorySpace& space, RegionHandle region,
                 std::vector<uint64_t> dims, ElemType t);

  // Clears the flag and returns a view of the region once it reads 0x01.
  std::optional<Tensor> Poll();
  const RegionHandle& region() const { return region_; }

 private:
  MemorySpace& space_;
  RegionHandle region_;
  std::vector<uint64_t> dims_;
  ElemType elem_type_;
  std::shared_ptr<Buffer> view_;
};

class DynSender {
 public:
  DynSender(Fabric& fabric, RdmaDevice& device, Channel channel,
            RemoteRegion meta, uint64_t rank, ArenaAllocator& arena);
  ~DynSender();

  // Writes the meta block. The payload stays readable (and is kept alive)
  // until the next Send or Release.
  SendResult Send(const Tensor& t, uint64_t tag, double sim_ready,
                  CopyCounters* attributed);
  void Release() { retained_ = Tensor{}; }
  const Tensor& retained() const { return retained_; }

 private:
  Fabric& fabric_;
  RdmaDevice& device_;
  Channel channel_;
  RemoteRegion meta_;
  uint64_t rank_;
  ArenaAllocator& arena_;
  RegionHandle meta_staging_;
  Tensor retained_;
};

class DynReceiver {
 public:
  enum class State : uint8_t { kPending, kReadPosted, kReady };

  DynReceiver(RdmaDevice& device, Channel channel, RegionHandle meta_region,
              uint64_t rank, ArenaAllocator& arena);

  // On a set meta flag: copies the block out, clears the flag, allocates
  // the destination in the arena and posts the payload read. Empty tensors
  // are ready at once.
  State Poll(uint64_t tag, double sim_post,
             std::function<void(const RegionHandle&)> on_release = {});
  Tensor Take();
  uint64_t last_payload_bytes() const { return last_payload_; }
  const RegionHandle& meta_region() const { return meta_region_; }

 private:
  RdmaDevice& device_;
  Channel channel_;
  RegionHandle meta_region_;
  uint64_t rank_;
  ArenaAllocator& arena_;
  Tensor pending_;
  uint64_t last_payload_ = 0;
};

inline constexpr uint32_t kRingSlots = 16;
inline constexpr uint64_t kRingBytes = kRingSlots * kFragmentSize;  // 64 KiB

class RpcSender {
 public:
  RpcSender(RdmaDevice& device, Channel channel, uint64_t rank,
            ArenaAllocator& staging, uint64_t msg_id_base,
            const CostModel& cost);

  // Serializes meta+payload into fragment staging and posts one send per
  // fragment.
  SendResult Send(const Tensor& t, uint64_t tag, double sim_ready,
                  CopyCounters* attributed);
  // True when this completion was the message's last fragment.
  bool OnFragmentDone();
  void Finish();

  // Sender serialization, fragment verbs and receiver copy-out.
  static double SimCost(const CostModel& c, uint64_t payload, uint64_t rank);

 private:
  RdmaDevice& device_;
  Channel channel_;
  uint64_t rank_;
  ArenaAllocator& staging_;
  CostModel cost_;
  uint64_t next_msg_id_;
  std::optional<RegionHandle> staged_;
  std::atomic<uint32_t> remaining_{0};
};

class RpcReceiver {
 public:
  RpcReceiver(RdmaDevice& device, Channel channel, ArenaAllocator& ring_arena,
              uint64_t rank, ArenaAllocator& dest, NodeId node);
  ~RpcReceiver();

  // Posts a receive for every ring slot.
  void PostAll();
  // CQ routing; safe from any thread.
  void OnSlotFilled(uint32_t slot, uint64_t len);
  // Consumes filled slots in posting order, copying payload bytes into a
  // fresh tensor (counted). Returns the tensor once its last fragment is in.
  std::optional<Tensor> Poll(CopyCounters* attributed);
  const RegionHandle& ring() const { return ring_; }

 private:
  void Repost(uint32_t slot);

  RdmaDevice& device_;
  Channel channel_;
  ArenaAllocator& ring_arena_;
  uint64_t rank_;
  ArenaAllocator& dest_;
  NodeId node_;
  RegionHandle ring_;
  std::mutex mu_;
  std::deque<uint32_t> posted_;            // slots in posting order
  std::map<uint32_t, uint64_t> filled_;    // slot -> bytes received
  // Reassembly of the current message.
  bool in_message_ = false;
  uint64_t msg_id_ = 0;
  uint32_t next_index_ = 0;
  uint32_t frag_count_ = 0;
  uint64_t body_offset_ = 0;  // bytes of meta+payload consumed so far
  uint64_t meta_len_ = 0;
  Tensor building_;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_TRANSFER_H_
