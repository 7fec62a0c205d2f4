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

#ifndef RDMAFLOW_ANALYZER_H_
#define RDMAFLOW_ANALYZER_H_

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rdmaflow/fabric.h"
#include "rdmaflow/graph.h"
#include "rdmaflow/memspace.h"
#include "rdmaflow/wire.h"

namespace rdmaflow {

// kForceStatic drops the Variable rule (shape alone decides); kForceDynamic
// sends everything through meta blocks.
enum class ClassifyMode : uint8_t { kAuto, kForceStatic, kForceDynamic };

// True when the tensor delivered by `recv_node` flows, through in-place
// kinds only, into an ApplyGrad or Variable on the same server.
bool FeedsVariable(const DataFlowGraph& g, NodeId recv_node);

std::map<EdgeId, Mechanism> ClassifyEdges(const DataFlowGraph& g,
                                          const ShapeMap& shapes,
                                          const std::vector<CrossEdge>& cross,
                                          ClassifyMode mode = ClassifyMode::kAuto);

struct PlanEntry {
  size_t cross_index = 0;
  EdgeId edge = 0;
  Mechanism mechanism = Mechanism::kStatic;
  ServerId producer = 0;
  ServerId consumer = 0;
  NodeId send_node = 0;
  NodeId recv_node = 0;
  ElemType elem_type = ElemType::kF32;
  TensorShape shape;
  uint64_t rank = 0;
  // Static data region or meta block, in the consumer's arena.
  RegionHandle receiver_buffer;
  // What the producer learned through the address exchange.
  bool distributed = false;
  Addr remote_addr = 0;
  Token remote_token = 0;
  uint64_t remote_len = 0;

  uint64_t ReceiverBytes() const;  // static region or meta block size
};

struct TransferPlan {
  std::vector<PlanEntry> entries;  // indexed by cross-edge index

  const PlanEntry& ForEdge(EdgeId e) const;
  std::string Dump() const;
};

TransferPlan MakePlan(const DataFlowGraph& g, const ShapeMap& shapes,
                      const std::vector<CrossEdge>& cross,
                      const std::map<EdgeId, Mechanism>& mechanisms);

inline constexpr uint32_t kAddrExchangeMethod = 0x41444452;  // "ADDR"

// Allocates every receiver buffer from the consumer's arena (flags cleared),
// then has each producer fetch (addr, token, len) from the consumer with an
// RPC carrying AddrExchangeMsg.
void PreallocateAndDistribute(TransferPlan& plan,
                              const std::function<ArenaAllocator&(ServerId)>& arena,
                              const std::function<RdmaDevice&(ServerId)>& device);

struct AllocSiteKey {
  NodeId node = 0;
  uint32_t alloc_index = 0;
  auto operator<=>(const AllocSiteKey&) const = default;
};

enum class AllocatorChoice : uint8_t { kNormal, kArena };

// Allocation-site tracing for one server. Mutations are serialized; once
// frozen, tracing calls become no-ops and lookups need no coordination.
class TraceState {
 public:
  void TraceAlloc(Addr addr, AllocSiteKey key);
  // Throws UnknownAddress for an address no allocation was traced at.
  void MarkTransferred(Addr addr);
  AllocatorChoice ChooseAllocator(AllocSiteKey key, int64_t iteration) const;

  void Freeze();
  bool frozen() const;
  std::set<AllocSiteKey> set_s() const;
  std::optional<AllocSiteKey> Lookup(Addr addr) const;

 private:
  mutable std::mutex mu_;
  bool frozen_ = false;
  std::map<Addr, AllocSiteKey> addr_map_;
  std::set<AllocSiteKey> set_s_;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_ANALYZER_H_
