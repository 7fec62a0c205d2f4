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

#include "rdmaflow/analyzer.h"

#include <cstdio>
#include <memory>

#include "rdmaflow/errors.h"

namespace rdmaflow {

bool FeedsVariable(const DataFlowGraph& g, NodeId recv_node) {
  const ServerId home = g.node(recv_node).placement;
  std::vector<NodeId> frontier{recv_node};
  std::set<NodeId> seen;
  while (!frontier.empty()) {
    NodeId n = frontier.back();
    frontier.pop_back();
    for (EdgeId e : g.node(n).outputs) {
      const Node& c = g.node(g.edge(e).dst);
      if (c.placement != home || !seen.insert(c.id).second) continue;
      if (c.kind == NodeKind::kApplyGrad || c.kind == NodeKind::kVariable) {
        return true;
      }
      if (IsInPlaceKind(c.kind)) frontier.push_back(c.id);
    }
  }
  return false;
}

std::map<EdgeId, Mechanism> ClassifyEdges(const DataFlowGraph& g,
                                          const ShapeMap& shapes,
                                          const std::vector<CrossEdge>& cross,
                                          ClassifyMode mode) {
  std::map<EdgeId, Mechanism> out;
  for (const CrossEdge& ce : cross) {
    Mechanism m = Mechanism::kDynamic;
    if (mode != ClassifyMode::kForceDynamic && shapes.shape(ce.edge).FullyStatic()) {
      const bool variable_rule =
          mode == ClassifyMode::kAuto && FeedsVariable(g, ce.recv_node);
      if (!variable_rule) m = Mechanism::kStatic;
    }
    out[ce.edge] = m;
  }
  return out;
}

uint64_t PlanEntry::ReceiverBytes() const {
  if (mechanism == Mechanism::kDynamic) return MetaBlockSize(rank);
  return StaticRegionSize(shape.StaticDims(), elem_type);
}

const PlanEntry& TransferPlan::ForEdge(EdgeId e) const {
  for (const PlanEntry& p : entries) {
    if (p.edge == e) return p;
  }
  Fail(ErrorCode::kInvalidGraph, "no plan entry for edge " + std::to_string(e));
}

std::string TransferPlan::Dump() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-6s %-8s %-5s %-5s %-16s %-14s %-12s %s\n",
                "edge", "mech", "from", "to", "shape", "recv_addr", "recv_bytes",
                "token");
  out += line;
  for (const PlanEntry& p : entries) {
    std::snprintf(line, sizeof line,
                  "%-6u %-8s s%-4u s%-4u %-16s 0x%012llx %-12llu 0x%016llx\n",
                  p.edge, std::string(MechanismName(p.mechanism)).c_str(),
                  p.producer, p.consumer, p.shape.ToString().c_str(),
                  static_cast<unsigned long long>(p.receiver_buffer.base),
                  static_cast<unsigned long long>(p.receiver_buffer.len),
                  static_cast<unsigned long long>(p.receiver_buffer.token));
    out += line;
  }
  return out;
}

TransferPlan MakePlan(const DataFlowGraph& g, const ShapeMap& shapes,
                      const std::vector<CrossEdge>& cross,
                      const std::map<EdgeId, Mechanism>& mechanisms) {
  (void)g;
  TransferPlan plan;
  for (size_t i = 0; i < cross.size(); ++i) {
    const CrossEdge& ce = cross[i];
    PlanEntry p;
    p.cross_index = i;
    p.edge = ce.edge;
    p.mechanism = mechanisms.at(ce.edge);
    p.producer = ce.producer_server;
    p.consumer = ce.consumer_server;
    p.send_node = ce.send_node;
    p.recv_node = ce.recv_node;
    p.shape = shapes.shape(ce.edge);
    p.elem_type = shapes.elem_type(ce.edge);
    p.rank = p.shape.rank();
    if (p.rank == 0) Fail(ErrorCode::kRankZero, "cross edge of rank 0");
    if (p.mechanism == Mechanism::kStatic && !p.shape.FullyStatic()) {
      Fail(ErrorCode::kInvalidGraph, "static mechanism on a dynamic shape");
    }
    plan.entries.push_back(std::move(p));
  }
  return plan;
}

void PreallocateAndDistribute(TransferPlan& plan,
                              const std::function<ArenaAllocator&(ServerId)>& arena,
                              const std::function<RdmaDevice&(ServerId)>& device) {
  // consumer -> (edge -> record); each consumer answers from its own table.
  std::map<ServerId, std::shared_ptr<std::map<uint64_t, AddrExchangeMsg>>> tables;
  for (PlanEntry& p : plan.entries) {
    ArenaAllocator& a = arena(p.consumer);
    const uint64_t len = p.ReceiverBytes();
    p.receiver_buffer = a.Allocate(len);
    // Arena memory may be recycled; start from an all-zero region so the
    // flag reads empty.
    std::byte* bytes = a.space().Data(p.receiver_buffer.base, len);
    std::fill(bytes, bytes + len, std::byte{0});
    a.space().StoreByte(p.receiver_buffer.base + len - 1, kFlagEmpty);
    auto& table = tables[p.consumer];
    if (!table) table = std::make_shared<std::map<uint64_t, AddrExchangeMsg>>();
    (*table)[p.edge] = AddrExchangeMsg{p.edge, p.receiver_buffer.base,
                                       p.receiver_buffer.token, len, p.mechanism};
  }
  for (auto& entry : tables) {
    std::shared_ptr<std::map<uint64_t, AddrExchangeMsg>> table = entry.second;
    device(entry.first).RegisterRpcHandler(
        kAddrExchangeMethod, [table](std::span<const std::byte> req) {
          if (req.size() != 8) Fail(ErrorCode::kLengthMismatch, "bad edge id");
          auto it = table->find(LoadU64(req.data()));
          if (it == table->end()) Fail(ErrorCode::kInvalidGraph, "unknown edge");
          return EncodeAddrExchange(it->second);
        });
  }
  for (PlanEntry& p : plan.entries) {
    RdmaDevice& producer = device(p.producer);
    Endpoint peer = device(p.consumer).endpoint();
    Channel ch = producer.Connect(peer).front();
    std::byte req[8];
    StoreU64(req, p.edge);
    AddrExchangeMsg msg = DecodeAddrExchange(producer.RpcCall(ch, kAddrExchangeMethod, req));
    if (msg.edge_id != p.edge || msg.mechanism != p.mechanism) {
      Fail(ErrorCode::kProtocolViolation, "address exchange answered for the wrong edge");
    }
    p.remote_addr = msg.base_addr;
    p.remote_token = msg.token;
    p.remote_len = msg.region_len;
    p.distributed = true;
  }
}

// ---------------------------------------------------------------------------
// TraceState

void TraceState::TraceAlloc(Addr addr, AllocSiteKey key) {
  std::lock_guard<std::mutex> lock(mu_);
  if (frozen_) return;
  addr_map_[addr] = key;
}

void TraceState::MarkTransferred(Addr addr) {
  std::lock_guard<std::mutex> lock(mu_);
  if (frozen_) return;
  auto it = addr_map_.find(addr);
  if (it == addr_map_.end()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "transfer of untraced buffer 0x%llx",
                  static_cast<unsigned long long>(addr));
    Fail(ErrorCode::kUnknownAddress, buf);
  }
  set_s_.insert(it->second);
}

AllocatorChoice TraceState::ChooseAllocator(AllocSiteKey key,
                                            int64_t iteration) const {
  if (iteration < 2) return AllocatorChoice::kNormal;
  std::lock_guard<std::mutex> lock(mu_);
  return set_s_.count(key) ? AllocatorChoice::kArena : AllocatorChoice::kNormal;
}

void TraceState::Freeze() {
  std::lock_guard<std::mutex> lock(mu_);
  frozen_ = true;
}

bool TraceState::frozen() const {
  std::lock_guard<std::mutex> lock(mu_);
  return frozen_;
}

std::set<AllocSiteKey> TraceState::set_s() const {
  std::lock_guard<std::mutex> lock(mu_);
  return set_s_;
}

std::optional<AllocSiteKey> TraceState::Lookup(Addr addr) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = addr_map_.find(addr);
  if (it == addr_map_.end()) return std::nullopt;
  return it->second;
}

}  // namespace rdmaflow
