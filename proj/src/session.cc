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

#include <algorithm>
#include <chrono>
#include <exception>
#include <thread>

#include "executor.h"
#include "rdmaflow/errors.h"
#include "rdmaflow/runtime.h"

namespace rdmaflow {

std::string_view TransferModeName(TransferMode m) {
  switch (m) {
    case TransferMode::kZeroCopy: return "zerocp";
    case TransferMode::kCopy: return "cp";
    case TransferMode::kRpc: return "rpc";
  }
  return "?";
}

std::optional<TransferMode> ParseTransferMode(std::string_view s) {
  if (s == "zerocp") return TransferMode::kZeroCopy;
  if (s == "cp") return TransferMode::kCopy;
  if (s == "rpc") return TransferMode::kRpc;
  return std::nullopt;
}

struct Session::Server {
  ServerId id = 0;
  std::unique_ptr<MemorySpace> space;
  std::unique_ptr<ArenaAllocator> arena;
  std::unique_ptr<ArenaAllocator> heap;
  RdmaDevice* device = nullptr;
  std::unique_ptr<Executor> exec;
};

Session::Session(const DataFlowGraph& g, const Placement& placement,
                 const Annotations& annotations, SessionOptions options)
    : options_(std::move(options)) {
  tracing_ = options_.tracing.value_or(options_.mode == TransferMode::kZeroCopy);
  if (options_.kernels == nullptr) options_.kernels = &kernels::ActiveKernels();
  if (options_.arena_bytes + options_.heap_bytes > options_.space_bytes) {
    Fail(ErrorCode::kInvalidConfig, "arena and heap exceed the memory space");
  }
  partition_ = Partition(g, placement);
  shapes_ = InferShapes(partition_.graph, annotations);
  const auto& cross = partition_.cross_edges;
  const ClassifyMode classify = options_.mode == TransferMode::kRpc
                                    ? ClassifyMode::kAuto
                                    : options_.classify;
  plan_ = MakePlan(partition_.graph, shapes_, cross,
                   ClassifyEdges(partition_.graph, shapes_, cross, classify));
  for (size_t i = 0; i < cross.size(); ++i) {
    TransferKind kind = TransferKind::kRpc;
    if (options_.mode != TransferMode::kRpc) {
      kind = plan_.entries[i].mechanism == Mechanism::kStatic
                 ? TransferKind::kRdmaStatic
                 : TransferKind::kRdmaDynamic;
    }
    SetTransferKind(partition_, i, kind);
  }

  std::set<ServerId> ids;
  for (const auto& [n, s] : placement) ids.insert(s);
  servers_.assign(ids.begin(), ids.end());

  // Queue pairs: edges between the same two servers take consecutive
  // indices. RPC edges need one QP each because a send waiting for a ring
  // slot holds back everything queued behind it.
  std::vector<uint32_t> qp_index(cross.size());
  std::map<std::pair<ServerId, ServerId>, uint32_t> per_pair;
  uint32_t max_per_pair = 0;
  for (size_t i = 0; i < cross.size(); ++i) {
    auto key = std::minmax(cross[i].producer_server, cross[i].consumer_server);
    qp_index[i] = per_pair[key]++;
    max_per_pair = std::max(max_per_pair, per_pair[key]);
  }
  DeviceOptions dev = options_.device;
  if (options_.mode == TransferMode::kRpc) {
    dev.qps_per_peer = std::max(dev.qps_per_peer, max_per_pair);
  }

  fabric_ = std::make_unique<Fabric>(options_.fabric);
  for (ServerId s : servers_) {
    auto srv = std::make_unique<Server>();
    srv->id = s;
    MemorySpaceOptions mo;
    mo.capacity = options_.space_bytes;
    mo.token_seed = options_.seed * 7919 + s;
    srv->space = std::make_unique<MemorySpace>(s, mo);
    srv->arena = std::make_unique<ArenaAllocator>(*srv->space, options_.arena_bytes, true);
    srv->heap = std::make_unique<ArenaAllocator>(*srv->space, options_.heap_bytes, false);
    srv->device = &fabric_->CreateDevice({s, 1}, *srv->space, dev);
    by_server_[s] = std::move(srv);
  }
  for (const CrossEdge& ce : cross) {
    server(ce.producer_server).device->Connect(server(ce.consumer_server).device->endpoint());
  }
  if (options_.mode != TransferMode::kRpc) {
    PreallocateAndDistribute(
        plan_, [this](ServerId s) -> ArenaAllocator& { return *server(s).arena; },
        [this](ServerId s) -> RdmaDevice& { return *server(s).device; });
  }

  arrival_ = std::make_unique<std::atomic<double>[]>(std::max<size_t>(cross.size(), 1));
  for (size_t i = 0; i < cross.size(); ++i) arrival_[i].store(0);
  ExecutorShared shared;
  shared.fabric = fabric_.get();
  shared.graph = &partition_.graph;
  shared.kernels = options_.kernels;
  shared.seed = options_.seed;
  shared.tracing = tracing_;
  shared.arrival = arrival_.get();
  shared.capture = options_.capture_edges ? &capture_ : nullptr;
  shared.audit_iteration = options_.audit_iteration;
  for (ServerId s : servers_) {
    Server& srv = server(s);
    std::vector<NodeId> nodes;
    auto it = partition_.server_nodes.find(s);
    if (it != partition_.server_nodes.end()) nodes = it->second;
    srv.exec = std::make_unique<Executor>(s, shared, *srv.space, *srv.arena,
                                          *srv.heap, *srv.device, nodes);
  }

  for (size_t i = 0; i < cross.size(); ++i) {
    const CrossEdge& ce = cross[i];
    const PlanEntry& p = plan_.entries[i];
    Server& prod = server(ce.producer_server);
    Server& cons = server(ce.consumer_server);
    const Channel ch_p = prod.device->GetChannel(cons.device->endpoint(), qp_index[i]);
    const Channel ch_c = cons.device->GetChannel(prod.device->endpoint(), qp_index[i]);
    const RemoteRegion remote{p.remote_addr, p.remote_token, p.remote_len};
    if (options_.mode == TransferMode::kRpc) {
      prod.exec->SetRpcSender(
          ce.send_node,
          std::make_unique<RpcSender>(*prod.device, ch_p, p.rank, *prod.arena,
                                      static_cast<uint64_t>(i) << 32,
                                      fabric_->cost()));
      auto recv = std::make_unique<RpcReceiver>(*cons.device, ch_c, *cons.arena,
                                                p.rank, *cons.heap, ce.recv_node);
      recv->PostAll();
      cons.exec->AddRecvResident(static_cast<int64_t>(recv->ring().len));
      cons.exec->SetRpcReceiver(ce.recv_node, std::move(recv));
    } else if (p.mechanism == Mechanism::kStatic) {
      prod.exec->SetStaticSender(
          ce.send_node, std::make_unique<StaticSender>(*fabric_, *prod.device, ch_p,
                                                       remote, *prod.arena));
      cons.exec->SetStaticReceiver(
          ce.recv_node,
          std::make_unique<StaticReceiver>(*cons.space, p.receiver_buffer,
                                           p.shape.StaticDims(), p.elem_type));
      cons.exec->AddRecvResident(static_cast<int64_t>(p.receiver_buffer.len));
    } else {
      prod.exec->SetDynSender(
          ce.send_node, std::make_unique<DynSender>(*fabric_, *prod.device, ch_p,
                                                    remote, p.rank, *prod.arena));
      cons.exec->SetDynReceiver(
          ce.recv_node, std::make_unique<DynReceiver>(*cons.device, ch_c,
                                                      p.receiver_buffer, p.rank,
                                                      *cons.arena));
      cons.exec->AddRecvResident(static_cast<int64_t>(p.receiver_buffer.len));
    }
  }
}

Session::~Session() {
  if (fabric_ && fabric_->threaded()) fabric_->StopWorkers();
  for (auto& [id, srv] : by_server_) srv->exec.reset();
  fabric_.reset();
  by_server_.clear();
}

Session::Server& Session::server(ServerId s) const {
  auto it = by_server_.find(s);
  if (it == by_server_.end()) {
    Fail(ErrorCode::kInvalidConfig, "no server " + std::to_string(s));
  }
  return *it->second;
}

MemorySpace& Session::space(ServerId s) { return *server(s).space; }
ArenaAllocator& Session::arena(ServerId s) { return *server(s).arena; }
ArenaAllocator& Session::heap(ServerId s) { return *server(s).heap; }
const TraceState& Session::trace(ServerId s) const { return server(s).exec->trace(); }
const TraceState& Session::audit_trace(ServerId s) const {
  return server(s).exec->audit();
}

Tensor Session::variable(NodeId n) const {
  return server(partition_.graph.node(n).placement).exec->variable(n);
}

RunReport Session::Run(int64_t n) {
  RunReport report;
  const bool threaded = options_.driver == DriverKind::kThreaded;
  if (threaded) fabric_->StartWorkers(std::max(1, options_.delivery_threads));
  struct StopGuard {
    Fabric* f;
    bool on;
    ~StopGuard() {
      if (on) f->StopWorkers();
    }
  } guard{fabric_.get(), threaded};
  for (int64_t k = 0; k < n; ++k) {
    const int64_t it = next_iteration_++;
    IterationStats st;
    RunIteration(it, &st);
    report.iterations.push_back(std::move(st));
    if (it == 1 && tracing_) {
      for (auto& [id, srv] : by_server_) srv->exec->FreezeTrace();
      RelocateVariables(&report);
    }
    if (options_.audit_iteration && *options_.audit_iteration == it) {
      for (auto& [id, srv] : by_server_) srv->exec->FreezeAudit();
    }
  }
  for (auto& [id, srv] : by_server_) {
    for (auto& [e, b] : srv->exec->TakeEdgeBytes()) report.edge_bytes[e] += b;
  }
  return report;
}

void Session::RelocateVariables(RunReport* report) {
  for (auto& [id, srv] : by_server_) {
    report->relocation_bytes += srv->exec->RelocateVariables();
  }
}

void Session::RunIteration(int64_t it, IterationStats* out) {
  const double start = sim_clock_;
  for (auto& [id, srv] : by_server_) srv->exec->BeginIteration(it, start);
  const auto wall0 = std::chrono::steady_clock::now();
  if (options_.driver == DriverKind::kThreaded) {
    DriveThreaded();
  } else {
    DriveCooperative();
  }
  const auto wall1 = std::chrono::steady_clock::now();
  double end = start;
  out->iteration = it;
  for (auto& [id, srv] : by_server_) {
    end = std::max(end, srv->exec->max_finish());
    ServerIterationStats s;
    srv->exec->EndIteration(&s);
    out->servers.push_back(s);
  }
  out->simulated_time_us = (end - start) * 1e6;
  out->wall_time_us =
      std::chrono::duration<double, std::micro>(wall1 - wall0).count();
  sim_clock_ = end;
}

void Session::DriveCooperative() {
  uint64_t idle = 0;
  for (;;) {
    bool all_done = true;
    for (auto& [id, srv] : by_server_) all_done &= srv->exec->Done();
    if (all_done) return;
    size_t progress = 0;
    for (auto& [id, srv] : by_server_) progress += srv->exec->PumpCompletions(1024);
    for (auto& [id, srv] : by_server_) progress += srv->exec->RunSteps(64);
    progress += fabric_->Progress(256);
    if (progress != 0) {
      idle = 0;
    } else if (++idle > options_.watchdog_rounds) {
      std::string pending;
      for (auto& [id, srv] : by_server_) {
        pending += " s" + std::to_string(id) + ":" + srv->exec->PendingOps();
      }
      Fail(ErrorCode::kDeadlock, "no progress for " +
                                     std::to_string(options_.watchdog_rounds) +
                                     " rounds; unfinished:" + pending);
    }
  }
}

void Session::DriveThreaded() {
  std::atomic<bool> stop{false};
  std::atomic<uint64_t> progress{0};
  std::mutex err_mu;
  std::exception_ptr err;
  std::vector<std::thread> threads;
  for (auto& [id, srv] : by_server_) {
    Executor* ex = srv->exec.get();
    for (int t = 0; t < std::max(1, options_.executor_threads); ++t) {
      threads.emplace_back([&, ex] {
        try {
          while (!stop.load(std::memory_order_relaxed)) {
            const size_t p = ex->PumpCompletions(64) + ex->RunSteps(16);
            if (p) {
              progress.fetch_add(p, std::memory_order_relaxed);
            } else {
              std::this_thread::yield();
            }
          }
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!err) err = std::current_exception();
          stop.store(true);
        }
      });
    }
  }
  // Progress includes chunk deliveries so a long transfer does not count
  // as a stall.
  uint64_t last = ~0ULL;
  auto last_change = std::chrono::steady_clock::now();
  std::string deadlock;
  while (!stop.load()) {
    bool all_done = true;
    for (auto& [id, srv] : by_server_) all_done &= srv->exec->Done();
    if (all_done) break;
    const uint64_t now = progress.load() + fabric_->delivered_chunks();
    const auto t = std::chrono::steady_clock::now();
    if (now != last) {
      last = now;
      last_change = t;
    } else if (std::chrono::duration<double>(t - last_change).count() >
               options_.watchdog_seconds) {
      for (auto& [id, srv] : by_server_) {
        deadlock += " s" + std::to_string(id) + ":" + srv->exec->PendingOps();
      }
      break;
    }
    std::this_thread::sleep_for(std::chrono::microseconds(50));
  }
  stop.store(true);
  for (auto& t : threads) t.join();
  if (err) std::rethrow_exception(err);
  if (!deadlock.empty()) {
    Fail(ErrorCode::kDeadlock, "no progress; unfinished:" + deadlock);
  }
}

}  // namespace rdmaflow
