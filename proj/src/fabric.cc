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

#include "rdmaflow/fabric.h"

#include <algorithm>
#include <chrono>
#include <cstring>

#include "rdmaflow/errors.h"
#include "rdmaflow/wire.h"

namespace rdmaflow {

namespace {

constexpr uint64_t kControlSlot = 4096;
constexpr uint64_t kControlRegion = 4 * kControlSlot;
// Slot offsets inside a connection's control region.
constexpr uint64_t kOutSend = 0;
constexpr uint64_t kOutRecv = kControlSlot;
constexpr uint64_t kInRecv = 2 * kControlSlot;
constexpr uint64_t kInSend = 3 * kControlSlot;
constexpr uint64_t kRpcFrameHeader = 8;
constexpr uint32_t kRpcOk = 0;
constexpr uint32_t kRpcHandlerMissing = 1;
constexpr uint32_t kRpcHandlerFailed = 2;

using Clock = std::chrono::steady_clock;

double SecondsSince(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

}  // namespace

std::string Endpoint::ToString() const {
  return "s" + std::to_string(server) + ":" + std::to_string(port);
}

void CostModel::Validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) {
    Fail(ErrorCode::kInvalidConfig, "cost model parameters must be >= 0");
  }
  for (const auto& [node, t] : compute_time) {
    if (t < 0) {
      Fail(ErrorCode::kInvalidConfig,
           "negative compute time for node " + std::to_string(node));
    }
  }
}

std::string_view VerbKindName(VerbKind k) {
  switch (k) {
    case VerbKind::kWrite: return "write";
    case VerbKind::kRead: return "read";
    case VerbKind::kSend: return "send";
    case VerbKind::kRecv: return "recv";
  }
  return "?";
}

struct Fabric::Verb {
  VerbId id = 0;
  VerbKind kind = VerbKind::kWrite;
  uint64_t tag = 0;
  uint64_t len = 0;
  uint64_t delivered = 0;
  MemorySpace* src_space = nullptr;
  Addr src_addr = 0;
  MemorySpace* dst_space = nullptr;
  Addr dst_addr = 0;
  double sim_post = 0;
  std::vector<uint64_t> script;
  size_t script_pos = 0;
  bool scripted = false;
  std::function<void(const CompletionEvent&)> internal_done;
  // Control-plane verbs are excluded from the public verb counters.
  bool internal = false;
  // Send only.
  bool matched = false;
  PostedRecv recv{};
  uint64_t attempts = 0;
  bool waiting = false;
  Clock::time_point wait_start{};
};

// ---------------------------------------------------------------------------
// RdmaDevice

RdmaDevice::RdmaDevice(Fabric& fabric, Endpoint endpoint, MemorySpace& space,
                       DeviceOptions options)
    : fabric_(fabric), endpoint_(endpoint), space_(space), options_(options) {
  if (options_.num_cqs == 0 || options_.qps_per_peer == 0) {
    Fail(ErrorCode::kInvalidConfig, "num_cqs and qps_per_peer must be >= 1");
  }
  for (uint32_t i = 0; i < options_.num_cqs; ++i) {
    cqs_.push_back(std::make_unique<CompletionQueue>());
  }
  MemorySpaceOptions cs;
  cs.capacity = 256 * kControlRegion;
  cs.max_regions = 256;
  cs.token_seed = fabric.options().seed ^ 0xc0417201ull;
  control_space_ = std::make_unique<MemorySpace>(endpoint.server, cs);
}

RdmaDevice::~RdmaDevice() = default;

std::vector<Channel> RdmaDevice::Connect(Endpoint peer) {
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  return fabric_.ConnectLocked(this, peer);
}

std::vector<Channel> RdmaDevice::Channels(Endpoint peer) const {
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  Fabric::Connection* conn = fabric_.FindConnection(endpoint_, peer);
  std::vector<Channel> out;
  if (conn == nullptr) return out;
  for (uint32_t i = 0; i < conn->data.size(); ++i) {
    const auto* qp = conn->data[i];
    out.push_back(Channel{endpoint_, peer, i, qp->qp_id, qp->cq_index});
  }
  return out;
}

Channel RdmaDevice::GetChannel(Endpoint peer, uint32_t qp_index) const {
  auto chans = Channels(peer);
  if (chans.empty()) {
    Fail(ErrorCode::kPeerUnreachable,
         endpoint_.ToString() + " is not connected to " + peer.ToString());
  }
  return chans[qp_index % chans.size()];
}

VerbId RdmaDevice::PostWrite(const Channel& ch, const RegionHandle& src,
                             uint64_t src_offset, uint64_t len, Addr dst_addr,
                             Token dst_token, uint64_t tag,
                             std::optional<double> sim_post) {
  if (len == 0) Fail(ErrorCode::kInvalidLength, "zero-length write");
  if (src_offset > src.len || len > src.len - src_offset ||
      !space_.IsRegistered(src.base + src_offset, len)) {
    Fail(ErrorCode::kNotRegistered, "write source is not registered memory");
  }
  RdmaDevice* peer = fabric_.FindDevice(ch.remote);
  if (peer == nullptr) Fail(ErrorCode::kPeerUnreachable, ch.remote.ToString());
  peer->space().CheckRemoteAccess(dst_addr, len, dst_token);
  auto verb = std::make_shared<Fabric::Verb>();
  verb->kind = VerbKind::kWrite;
  verb->tag = tag;
  verb->len = len;
  verb->src_space = &space_;
  verb->src_addr = src.base + src_offset;
  verb->dst_space = &peer->space();
  verb->dst_addr = dst_addr;
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  verb->sim_post = sim_post.value_or(fabric_.sim_now_);
  return fabric_.Enqueue(fabric_.FindQp(ch), std::move(verb));
}

VerbId RdmaDevice::PostRead(const Channel& ch, Addr src_addr, Token src_token,
                            const RegionHandle& dst, uint64_t dst_offset,
                            uint64_t len, uint64_t tag,
                            std::optional<double> sim_post) {
  if (len == 0) Fail(ErrorCode::kInvalidLength, "zero-length read");
  if (dst_offset > dst.len || len > dst.len - dst_offset ||
      !space_.IsRegistered(dst.base + dst_offset, len)) {
    Fail(ErrorCode::kNotRegistered, "read destination is not registered memory");
  }
  RdmaDevice* peer = fabric_.FindDevice(ch.remote);
  if (peer == nullptr) Fail(ErrorCode::kPeerUnreachable, ch.remote.ToString());
  peer->space().CheckRemoteAccess(src_addr, len, src_token);
  auto verb = std::make_shared<Fabric::Verb>();
  verb->kind = VerbKind::kRead;
  verb->tag = tag;
  verb->len = len;
  verb->src_space = &peer->space();
  verb->src_addr = src_addr;
  verb->dst_space = &space_;
  verb->dst_addr = dst.base + dst_offset;
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  verb->sim_post = sim_post.value_or(fabric_.sim_now_);
  return fabric_.Enqueue(fabric_.FindQp(ch), std::move(verb));
}

VerbId RdmaDevice::PostSend(const Channel& ch, const RegionHandle& src,
                            uint64_t src_offset, uint64_t len, uint64_t tag,
                            std::optional<double> sim_post) {
  if (len == 0) Fail(ErrorCode::kInvalidLength, "zero-length send");
  if (src_offset > src.len || len > src.len - src_offset ||
      !space_.IsRegistered(src.base + src_offset, len)) {
    Fail(ErrorCode::kNotRegistered, "send source is not registered memory");
  }
  auto verb = std::make_shared<Fabric::Verb>();
  verb->kind = VerbKind::kSend;
  verb->tag = tag;
  verb->len = len;
  verb->src_space = &space_;
  verb->src_addr = src.base + src_offset;
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  verb->sim_post = sim_post.value_or(fabric_.sim_now_);
  return fabric_.Enqueue(fabric_.FindQp(ch), std::move(verb));
}

VerbId RdmaDevice::PostRecv(const Channel& ch, const RegionHandle& dst,
                            uint64_t dst_offset, uint64_t len, uint64_t tag) {
  if (len == 0) Fail(ErrorCode::kInvalidLength, "zero-length recv");
  if (dst_offset > dst.len || len > dst.len - dst_offset ||
      !space_.IsRegistered(dst.base + dst_offset, len)) {
    Fail(ErrorCode::kNotRegistered, "recv buffer is not registered memory");
  }
  std::lock_guard<std::mutex> lock(fabric_.mu_);
  Fabric::PostedRecv r{&space_, dst.base + dst_offset, len, tag,
                       fabric_.next_verb_++, nullptr};
  fabric_.PostRecvLocked(fabric_.FindQp(ch), std::move(r));
  return fabric_.next_verb_ - 1;
}

std::optional<CompletionEvent> RdmaDevice::PollCq(uint32_t cq_index) {
  if (cq_index >= cqs_.size()) return std::nullopt;
  auto& cq = *cqs_[cq_index];
  std::lock_guard<std::mutex> lock(cq.mu);
  if (cq.events.empty()) return std::nullopt;
  CompletionEvent ev = cq.events.front();
  cq.events.pop_front();
  return ev;
}

std::optional<CompletionEvent> RdmaDevice::PollAnyCq() {
  const uint32_t n = static_cast<uint32_t>(cqs_.size());
  const uint32_t start = poll_cursor_.load(std::memory_order_relaxed);
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t idx = (start + i) % n;
    if (auto ev = PollCq(idx)) {
      poll_cursor_.store((idx + 1) % n, std::memory_order_relaxed);
      return ev;
    }
  }
  return std::nullopt;
}

void RdmaDevice::RegisterRpcHandler(uint32_t method, RpcHandler handler) {
  std::lock_guard<std::mutex> lock(rpc_mu_);
  rpc_handlers_[method] = std::move(handler);
}

std::vector<std::byte> RdmaDevice::RpcCall(const Channel& ch, uint32_t method,
                                           std::span<const std::byte> request) {
  if (request.size() > kControlSlot - kRpcFrameHeader) {
    Fail(ErrorCode::kInvalidLength, "rpc request exceeds one control slot");
  }
  Fabric::Connection* conn = nullptr;
  {
    std::lock_guard<std::mutex> lock(fabric_.mu_);
    conn = fabric_.FindConnection(endpoint_, ch.remote);
  }
  if (conn == nullptr) {
    Fail(ErrorCode::kPeerUnreachable,
         endpoint_.ToString() + " has no connection to " + ch.remote.ToString());
  }
  std::lock_guard<std::mutex> call_lock(call_mu_);

  const RegionHandle& region = conn->control_region;
  std::byte* frame = control_space_->Data(region.base + kOutSend, kControlSlot);
  StoreU32(frame, method);
  StoreU32(frame + 4, static_cast<uint32_t>(request.size()));
  if (!request.empty()) std::memcpy(frame + kRpcFrameHeader, request.data(), request.size());

  struct CallState {
    std::atomic<bool> response{false};
    std::atomic<bool> send_failed{false};
    CompletionStatus status = CompletionStatus::kSuccess;
  };
  auto state = std::make_shared<CallState>();
  {
    std::lock_guard<std::mutex> lock(fabric_.mu_);
    Fabric::PostedRecv r{control_space_.get(), region.base + kOutRecv,
                         kControlSlot, 0, fabric_.next_verb_++,
                         [state](const CompletionEvent& ev) {
                           state->status = ev.status;
                           state->response.store(true);
                         }};
    fabric_.PostRecvLocked(conn->control_out, std::move(r));
    auto verb = std::make_shared<Fabric::Verb>();
    verb->kind = VerbKind::kSend;
    verb->len = kRpcFrameHeader + request.size();
    verb->src_space = control_space_.get();
    verb->src_addr = region.base + kOutSend;
    verb->sim_post = fabric_.sim_now_;
    verb->internal_done = [state](const CompletionEvent& ev) {
      if (ev.status != CompletionStatus::kSuccess) state->send_failed.store(true);
    };
    verb->internal = true;
    fabric_.Enqueue(conn->control_out, std::move(verb));
  }
  bool ok = fabric_.WaitUntil(
      [&] { return state->response.load() || state->send_failed.load(); },
      fabric_.options().rpc_timeout_seconds);
  if (!ok || state->send_failed.load() ||
      state->status != CompletionStatus::kSuccess) {
    Fail(ErrorCode::kTimeout, "rpc method " + std::to_string(method) + " to " +
                                  ch.remote.ToString() + " got no response");
  }
  const std::byte* resp = control_space_->Data(region.base + kOutRecv, kControlSlot);
  uint32_t status = LoadU32(resp);
  uint32_t len = LoadU32(resp + 4);
  if (status == kRpcHandlerMissing) {
    Fail(ErrorCode::kHandlerMissing, "no handler for rpc method " +
                                         std::to_string(method) + " on " +
                                         ch.remote.ToString());
  }
  if (status != kRpcOk) {
    Fail(ErrorCode::kProtocolViolation,
         "rpc handler failed: " +
             std::string(reinterpret_cast<const char*>(resp + kRpcFrameHeader), len));
  }
  return std::vector<std::byte>(resp + kRpcFrameHeader, resp + kRpcFrameHeader + len);
}

// ---------------------------------------------------------------------------
// Fabric

Fabric::Fabric(FabricOptions options)
    : options_(std::move(options)), rng_(options_.seed) {
  options_.cost.Validate();
  if (options_.chunking.max_chunk == 0) {
    Fail(ErrorCode::kInvalidConfig, "max_chunk must be >= 1");
  }
}

Fabric::~Fabric() { StopWorkers(); }

RdmaDevice& Fabric::CreateDevice(Endpoint endpoint, MemorySpace& space,
                                 DeviceOptions options) {
  auto dev = std::make_unique<RdmaDevice>(*this, endpoint, space, options);
  std::lock_guard<std::mutex> lock(mu_);
  if (devices_.count(endpoint) != 0) {
    Fail(ErrorCode::kInvalidConfig, "duplicate endpoint " + endpoint.ToString());
  }
  auto& slot = devices_[endpoint];
  slot = std::move(dev);
  return *slot;
}

RdmaDevice* Fabric::FindDevice(Endpoint endpoint) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = devices_.find(endpoint);
  return it == devices_.end() ? nullptr : it->second.get();
}

Fabric::QueuePair* Fabric::NewQp(RdmaDevice* device, Endpoint peer,
                                 bool control) {
  auto qp = std::make_unique<QueuePair>();
  qp->qp_id = static_cast<uint32_t>(qps_.size());
  qp->device = device;
  qp->peer = peer;
  qp->control = control;
  if (!control) {
    qp->cq_index = device->next_cq_ % device->options_.num_cqs;
    ++device->next_cq_;
  }
  qps_.push_back(std::move(qp));
  return qps_.back().get();
}

std::vector<Channel> Fabric::ConnectLocked(RdmaDevice* device, Endpoint peer) {
  const Endpoint local = device->endpoint();
  auto existing = connections_.find({local, peer});
  if (existing == connections_.end()) {
    auto peer_it = devices_.find(peer);
    if (peer_it == devices_.end() || peer == local) {
      Fail(ErrorCode::kPeerUnreachable,
           "no listening device at " + peer.ToString());
    }
    RdmaDevice* remote = peer_it->second.get();
    Connection& a = connections_[{local, peer}];
    Connection& b = connections_[{peer, local}];
    for (uint32_t i = 0; i < device->options_.qps_per_peer; ++i) {
      QueuePair* q = NewQp(device, peer, false);
      QueuePair* r = NewQp(remote, local, false);
      q->remote = r;
      r->remote = q;
      a.data.push_back(q);
      b.data.push_back(r);
    }
    a.control_out = NewQp(device, peer, true);
    b.control_in = NewQp(remote, local, true);
    a.control_out->remote = b.control_in;
    b.control_in->remote = a.control_out;
    b.control_out = NewQp(remote, local, true);
    a.control_in = NewQp(device, peer, true);
    b.control_out->remote = a.control_in;
    a.control_in->remote = b.control_out;
    a.control_space = device->control_space_.get();
    b.control_space = remote->control_space_.get();
    a.control_region = a.control_space->AllocateRegion(kControlRegion, true);
    b.control_region = b.control_space->AllocateRegion(kControlRegion, true);
    PostServiceRecvLocked(device, &a);
    PostServiceRecvLocked(remote, &b);
    existing = connections_.find({local, peer});
  }
  std::vector<Channel> out;
  const auto& data = existing->second.data;
  for (uint32_t i = 0; i < data.size(); ++i) {
    out.push_back(Channel{local, peer, i, data[i]->qp_id, data[i]->cq_index});
  }
  return out;
}

Fabric::Connection* Fabric::FindConnection(Endpoint local, Endpoint peer) {
  auto it = connections_.find({local, peer});
  return it == connections_.end() ? nullptr : &it->second;
}

Fabric::QueuePair* Fabric::FindQp(const Channel& ch) {
  Connection* conn = FindConnection(ch.local, ch.remote);
  if (conn == nullptr || ch.qp_index >= conn->data.size() ||
      conn->data[ch.qp_index]->qp_id != ch.qp_id) {
    Fail(ErrorCode::kPeerUnreachable, "unknown channel " + ch.local.ToString() +
                                          " -> " + ch.remote.ToString());
  }
  return conn->data[ch.qp_index];
}

VerbId Fabric::Enqueue(QueuePair* qp, std::shared_ptr<Verb> verb) {
  verb->id = next_verb_++;
  if (options_.chunking.script) {
    verb->script = options_.chunking.script(verb->kind, verb->len);
    uint64_t sum = 0;
    for (uint64_t c : verb->script) {
      if (c == 0) Fail(ErrorCode::kInvalidConfig, "scripted chunk of 0 bytes");
      sum += c;
    }
    if (sum != verb->len) {
      Fail(ErrorCode::kInvalidConfig, "scripted chunks sum to " +
                                          std::to_string(sum) + ", verb is " +
                                          std::to_string(verb->len));
    }
    verb->scripted = true;
  }
  if (qp->send_queue.empty()) active_.push_back(qp);
  if (!verb->internal) posted_.fetch_add(1);
  qp->send_queue.push_back(verb);
  work_cv_.notify_all();
  return verb->id;
}

void Fabric::PostRecvLocked(QueuePair* qp, PostedRecv recv) {
  if (!recv.internal_done) posted_.fetch_add(1);
  qp->recv_queue.push_back(std::move(recv));
  work_cv_.notify_all();
}

void Fabric::PostServiceRecvLocked(RdmaDevice* callee, Connection* conn) {
  QueuePair* qp = conn->control_in;
  PostedRecv r{conn->control_space, conn->control_region.base + kInRecv,
               kControlSlot, 0, next_verb_++,
               [this, callee, conn, qp](const CompletionEvent& ev) {
                 RpcServe(callee, conn, qp, ev);
               }};
  PostRecvLocked(qp, std::move(r));
}

void Fabric::RpcServe(RdmaDevice* callee, Connection* conn, QueuePair* qp,
                      const CompletionEvent& ev) {
  if (ev.status != CompletionStatus::kSuccess) {
    std::lock_guard<std::mutex> lock(mu_);
    PostServiceRecvLocked(callee, conn);
    return;
  }
  const Addr base = conn->control_region.base;
  MemorySpace* cs = conn->control_space;
  const std::byte* req = cs->Data(base + kInRecv, kControlSlot);
  const uint32_t method = LoadU32(req);
  const uint32_t len = std::min<uint32_t>(LoadU32(req + 4),
                                          kControlSlot - kRpcFrameHeader);
  std::vector<std::byte> body(req + kRpcFrameHeader, req + kRpcFrameHeader + len);

  uint32_t status = kRpcOk;
  std::vector<std::byte> response;
  RpcHandler handler;
  {
    std::lock_guard<std::mutex> lock(callee->rpc_mu_);
    auto it = callee->rpc_handlers_.find(method);
    if (it != callee->rpc_handlers_.end()) handler = it->second;
  }
  if (!handler) {
    status = kRpcHandlerMissing;
  } else {
    try {
      response = handler(body);
    } catch (const std::exception& e) {
      status = kRpcHandlerFailed;
      std::string msg = e.what();
      response.assign(reinterpret_cast<const std::byte*>(msg.data()),
                      reinterpret_cast<const std::byte*>(msg.data()) + msg.size());
    }
  }
  if (response.size() > kControlSlot - kRpcFrameHeader) {
    status = kRpcHandlerFailed;
    response.clear();
  }
  std::byte* out = cs->Data(base + kInSend, kControlSlot);
  StoreU32(out, status);
  StoreU32(out + 4, static_cast<uint32_t>(response.size()));
  if (!response.empty()) std::memcpy(out + kRpcFrameHeader, response.data(), response.size());

  std::lock_guard<std::mutex> lock(mu_);
  PostServiceRecvLocked(callee, conn);
  auto verb = std::make_shared<Verb>();
  verb->kind = VerbKind::kSend;
  verb->len = kRpcFrameHeader + response.size();
  verb->src_space = cs;
  verb->src_addr = base + kInSend;
  verb->sim_post = sim_now_;
  verb->internal_done = [](const CompletionEvent&) {};
  verb->internal = true;
  Enqueue(qp, std::move(verb));
}

uint64_t Fabric::NextChunkSize(Verb& verb) {
  const uint64_t remaining = verb.len - verb.delivered;
  if (verb.scripted) return std::min(verb.script[verb.script_pos++], remaining);
  std::uniform_int_distribution<uint64_t> dist(1, options_.chunking.max_chunk);
  return std::min(dist(rng_), remaining);
}

std::function<void()> Fabric::MakeDelivery(
    RdmaDevice* device, uint32_t cq_index, CompletionEvent ev,
    std::function<void(const CompletionEvent&)> internal) {
  if (internal) {
    return [ev, internal = std::move(internal)] { internal(ev); };
  }
  // User-visible events go onto the CQ right away, under the fabric lock, so
  // a QP's completions appear in the order its verbs finished even when
  // several delivery workers race to run their deferred callbacks.
  {
    auto& cq = *device->cqs_[cq_index];
    std::lock_guard<std::mutex> lock(cq.mu);
    cq.events.push_back(ev);
  }
  completed_.fetch_add(1);
  return [] {};
}

void Fabric::CompleteLocked(QueuePair* qp, const std::shared_ptr<Verb>& verb,
                            CompletionStatus status,
                            std::vector<std::function<void()>>* done) {
  const double start = std::max(verb->sim_post, qp->sim_busy_until);
  const double finish =
      status == CompletionStatus::kSuccess ? start + options_.cost.VerbTime(verb->len) : start;
  qp->sim_busy_until = finish;
  sim_now_ = std::max(sim_now_, finish);
  CompletionEvent ev{verb->id, verb->kind, status, verb->tag,
                     verb->len, qp->qp_id, finish};
  done->push_back(MakeDelivery(qp->device, qp->cq_index, ev, verb->internal_done));
  if (verb->kind == VerbKind::kSend && verb->matched) {
    QueuePair* rq = qp->remote;
    CompletionEvent rev{verb->recv.id, VerbKind::kRecv, status, verb->recv.tag,
                        verb->len, rq->qp_id, finish};
    done->push_back(MakeDelivery(rq->device, rq->cq_index, rev,
                                 std::move(verb->recv.internal_done)));
  }
  qp->send_queue.pop_front();
  if (qp->send_queue.empty()) {
    active_.erase(std::remove(active_.begin(), active_.end(), qp), active_.end());
  }
}

void Fabric::FailRecvLocked(QueuePair* qp, PostedRecv recv,
                            CompletionStatus status, uint64_t len,
                            double sim_time,
                            std::vector<std::function<void()>>* done) {
  CompletionEvent ev{recv.id, VerbKind::kRecv, status, recv.tag, len,
                     qp->qp_id, sim_time};
  done->push_back(MakeDelivery(qp->device, qp->cq_index, ev,
                               std::move(recv.internal_done)));
}

bool Fabric::HeadReadyLocked(QueuePair* qp,
                             std::vector<std::function<void()>>* done) {
  while (!qp->send_queue.empty()) {
    auto verb = qp->send_queue.front();
    if (verb->kind != VerbKind::kSend || verb->matched) return true;
    QueuePair* peer = qp->remote;
    if (!peer->recv_queue.empty()) {
      PostedRecv recv = std::move(peer->recv_queue.front());
      peer->recv_queue.pop_front();
      if (recv.len < verb->len) {
        FailRecvLocked(peer, std::move(recv), CompletionStatus::kRecvBufferTooSmall,
                       verb->len, sim_now_, done);
        CompleteLocked(qp, verb, CompletionStatus::kRecvBufferTooSmall, done);
        continue;
      }
      verb->matched = true;
      verb->dst_space = recv.space;
      verb->dst_addr = recv.addr;
      verb->recv = std::move(recv);
      return true;
    }
    bool expired = false;
    if (threaded()) {
      if (!verb->waiting) {
        verb->waiting = true;
        verb->wait_start = Clock::now();
      }
      expired = SecondsSince(verb->wait_start) > options_.send_timeout_seconds;
    } else {
      expired = ++verb->attempts > options_.send_retry_limit;
    }
    if (!expired) return false;
    CompleteLocked(qp, verb, CompletionStatus::kNoPostedReceive, done);
  }
  return false;
}

bool Fabric::NextChunkLocked(ChunkWork* work,
                             std::vector<std::function<void()>>* done) {
  std::vector<QueuePair*> ready;
  // HeadReadyLocked may complete verbs and shrink active_, so iterate a copy.
  const std::vector<QueuePair*> snapshot = active_;
  for (QueuePair* qp : snapshot) {
    if (qp->busy) continue;
    if (options_.withhold && !qp->send_queue.empty()) {
      const Verb& head = *qp->send_queue.front();
      if (!head.internal && options_.withhold(head.kind, head.tag)) continue;
    }
    if (HeadReadyLocked(qp, done)) ready.push_back(qp);
  }
  if (ready.empty()) return false;
  QueuePair* qp = ready.front();
  if (ready.size() > 1) {
    std::uniform_int_distribution<size_t> pick(0, ready.size() - 1);
    qp = ready[pick(rng_)];
  }
  auto verb = qp->send_queue.front();
  qp->busy = true;
  work->verb = verb;
  work->qp = qp;
  work->offset = verb->delivered;
  work->len = NextChunkSize(*verb);
  return true;
}

void Fabric::DeliverChunk(const ChunkWork& work) {
  const Verb& v = *work.verb;
  const std::byte* src = v.src_space->Data(v.src_addr + work.offset, work.len);
  v.dst_space->WriteAscending(v.dst_addr + work.offset, src, work.len);
}

void Fabric::FinishChunkLocked(const ChunkWork& work,
                               std::vector<std::function<void()>>* done) {
  work.qp->busy = false;
  work.verb->delivered += work.len;
  if (!work.verb->internal) {
    chunks_.fetch_add(1);
    wire_bytes_.fetch_add(work.len);
  }
  if (work.verb->delivered == work.verb->len) {
    CompleteLocked(work.qp, work.verb, CompletionStatus::kSuccess, done);
  }
  work_cv_.notify_all();
}

size_t Fabric::Progress(size_t max_chunks) {
  size_t delivered = 0;
  while (delivered < max_chunks) {
    ChunkWork work;
    std::vector<std::function<void()>> done;
    bool have = false;
    {
      std::lock_guard<std::mutex> lock(mu_);
      have = NextChunkLocked(&work, &done);
    }
    for (auto& fn : done) fn();
    if (!have) break;
    DeliverChunk(work);
    done.clear();
    {
      std::lock_guard<std::mutex> lock(mu_);
      FinishChunkLocked(work, &done);
    }
    for (auto& fn : done) fn();
    ++delivered;
  }
  return delivered;
}

void Fabric::RunUntilIdle() {
  while (Progress(256) > 0) {
  }
}

bool Fabric::Idle() const {
  std::lock_guard<std::mutex> lock(mu_);
  return active_.empty();
}

double Fabric::sim_now() const {
  std::lock_guard<std::mutex> lock(mu_);
  return sim_now_;
}

uint8_t Fabric::PeekByte(Endpoint endpoint, Addr addr) {
  RdmaDevice* dev = FindDevice(endpoint);
  if (dev == nullptr) Fail(ErrorCode::kPeerUnreachable, endpoint.ToString());
  return dev->space().LoadByte(addr);
}

bool Fabric::WaitUntil(const std::function<bool()>& done,
                       double timeout_seconds) {
  const auto start = Clock::now();
  while (!done()) {
    if (SecondsSince(start) > timeout_seconds) return false;
    if (threaded()) {
      std::this_thread::sleep_for(std::chrono::microseconds(50));
      continue;
    }
    if (Progress(64) == 0 && Idle()) return done();
  }
  return true;
}

void Fabric::StartWorkers(int count) {
  if (!workers_.empty()) return;
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = false;
  }
  for (int i = 0; i < count; ++i) workers_.emplace_back([this] { WorkerLoop(); });
}

void Fabric::StopWorkers() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  work_cv_.notify_all();
  for (auto& t : workers_) t.join();
  workers_.clear();
}

void Fabric::WorkerLoop() {
  for (;;) {
    ChunkWork work;
    std::vector<std::function<void()>> done;
    bool have = false;
    {
      std::unique_lock<std::mutex> lock(mu_);
      for (;;) {
        have = NextChunkLocked(&work, &done);
        if (have || !done.empty() || stop_) break;
        work_cv_.wait_for(lock, std::chrono::milliseconds(1));
      }
    }
    for (auto& fn : done) fn();
    if (!have) {
      std::lock_guard<std::mutex> lock(mu_);
      if (stop_) return;
      continue;
    }
    DeliverChunk(work);
    done.clear();
    {
      std::lock_guard<std::mutex> lock(mu_);
      FinishChunkLocked(work, &done);
    }
    for (auto& fn : done) fn();
  }
}

}  // namespace rdmaflow
