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

#include "executor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "rdmaflow/errors.h"

namespace rdmaflow {
namespace {

uint64_t SplitMix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream seed for one (run seed, iteration, node) triple.
uint64_t Mix(uint64_t seed, uint64_t iteration, uint64_t node) {
  return SplitMix(SplitMix(SplitMix(seed) ^ iteration) ^ node);
}

// Deterministic fill: floats in [-1, 1) for F32, raw bytes otherwise.
void Fill(const Tensor& t, std::mt19937_64& rng, float scale) {
  if (t.elem_type == ElemType::kF32) {
    float* p = t.f32();
    const uint64_t n = t.num_elements();
    for (uint64_t i = 0; i < n; ++i) {
      const float u = static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
      p[i] = (2.0f * u - 1.0f) * scale;
    }
  } else {
    std::byte* p = t.data();
    const uint64_t n = t.bytes();
    for (uint64_t i = 0; i < n; ++i) p[i] = static_cast<std::byte>(rng());
  }
}

void RequireF32(const Tensor& t, const Node& n) {
  if (t.elem_type != ElemType::kF32) {
    Fail(ErrorCode::kBadElemType, n.name + " needs f32 input");
  }
}

}  // namespace

Executor::Executor(ServerId server, const ExecutorShared& shared,
                   MemorySpace& space, ArenaAllocator& arena,
                   ArenaAllocator& heap, RdmaDevice& device,
                   const std::vector<NodeId>& nodes)
    : server_(server),
      shared_(shared),
      space_(space),
      arena_(arena),
      heap_(heap),
      device_(device),
      sched_(*this) {
  const DataFlowGraph& g = *shared_.graph;
  for (NodeId n : nodes) {
    index_[n] = static_cast<uint32_t>(ops_.size());
    auto st = std::make_unique<OpState>();
    st->node = &g.node(n);
    ops_.push_back(std::move(st));
  }
  for (auto& st : ops_) {
    for (EdgeId e : st->node->outputs) {
      const Edge& ed = g.edge(e);
      auto it = index_.find(ed.dst);
      if (it == index_.end()) {
        Fail(ErrorCode::kInvalidGraph, "edge " + std::to_string(e) +
                                           " leaves server " + std::to_string(server));
      }
      st->consumers.push_back(Consumer{it->second, ed.dst_port, e});
    }
  }
}

Executor::~Executor() {
  // Endpoints and tensors go before the counters their release hooks use.
  for (auto& st : ops_) {
    st->result = Tensor{};
    st->inputs.clear();
    st->static_send.reset();
    st->static_recv.reset();
    st->dyn_send.reset();
    st->dyn_recv.reset();
    st->rpc_send.reset();
    st->rpc_recv.reset();
    st->storage = Tensor{};
  }
}

Executor::OpState& Executor::StateOf(NodeId n) { return *ops_.at(index_.at(n)); }

void Executor::SetStaticSender(NodeId n, std::unique_ptr<StaticSender> ep) {
  StateOf(n).static_send = std::move(ep);
}
void Executor::SetStaticReceiver(NodeId n, std::unique_ptr<StaticReceiver> ep) {
  StateOf(n).static_recv = std::move(ep);
}
void Executor::SetDynSender(NodeId n, std::unique_ptr<DynSender> ep) {
  StateOf(n).dyn_send = std::move(ep);
}
void Executor::SetDynReceiver(NodeId n, std::unique_ptr<DynReceiver> ep) {
  StateOf(n).dyn_recv = std::move(ep);
}
void Executor::SetRpcSender(NodeId n, std::unique_ptr<RpcSender> ep) {
  StateOf(n).rpc_send = std::move(ep);
}
void Executor::SetRpcReceiver(NodeId n, std::unique_ptr<RpcReceiver> ep) {
  StateOf(n).rpc_recv = std::move(ep);
}

void Executor::AddRecvResident(int64_t bytes) {
  const int64_t now = recv_resident_.fetch_add(bytes) + bytes;
  int64_t peak = recv_resident_peak_.load();
  while (now > peak && !recv_resident_peak_.compare_exchange_weak(peak, now)) {
  }
}

void Executor::OnRecvBufferReleased(const RegionHandle& h) {
  recv_resident_.fetch_sub(static_cast<int64_t>(h.len));
}

void Executor::BeginIteration(int64_t iteration, double sim_start) {
  iteration_ = iteration;
  sim_start_ = sim_start;
  audit_active_ = shared_.audit_iteration && *shared_.audit_iteration == iteration;
  done_count_.store(0);
  arena_.StartWindow();
  copies_at_start_ = attributed_.Snapshot();
  arena_at_start_ = arena_.current_resident();
  recv_at_start_ = recv_resident_.load();
  recv_resident_peak_.store(recv_at_start_);
  steps_at_start_ = sched_.steps();
  polls_at_start_ = sched_.polls();
  for (auto* c : {&transfers_, &bytes_sent_, &wire_bytes_, &writes_, &reads_,
                  &sends_, &violations_}) {
    c->store(0);
  }
  sched_.ResetPhases(ops_.size());
  std::vector<uint32_t> roots;
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (uint32_t i = 0; i < ops_.size(); ++i) {
      OpState& st = *ops_[i];
      st.inputs.assign(st.node->inputs.size(), Tensor{});
      st.missing = static_cast<uint32_t>(st.node->inputs.size());
      st.ready_at = sim_start;
      st.finish_at = sim_start;
      st.gate.store(0);
      st.done.store(false);
      if (st.missing == 0) roots.push_back(i);
    }
  }
  for (uint32_t i : roots) sched_.Enqueue({i, Phase::kRun});
}

size_t Executor::PumpCompletions(size_t max_events) {
  size_t handled = 0;
  while (handled < max_events) {
    std::optional<CompletionEvent> ev = device_.PollAnyCq();
    if (!ev) break;
    ++handled;
    if (ev->status != CompletionStatus::kSuccess) {
      Fail(ErrorCode::kProtocolViolation,
           "verb " + std::to_string(ev->verb_id) + " on server " +
               std::to_string(server_) + " failed");
    }
    const DecodedTag tag = DecodeTag(ev->user_tag);
    auto it = index_.find(tag.node);
    if (it == index_.end()) {
      Fail(ErrorCode::kProtocolViolation, "completion for a foreign node");
    }
    OpState& st = *ops_[it->second];
    switch (tag.kind) {
      case TagKind::kSendDone:
        if (!st.rpc_send || st.rpc_send->OnFragmentDone()) GateDown(it->second);
        break;
      case TagKind::kReadDone:
        GateDown(it->second);
        break;
      case TagKind::kSlotFilled:
        st.rpc_recv->OnSlotFilled(tag.slot, ev->byte_len);
        break;
      default:
        Fail(ErrorCode::kProtocolViolation, "unknown completion tag");
    }
  }
  return handled;
}

size_t Executor::RunSteps(size_t budget) {
  size_t progress = 0;
  for (size_t i = 0; i < budget; ++i) {
    const StepOutcome o = sched_.Step();
    if (o == StepOutcome::kIdle) break;
    if (o != StepOutcome::kPolledPending) ++progress;
  }
  return progress;
}

double Executor::max_finish() const {
  double m = sim_start_;
  for (const auto& st : ops_) m = std::max(m, st->finish_at);
  return m;
}

std::string Executor::PendingOps() const {
  std::string out;
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& st : ops_) {
    if (!st->done.load()) out += " " + st->node->name;
  }
  for (const Activation& a : sched_.queue().Snapshot()) {
    out += " [queued " + ops_[a.op]->node->name + "]";
  }
  return out;
}

void Executor::EndIteration(ServerIterationStats* out) {
  out->server = server_;
  out->transfers = transfers_.load();
  out->bytes_sent = bytes_sent_.load();
  out->wire_bytes = wire_bytes_.load();
  out->writes_posted = writes_.load();
  out->reads_posted = reads_.load();
  out->sends_posted = sends_.load();
  const CopyCounterSnapshot now = attributed_.Snapshot();
  out->payload_bytes_copied = now.payload_bytes_copied - copies_at_start_.payload_bytes_copied;
  out->payload_copy_events = now.payload_copy_events - copies_at_start_.payload_copy_events;
  out->serialize_bytes = now.serialize_bytes - copies_at_start_.serialize_bytes;
  out->arena_resident_start = arena_at_start_;
  out->arena_resident_end = arena_.current_resident();
  out->arena_peak_bytes = arena_.window_peak();
  out->recv_resident_start = static_cast<uint64_t>(recv_at_start_);
  out->recv_resident_end = static_cast<uint64_t>(recv_resident_.load());
  out->recv_resident_peak = static_cast<uint64_t>(recv_resident_peak_.load());
  out->polls = sched_.polls() - polls_at_start_;
  out->scheduler_steps = sched_.steps() - steps_at_start_;
  out->soundness_violations = violations_.load();
  out->simulated_time_us = (max_finish() - sim_start_) * 1e6;
}

ExecMode Executor::ModeOf(uint32_t op) const { return ops_[op]->node->exec_mode; }

Tensor Executor::Allocate(OpState& st, std::vector<uint64_t> dims, ElemType t) {
  const AllocSiteKey key{st.node->id, st.alloc_index++};
  const bool use_arena =
      shared_.tracing && iteration_ >= 2 &&
      trace_.ChooseAllocator(key, iteration_) == AllocatorChoice::kArena;
  Tensor out = AllocateTensor(use_arena ? arena_ : heap_, std::move(dims), t);
  if (shared_.tracing && iteration_ == 1) trace_.TraceAlloc(out.addr(), key);
  if (audit_active_) audit_.TraceAlloc(out.addr(), key);
  return out;
}

void Executor::Publish(OpState& st, const Tensor& out, double at) {
  std::vector<uint32_t> ready;
  for (const Consumer& c : st.consumers) {
    if (shared_.capture) shared_.capture->Record(iteration_, c.edge, out);
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (const Consumer& c : st.consumers) {
      OpState& d = *ops_[c.op];
      d.inputs[c.port] = out;
      d.ready_at = std::max(d.ready_at, at);
      if (--d.missing == 0) ready.push_back(c.op);
    }
  }
  for (uint32_t op : ready) sched_.Enqueue({op, Phase::kRun});
}

void Executor::MarkDone(OpState& st, double at) {
  st.finish_at = at;
  st.done.store(true);
  done_count_.fetch_add(1);
}

void Executor::GateDown(uint32_t op) {
  if (ops_[op]->gate.fetch_sub(1) == 1) sched_.Enqueue({op, Phase::kComplete});
}

void Executor::RunSync(uint32_t op) {
  OpState& st = *ops_[op];
  std::vector<Tensor> in;
  double ready;
  {
    std::lock_guard<std::mutex> lock(mu_);
    in = std::move(st.inputs);
    st.inputs.clear();
    ready = st.ready_at;
  }
  st.alloc_index = 0;
  Tensor out = Compute(st, in);
  in.clear();
  const auto& overrides = shared_.fabric->cost().compute_time;
  auto it = overrides.find(st.node->id);
  const double t = it != overrides.end() ? it->second : st.node->attrs.compute_time;
  Publish(st, out, ready + t);
  MarkDone(st, ready + t);
}

Tensor Executor::Compute(OpState& st, std::vector<Tensor>& in) {
  const Node& n = *st.node;
  const kernels::KernelTable& k = *shared_.kernels;
  std::mt19937_64 rng(Mix(shared_.seed, static_cast<uint64_t>(iteration_), n.id));
  switch (n.kind) {
    case NodeKind::kInput: {
      Tensor t = Allocate(st, n.attrs.shape.StaticDims(), n.attrs.elem_type);
      Fill(t, rng, 1.0f);
      return t;
    }
    case NodeKind::kVariable: {
      if (!st.storage.buffer) {
        st.storage = Allocate(st, n.attrs.shape.StaticDims(), n.attrs.elem_type);
        std::mt19937_64 init(Mix(shared_.seed, 0, n.id));
        Fill(st.storage, init, 0.1f);
      } else if (audit_active_) {
        // Persistent buffers were allocated before the audited iteration.
        audit_.TraceAlloc(st.storage.addr(), {n.id, 0});
      }
      return st.storage;
    }
    case NodeKind::kMatMul: {
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      RequireF32(a, n);
      RequireF32(b, n);
      if (a.dims.size() != 2 || b.dims.size() != 2 || a.dims[1] != b.dims[0]) {
        Fail(ErrorCode::kShapeMismatch, n.name + ": matmul operands disagree");
      }
      Tensor c = Allocate(st, {a.dims[0], b.dims[1]}, ElemType::kF32);
      k.matmul(a.f32(), b.f32(), c.f32(), a.dims[0], a.dims[1], b.dims[1]);
      return c;
    }
    case NodeKind::kAdd: {
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      RequireF32(a, n);
      RequireF32(b, n);
      if (a.dims.size() != b.dims.size()) {
        Fail(ErrorCode::kShapeMismatch, n.name + ": add ranks differ");
      }
      for (size_t i = 0; i < a.dims.size(); ++i) {
        if (b.dims[i] != a.dims[i] && b.dims[i] != 1) {
          Fail(ErrorCode::kShapeMismatch, n.name + ": add dims differ");
        }
      }
      Tensor c = Allocate(st, a.dims, ElemType::kF32);
      if (a.dims == b.dims) {
        k.add(a.f32(), b.f32(), c.f32(), a.num_elements());
        return c;
      }
      // Broadcast b: walk a's index space and clamp b's broadcast dims to 0.
      const size_t r = a.dims.size();
      std::vector<uint64_t> bstride(r, 0);
      uint64_t s = 1;
      for (size_t i = r; i-- > 0;) {
        bstride[i] = b.dims[i] == 1 ? 0 : s;
        s *= b.dims[i];
      }
      std::vector<uint64_t> idx(r, 0);
      const uint64_t total = a.num_elements();
      const float* pa = a.f32();
      const float* pb = b.f32();
      float* pc = c.f32();
      for (uint64_t i = 0; i < total; ++i) {
        uint64_t bi = 0;
        for (size_t d = 0; d < r; ++d) bi += idx[d] * bstride[d];
        pc[i] = pa[i] + pb[bi];
        for (size_t d = r; d-- > 0;) {
          if (++idx[d] < a.dims[d]) break;
          idx[d] = 0;
        }
      }
      return c;
    }
    case NodeKind::kSigmoid: {
      RequireF32(in[0], n);
      Tensor c = Allocate(st, in[0].dims, ElemType::kF32);
      k.sigmoid(in[0].f32(), c.f32(), in[0].num_elements());
      return c;
    }
    case NodeKind::kReduceMax: {
      RequireF32(in[0], n);
      Tensor c = Allocate(st, {1}, ElemType::kF32);
      c.f32()[0] = k.reduce_max(in[0].f32(), in[0].num_elements());
      return c;
    }
    case NodeKind::kApplyGrad: {
      Tensor var = in[0];
      RequireF32(var, n);
      for (size_t i = 1; i < in.size(); ++i) {
        RequireF32(in[i], n);
        if (in[i].num_elements() != var.num_elements()) {
          Fail(ErrorCode::kShapeMismatch, n.name + ": gradient size differs");
        }
        k.axpy(-n.attrs.scale, in[i].f32(), var.f32(), var.num_elements());
      }
      return var;
    }
    case NodeKind::kInPlaceScale: {
      RequireF32(in[0], n);
      k.scale(in[0].f32(), n.attrs.scale, in[0].num_elements());
      return in[0];
    }
    case NodeKind::kConcatDyn: {
      const Tensor& first = in[0];
      std::vector<uint64_t> trailing(first.dims.begin() + 1, first.dims.end());
      uint64_t row_bytes = ElemSize(first.elem_type);
      for (uint64_t d : trailing) row_bytes *= d;
      std::vector<std::pair<const std::byte*, uint64_t>> rows;  // base, count
      for (const Tensor& t : in) {
        if (t.dims.size() != first.dims.size() || t.elem_type != first.elem_type ||
            !std::equal(t.dims.begin() + 1, t.dims.end(), trailing.begin())) {
          Fail(ErrorCode::kShapeMismatch, n.name + ": concat operands disagree");
        }
        rows.emplace_back(t.data(), t.dims[0]);
      }
      const uint64_t span = n.attrs.max_rows - n.attrs.min_rows + 1;
      const uint64_t r = n.attrs.min_rows + rng() % span;
      std::vector<uint64_t> dims{r};
      dims.insert(dims.end(), trailing.begin(), trailing.end());
      Tensor out = Allocate(st, dims, first.elem_type);
      uint64_t total = 0;
      for (auto& [p, c] : rows) total += c;
      std::byte* dst = out.data();
      for (uint64_t i = 0; i < r && row_bytes; ++i) {
        if (total == 0) {
          std::memset(dst + i * row_bytes, 0, row_bytes);
          continue;
        }
        uint64_t src = i % total;
        for (auto& [p, c] : rows) {
          if (src < c) {
            std::memcpy(dst + i * row_bytes, p + src * row_bytes, row_bytes);
            break;
          }
          src -= c;
        }
      }
      return out;
    }
    case NodeKind::kGenGrad: {
      RequireF32(in[0], n);
      Tensor g = Allocate(st, in[0].dims, ElemType::kF32);
      Fill(g, rng, 1.0f);
      k.axpy(n.attrs.scale, in[0].f32(), g.f32(), g.num_elements());
      return g;
    }
    default:
      Fail(ErrorCode::kInvalidGraph,
           std::string(NodeKindName(n.kind)) + " is not a compute node");
  }
}

double Executor::ArrivalOf(const OpState& st) const {
  const double a = shared_.arrival[st.node->attrs.cross_index].load(std::memory_order_acquire);
  return std::max(sim_start_, a);
}

void Executor::StartSend(uint32_t op) {
  OpState& st = *ops_[op];
  Tensor t;
  double ready;
  {
    std::lock_guard<std::mutex> lock(mu_);
    t = std::move(st.inputs[0]);
    st.inputs.clear();
    ready = st.ready_at;
  }
  if (shared_.tracing && iteration_ == 1) trace_.MarkTransferred(t.addr());
  if (audit_active_) audit_.MarkTransferred(t.addr());
  if (shared_.tracing && iteration_ >= 2 && !t.registered()) violations_.fetch_add(1);
  transfers_.fetch_add(1);
  bytes_sent_.fetch_add(t.bytes());
  {
    std::lock_guard<std::mutex> lock(edge_mu_);
    edge_bytes_[st.node->inputs[0]] += t.bytes();
  }
  st.gate.store(2);
  const uint64_t tag = MakeTag(TagKind::kSendDone, st.node->id);
  SendResult r;
  if (st.static_send) {
    r = st.static_send->Send(t, tag, ready, &attributed_);
    writes_.fetch_add(r.verbs);
  } else if (st.dyn_send) {
    r = st.dyn_send->Send(t, tag, ready, &attributed_);
    writes_.fetch_add(r.verbs);
  } else if (st.rpc_send) {
    r = st.rpc_send->Send(t, tag, ready, &attributed_);
    sends_.fetch_add(r.verbs);
  } else {
    Fail(ErrorCode::kInvalidGraph, st.node->name + " has no transfer endpoint");
  }
  wire_bytes_.fetch_add(r.wire_bytes);
  shared_.arrival[st.node->attrs.cross_index].store(r.arrival, std::memory_order_release);
  st.result = std::move(t);
  st.result_at = r.arrival;
  GateDown(op);
}

PollResult Executor::Poll(uint32_t op) {
  OpState& st = *ops_[op];
  const CostModel& cost = shared_.fabric->cost();
  if (st.static_recv) {
    std::optional<Tensor> view = st.static_recv->Poll();
    if (!view) return PollResult::kPending;
    st.result = std::move(*view);
    st.result_at = ArrivalOf(st);
    st.gate.store(1);
    return PollResult::kReady;
  }
  if (st.dyn_recv) {
    const double meta_at = ArrivalOf(st);
    st.gate.store(2);
    DynReceiver::State s = st.dyn_recv->Poll(
        MakeTag(TagKind::kReadDone, st.node->id), meta_at,
        [this](const RegionHandle& h) { OnRecvBufferReleased(h); });
    if (s == DynReceiver::State::kPending) {
      st.gate.store(0);
      return PollResult::kPending;
    }
    const uint64_t payload = st.dyn_recv->last_payload_bytes();
    AddRecvResident(static_cast<int64_t>(payload + 1));
    if (s == DynReceiver::State::kReadPosted) {
      reads_.fetch_add(1);
      wire_bytes_.fetch_add(payload);
      st.result_at = meta_at + cost.VerbTime(payload);
    } else {
      st.gate.store(1);
      st.result_at = meta_at;
    }
    return PollResult::kReady;
  }
  if (st.rpc_recv) {
    std::optional<Tensor> t = st.rpc_recv->Poll(&attributed_);
    if (!t) return PollResult::kPending;
    st.result_at = ArrivalOf(st) + cost.CopyTime(t->bytes());
    st.result = std::move(*t);
    st.gate.store(1);
    return PollResult::kReady;
  }
  Fail(ErrorCode::kInvalidGraph, st.node->name + " has no transfer endpoint");
}

void Executor::StartAsync(uint32_t op) {
  OpState& st = *ops_[op];
  if (IsSendKind(st.node->kind)) {
    StartSend(op);
  } else {
    GateDown(op);
  }
}

void Executor::Complete(uint32_t op) {
  OpState& st = *ops_[op];
  if (IsSendKind(st.node->kind)) {
    if (st.static_send) st.static_send->Finish();
    if (st.rpc_send) st.rpc_send->Finish();
    st.result = Tensor{};
    MarkDone(st, st.result_at);
    return;
  }
  Tensor t = st.dyn_recv ? st.dyn_recv->Take() : std::move(st.result);
  st.result = Tensor{};
  const AllocSiteKey key{st.node->id, 0};
  if (shared_.tracing && iteration_ == 1) trace_.TraceAlloc(t.addr(), key);
  if (audit_active_) audit_.TraceAlloc(t.addr(), key);
  Publish(st, t, st.result_at);
  MarkDone(st, st.result_at);
}

uint64_t Executor::RelocateVariables() {
  const std::set<AllocSiteKey> s = trace_.set_s();
  uint64_t moved = 0;
  for (auto& st : ops_) {
    if (st->node->kind != NodeKind::kVariable || !st->storage.buffer) continue;
    if (st->storage.registered() || !s.count({st->node->id, 0})) continue;
    Tensor fresh = AllocateTensor(arena_, st->storage.dims, st->storage.elem_type);
    space_.CopyBytes(st->storage.buffer->region(), 0, fresh.buffer->region(), 0,
                     st->storage.bytes());
    moved += st->storage.bytes();
    st->storage = std::move(fresh);
  }
  return moved;
}

Tensor Executor::variable(NodeId n) const { return ops_.at(index_.at(n))->storage; }

std::map<EdgeId, uint64_t> Executor::TakeEdgeBytes() {
  std::lock_guard<std::mutex> lock(edge_mu_);
  return std::exchange(edge_bytes_, {});
}

void Executor::ReleaseRetained() {
  for (auto& st : ops_) {
    if (st->dyn_send) st->dyn_send->Release();
  }
}

}  // namespace rdmaflow
