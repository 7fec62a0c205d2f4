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

#include "rdmaflow/transfer.h"

#include <algorithm>
#include <cstring>

#include "rdmaflow/errors.h"

namespace rdmaflow {

uint64_t MakeTag(TagKind kind, NodeId node, uint32_t slot) {
  return (static_cast<uint64_t>(kind) << 56) |
         (static_cast<uint64_t>(slot & 0xffffff) << 32) | node;
}

DecodedTag DecodeTag(uint64_t tag) {
  return DecodedTag{static_cast<TagKind>(tag >> 56), static_cast<NodeId>(tag),
                    static_cast<uint32_t>((tag >> 32) & 0xffffff)};
}

// ---------------------------------------------------------------------------
// Static placement

StaticSender::StaticSender(Fabric& fabric, RdmaDevice& device, Channel channel,
                           RemoteRegion remote, ArenaAllocator& staging)
    : fabric_(fabric),
      device_(device),
      channel_(channel),
      remote_(remote),
      staging_(staging) {}

SendResult StaticSender::Send(const Tensor& t, uint64_t tag, double sim_ready,
                              CopyCounters* attributed) {
  const uint64_t payload = t.bytes();
  if (payload + 1 != remote_.len) {
    Fail(ErrorCode::kSizeMismatch,
         "tensor of " + std::to_string(payload) + " bytes for a region of " +
             std::to_string(remote_.len));
  }
  // The iteration barrier guarantees the receiver consumed the previous
  // write; check rather than trust it.
  if (fabric_.PeekByte(channel_.remote, remote_.addr + payload) != kFlagEmpty) {
    Fail(ErrorCode::kProtocolViolation,
         "receiver flag still set when the next static write starts");
  }
  const CostModel& cost = fabric_.cost();
  SendResult r;
  r.verbs = 1;
  r.wire_bytes = payload + 1;
  double post = sim_ready;
  RegionHandle src;
  if (t.registered()) {
    t.buffer->BorrowTail(payload);
    inflight_ = t;
    src = t.buffer->region();
  } else {
    src = staging_.Allocate(payload + 1);
    staged_ = src;
    if (payload) {
      device_.space().CopyBytes(t.buffer->region(), 0, src, 0, payload, attributed);
    }
    device_.space().StoreByte(src.base + payload, kFlagReady);
    r.staged_bytes = payload;
    post += cost.CopyTime(payload);
  }
  device_.PostWrite(channel_, src, 0, payload + 1, remote_.addr, remote_.token,
                    tag, post);
  r.arrival = post + cost.VerbTime(payload + 1);
  return r;
}

void StaticSender::Finish() {
  if (staged_) {
    staging_.Free(*staged_);
    staged_.reset();
  } else if (inflight_.buffer) {
    inflight_.buffer->ReturnTail(inflight_.bytes());
    inflight_ = Tensor{};
  }
}

StaticReceiver::StaticReceiver(MemorySpace& space, RegionHandle region,
                               std::vector<uint64_t> dims, ElemType t)
    : space_(space),
      region_(region),
      dims_(std::move(dims)),
      elem_type_(t),
      view_(std::make_shared<Buffer>(space, region, nullptr)) {}

std::optional<Tensor> StaticReceiver::Poll() {
  const Addr flag = region_.base + region_.len - 1;
  if (space_.LoadByte(flag) != kFlagReady) return std::nullopt;
  space_.StoreByte(flag, kFlagEmpty);
  return Tensor{dims_, elem_type_, view_};
}

// ---------------------------------------------------------------------------
// Dynamic allocation

DynSender::DynSender(Fabric& fabric, RdmaDevice& device, Channel channel,
                     RemoteRegion meta, uint64_t rank, ArenaAllocator& arena)
    : fabric_(fabric),
      device_(device),
      channel_(channel),
      meta_(meta),
      rank_(rank),
      arena_(arena) {
  if (meta.len != MetaBlockSize(rank)) {
    Fail(ErrorCode::kSizeMismatch, "meta region does not match the edge rank");
  }
  meta_staging_ = arena_.Allocate(meta.len);
}

DynSender::~DynSender() {
  retained_ = Tensor{};
  arena_.Free(meta_staging_);
}

SendResult DynSender::Send(const Tensor& t, uint64_t tag, double sim_ready,
                           CopyCounters* attributed) {
  if (t.dims.size() != rank_) {
    Fail(ErrorCode::kRankChanged, "tensor of rank " + std::to_string(t.dims.size()) +
                                      " on an edge of rank " + std::to_string(rank_));
  }
  if (fabric_.PeekByte(channel_.remote, meta_.addr + meta_.len - 1) != kFlagEmpty) {
    Fail(ErrorCode::kProtocolViolation,
         "receiver meta flag still set when the next meta write starts");
  }
  const CostModel& cost = fabric_.cost();
  const uint64_t payload = t.bytes();
  SendResult r;
  double post = sim_ready;
  // The previous payload may be dropped now: its reader finished before the
  // barrier that preceded this activation.
  if (t.registered()) {
    retained_ = t;
  } else {
    Tensor staged = AllocateTensor(arena_, t.dims, t.elem_type);
    if (payload) {
      device_.space().CopyBytes(t.buffer->region(), 0, staged.buffer->region(), 0,
                                payload, attributed);
    }
    retained_ = std::move(staged);
    r.staged_bytes = payload;
    post += cost.CopyTime(payload);
  }
  std::vector<std::byte> meta =
      EncodeMeta(t.dims, t.elem_type, retained_.addr(),
                 retained_.buffer->region().token);
  std::memcpy(device_.space().Data(meta_staging_.base, meta.size()), meta.data(),
              meta.size());
  device_.space().counters().AddSerialize(meta.size());
  if (attributed) attributed->AddSerialize(meta.size());
  device_.PostWrite(channel_, meta_staging_, 0, meta.size(), meta_.addr,
                    meta_.token, tag, post);
  r.verbs = 1;
  r.wire_bytes = meta.size();
  r.arrival = post + cost.VerbTime(meta.size());
  return r;
}

DynReceiver::DynReceiver(RdmaDevice& device, Channel channel,
                         RegionHandle meta_region, uint64_t rank,
                         ArenaAllocator& arena)
    : device_(device),
      channel_(channel),
      meta_region_(meta_region),
      rank_(rank),
      arena_(arena) {}

DynReceiver::State DynReceiver::Poll(
    uint64_t tag, double sim_post,
    std::function<void(const RegionHandle&)> on_release) {
  MemorySpace& space = device_.space();
  const Addr flag = meta_region_.base + meta_region_.len - 1;
  if (space.LoadByte(flag) != kFlagReady) return State::kPending;
  std::vector<std::byte> copy(meta_region_.len);
  std::memcpy(copy.data(), space.Data(meta_region_.base, copy.size()), copy.size());
  space.StoreByte(flag, kFlagEmpty);
  MetaBlock m = DecodeMeta(copy, rank_);
  pending_ = AllocateTensor(arena_, m.dims, m.elem_type, std::move(on_release));
  last_payload_ = m.payload_len;
  if (m.payload_len == 0) return State::kReady;
  device_.PostRead(channel_, m.remote_addr, m.remote_token,
                   pending_.buffer->region(), 0, m.payload_len, tag, sim_post);
  return State::kReadPosted;
}

Tensor DynReceiver::Take() { return std::move(pending_); }

// ---------------------------------------------------------------------------
// RPC baseline

RpcSender::RpcSender(RdmaDevice& device, Channel channel, uint64_t rank,
                     ArenaAllocator& staging, uint64_t msg_id_base,
                     const CostModel& cost)
    : device_(device),
      channel_(channel),
      rank_(rank),
      staging_(staging),
      cost_(cost),
      next_msg_id_(msg_id_base) {}

double RpcSender::SimCost(const CostModel& c, uint64_t payload, uint64_t rank) {
  const uint64_t body = payload + MetaBlockSize(rank);
  const uint64_t n = FragmentCount(body);
  return c.CopyTime(body) + n * c.alpha + c.beta * (body + kFragmentHeaderSize * n) +
         c.CopyTime(payload);
}

SendResult RpcSender::Send(const Tensor& t, uint64_t tag, double sim_ready,
                           CopyCounters* attributed) {
  if (t.dims.size() != rank_) {
    Fail(ErrorCode::kRankChanged, "tensor of rank " + std::to_string(t.dims.size()) +
                                      " on an edge of rank " + std::to_string(rank_));
  }
  MemorySpace& space = device_.space();
  const std::vector<std::byte> meta = EncodeMeta(t.dims, t.elem_type, 0, 0);
  const uint64_t m = meta.size();
  const uint64_t payload = t.bytes();
  const uint64_t body = m + payload;
  const uint32_t n = FragmentCount(body);
  RegionHandle stage = staging_.Allocate(n * kFragmentSize);
  staged_ = stage;
  remaining_.store(n);
  const uint64_t msg_id = next_msg_id_++;
  std::vector<uint64_t> frag_len(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint64_t lo = i * kFragmentBodyCapacity;
    const uint64_t hi = std::min(body, lo + kFragmentBodyCapacity);
    const uint64_t at = i * kFragmentSize;
    EncodeFragmentHeader({msg_id, i, n},
                         {space.Data(stage.base + at, kFragmentHeaderSize),
                          kFragmentHeaderSize});
    uint64_t pos = lo;
    if (pos < m) {
      const uint64_t k = std::min(hi, m) - pos;
      std::memcpy(space.Data(stage.base + at + kFragmentHeaderSize, k),
                  meta.data() + pos, k);
      space.counters().AddSerialize(k);
      if (attributed) attributed->AddSerialize(k);
      pos += k;
    }
    if (pos < hi) {
      space.CopyBytes(t.buffer->region(), pos - m, stage,
                      at + kFragmentHeaderSize + (pos - lo), hi - pos, attributed);
    }
    frag_len[i] = kFragmentHeaderSize + (hi - lo);
  }
  SendResult r;
  r.verbs = n;
  r.staged_bytes = payload;
  r.wire_bytes = body + kFragmentHeaderSize * n;
  // Fragments go out back to back on one QP, so the last lands after all n
  // verb costs.
  const double post = sim_ready + cost_.CopyTime(body);
  r.arrival = post + n * cost_.alpha + cost_.beta * r.wire_bytes;
  for (uint32_t i = 0; i < n; ++i) {
    device_.PostSend(channel_, stage, i * kFragmentSize, frag_len[i], tag, post);
  }
  return r;
}

bool RpcSender::OnFragmentDone() { return remaining_.fetch_sub(1) == 1; }

void RpcSender::Finish() {
  if (staged_) {
    staging_.Free(*staged_);
    staged_.reset();
  }
}

RpcReceiver::RpcReceiver(RdmaDevice& device, Channel channel,
                         ArenaAllocator& ring_arena, uint64_t rank,
                         ArenaAllocator& dest, NodeId node)
    : device_(device),
      channel_(channel),
      ring_arena_(ring_arena),
      rank_(rank),
      dest_(dest),
      node_(node) {
  if (MetaBlockSize(rank) > kFragmentBodyCapacity) {
    Fail(ErrorCode::kRankMismatch, "meta block does not fit one fragment");
  }
  ring_ = ring_arena_.Allocate(kRingBytes);
}

RpcReceiver::~RpcReceiver() {
  building_ = Tensor{};
  ring_arena_.Free(ring_);
}

void RpcReceiver::Repost(uint32_t slot) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    posted_.push_back(slot);
  }
  device_.PostRecv(channel_, ring_, slot * kFragmentSize, kFragmentSize,
                   MakeTag(TagKind::kSlotFilled, node_, slot));
}

void RpcReceiver::PostAll() {
  for (uint32_t s = 0; s < kRingSlots; ++s) Repost(s);
}

void RpcReceiver::OnSlotFilled(uint32_t slot, uint64_t len) {
  std::lock_guard<std::mutex> lock(mu_);
  filled_[slot] = len;
}

std::optional<Tensor> RpcReceiver::Poll(CopyCounters* attributed) {
  MemorySpace& space = device_.space();
  for (;;) {
    uint32_t slot;
    uint64_t len;
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (posted_.empty()) return std::nullopt;
      auto it = filled_.find(posted_.front());
      if (it == filled_.end()) return std::nullopt;
      slot = it->first;
      len = it->second;
      filled_.erase(it);
      posted_.pop_front();
    }
    const Addr at = ring_.base + slot * kFragmentSize;
    if (len < kFragmentHeaderSize) {
      Fail(ErrorCode::kReassemblyGap, "fragment shorter than its header");
    }
    const FragmentHeader h =
        DecodeFragmentHeader({space.Data(at, kFragmentHeaderSize), kFragmentHeaderSize});
    const uint64_t body_len = len - kFragmentHeaderSize;
    if (!in_message_) {
      if (h.frag_index != 0) {
        Fail(ErrorCode::kReassemblyGap,
             "message starts at fragment " + std::to_string(h.frag_index));
      }
      meta_len_ = MetaBlockSize(rank_);
      if (body_len < meta_len_) {
        Fail(ErrorCode::kReassemblyGap, "first fragment lacks the meta block");
      }
      MetaBlock mb = DecodeMeta(
          {space.Data(at + kFragmentHeaderSize, meta_len_), meta_len_}, rank_);
      building_ = AllocateTensor(dest_, mb.dims, mb.elem_type);
      in_message_ = true;
      msg_id_ = h.msg_id;
      frag_count_ = h.frag_count;
      next_index_ = 0;
      body_offset_ = 0;
    }
    if (h.msg_id != msg_id_ || h.frag_index != next_index_ ||
        h.frag_count != frag_count_) {
      Fail(ErrorCode::kReassemblyGap,
           "expected fragment " + std::to_string(next_index_) + " of message " +
               std::to_string(msg_id_) + ", got " + std::to_string(h.frag_index) +
               " of " + std::to_string(h.msg_id));
    }
    const uint64_t start = std::max(body_offset_, meta_len_);
    const uint64_t end = body_offset_ + body_len;
    if (end > meta_len_ + building_.bytes()) {
      Fail(ErrorCode::kReassemblyGap, "fragment runs past the tensor");
    }
    if (end > start) {
      space.CopyBytes(ring_, slot * kFragmentSize + kFragmentHeaderSize +
                                 (start - body_offset_),
                      building_.buffer->region(), start - meta_len_, end - start,
                      attributed);
    }
    body_offset_ = end;
    ++next_index_;
    Repost(slot);
    if (next_index_ == frag_count_) {
      in_message_ = false;
      if (body_offset_ != meta_len_ + building_.bytes()) {
        Fail(ErrorCode::kReassemblyGap, "message ended short of its payload");
      }
      return std::move(building_);
    }
  }
}

}  // namespace rdmaflow
