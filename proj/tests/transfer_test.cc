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

#include <gtest/gtest.h>

#include <cstring>
#include <memory>
#include <random>

#include "rdmaflow/errors.h"

namespace rdmaflow {
namespace {

template <typename F>
ErrorCode CodeOf(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an rdmaflow::Error";
  return ErrorCode::kProtocolViolation;
}

struct Side {
  std::unique_ptr<MemorySpace> space;
  std::unique_ptr<ArenaAllocator> arena;
  std::unique_ptr<ArenaAllocator> heap;
  RdmaDevice* device = nullptr;
};

// Producer on server 0, consumer on server 1, one QP.
struct Pair {
  Fabric fabric;
  Side p, c;
  Channel to_c, to_p;

  explicit Pair(FabricOptions o = {}) : fabric(std::move(o)) {
    for (auto [side, id] : {std::pair{&p, 0u}, std::pair{&c, 1u}}) {
      MemorySpaceOptions mo;
      mo.capacity = 8 * kMiB;
      side->space = std::make_unique<MemorySpace>(id, mo);
      side->arena = std::make_unique<ArenaAllocator>(*side->space, 3 * kMiB, true);
      side->heap = std::make_unique<ArenaAllocator>(*side->space, 3 * kMiB, false);
      side->device = &fabric.CreateDevice({id, 1}, *side->space);
    }
    to_c = p.device->Connect(c.device->endpoint()).front();
    to_p = c.device->GetChannel(p.device->endpoint(), 0);
  }

  std::vector<CompletionEvent> Drain(RdmaDevice& d) {
    std::vector<CompletionEvent> out;
    while (auto ev = d.PollAnyCq()) out.push_back(*ev);
    return out;
  }
};

Tensor Random(ArenaAllocator& a, std::vector<uint64_t> dims, uint64_t seed) {
  Tensor t = AllocateTensor(a, std::move(dims), ElemType::kF32);
  std::mt19937 rng(static_cast<uint32_t>(seed));
  for (uint64_t i = 0; i < t.num_elements(); ++i) {
    t.f32()[i] = static_cast<float>(rng() % 10000) / 7.0f;
  }
  return t;
}

std::vector<std::byte> Bytes(const Tensor& t) { return t.CopyOut(); }

// --- static placement ------------------------------------------------------

struct StaticEdge {
  RegionHandle region;
  std::unique_ptr<StaticSender> sender;
  std::unique_ptr<StaticReceiver> receiver;

  StaticEdge(Pair& x, std::vector<uint64_t> dims) {
    region = x.c.arena->Allocate(StaticRegionSize(dims, ElemType::kF32));
    std::memset(x.c.space->Data(region.base, region.len), 0, region.len);
    sender = std::make_unique<StaticSender>(
        x.fabric, *x.p.device, x.to_c,
        RemoteRegion{region.base, region.token, region.len}, *x.p.arena);
    receiver = std::make_unique<StaticReceiver>(*x.c.space, region, dims,
                                                ElemType::kF32);
  }
};

TEST(StaticTransferTest, OneWriteOfPayloadAndFlag) {
  Pair x;
  StaticEdge e(x, {3, 4});
  Tensor t = Random(*x.p.arena, {3, 4}, 1);
  EXPECT_FALSE(e.receiver->Poll().has_value());
  const uint64_t posted = x.fabric.posted_verbs();
  SendResult r = e.sender->Send(t, 7, 0, nullptr);
  EXPECT_EQ(r.verbs, 1u);
  EXPECT_EQ(r.wire_bytes, 49u);
  EXPECT_EQ(r.staged_bytes, 0u);
  EXPECT_EQ(x.fabric.posted_verbs(), posted + 1);
  x.fabric.RunUntilIdle();
  auto evs = x.Drain(*x.p.device);
  ASSERT_EQ(evs.size(), 1u);
  EXPECT_EQ(evs[0].kind, VerbKind::kWrite);
  EXPECT_EQ(evs[0].byte_len, 49u);
  EXPECT_EQ(evs[0].user_tag, 7u);
  e.sender->Finish();
  std::optional<Tensor> got = e.receiver->Poll();
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(Bytes(*got), Bytes(t));
  EXPECT_EQ(got->addr(), e.region.base);  // a view, not a copy
  // The flag was cleared for the next iteration.
  EXPECT_EQ(x.c.space->LoadByte(e.region.base + 48), kFlagEmpty);
  EXPECT_FALSE(e.receiver->Poll().has_value());
  // The borrowed tail byte was restored.
  EXPECT_EQ(x.p.space->LoadByte(t.addr() + 48), 0);
}

TEST(StaticTransferTest, SizeMismatch) {
  Pair x;
  StaticEdge e(x, {3, 4});
  Tensor t = Random(*x.p.arena, {4, 4}, 1);
  EXPECT_EQ(CodeOf([&] { e.sender->Send(t, 0, 0, nullptr); }), ErrorCode::kSizeMismatch);
}

TEST(StaticTransferTest, FlagStillSetIsAProtocolViolation) {
  Pair x;
  StaticEdge e(x, {3, 4});
  Tensor t = Random(*x.p.arena, {3, 4}, 1);
  e.sender->Send(t, 0, 0, nullptr);
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  e.sender->Finish();
  // The receiver has not consumed the first write.
  EXPECT_EQ(CodeOf([&] { e.sender->Send(t, 0, 0, nullptr); }),
            ErrorCode::kProtocolViolation);
}

TEST(StaticTransferTest, CopyCountersZeroCopyVersusStaged) {
  Pair x;
  StaticEdge e(x, {3, 4});
  CopyCounters counters;
  Tensor registered = Random(*x.p.arena, {3, 4}, 1);
  e.sender->Send(registered, 0, 0, &counters);
  EXPECT_EQ(counters.Snapshot().payload_bytes_copied, 0u);
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  e.sender->Finish();
  ASSERT_TRUE(e.receiver->Poll().has_value());

  const uint64_t arena_before = x.p.arena->current_resident();
  Tensor plain = Random(*x.p.heap, {3, 4}, 2);
  SendResult r = e.sender->Send(plain, 0, 0, &counters);
  EXPECT_EQ(r.staged_bytes, 48u);
  EXPECT_EQ(counters.Snapshot().payload_bytes_copied, 48u);
  EXPECT_EQ(counters.Snapshot().payload_copy_events, 1u);
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  e.sender->Finish();
  EXPECT_EQ(x.p.arena->current_resident(), arena_before);  // staging freed
  std::optional<Tensor> got = e.receiver->Poll();
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(Bytes(*got), Bytes(plain));
}

TEST(StaticTransferTest, SimulatedArrivalFollowsCostModel) {
  Pair x;
  StaticEdge e(x, {256});
  const CostModel& c = x.fabric.cost();
  Tensor reg = Random(*x.p.arena, {256}, 1);
  EXPECT_DOUBLE_EQ(e.sender->Send(reg, 0, 2.0, nullptr).arrival, 2.0 + c.VerbTime(1025));
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  e.sender->Finish();
  e.receiver->Poll();
  Tensor plain = Random(*x.p.heap, {256}, 1);
  EXPECT_DOUBLE_EQ(e.sender->Send(plain, 0, 2.0, nullptr).arrival,
                   2.0 + c.CopyTime(1024) + c.VerbTime(1025));
}

// Oracle: a byte-at-a-time script exposes every prefix of the write; the
// receiver must stay Pending until the final (flag) byte lands.
TEST(StaticTransferTest, PendingOnEveryStrictPrefix) {
  FabricOptions o;
  o.chunking.script = [](VerbKind, uint64_t len) {
    return std::vector<uint64_t>(len, 1);
  };
  Pair x(o);
  StaticEdge e(x, {3, 4});
  Tensor t = Random(*x.p.arena, {3, 4}, 3);
  e.sender->Send(t, 0, 0, nullptr);
  for (int delivered = 0; delivered < 48; ++delivered) {
    ASSERT_EQ(x.fabric.Progress(1), 1u);
    ASSERT_FALSE(e.receiver->Poll().has_value()) << "after " << delivered + 1 << " bytes";
  }
  ASSERT_EQ(x.fabric.Progress(1), 1u);
  std::optional<Tensor> got = e.receiver->Poll();
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(Bytes(*got), Bytes(t));
}

TEST(StaticTransferTest, ForwardingAViewBorrowsItsFlagByte) {
  // A received view resent to a third party: the view's own flag doubles as
  // the outgoing flag and returns to empty afterwards.
  Pair x;
  StaticEdge in(x, {3, 4});
  Tensor t = Random(*x.p.arena, {3, 4}, 4);
  in.sender->Send(t, 0, 0, nullptr);
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  in.sender->Finish();
  Tensor view = *in.receiver->Poll();
  RegionHandle back = x.p.arena->Allocate(49);
  std::memset(x.p.space->Data(back.base, 49), 0, 49);
  StaticSender fwd(x.fabric, *x.c.device, x.to_p, {back.base, back.token, 49}, *x.c.arena);
  EXPECT_EQ(fwd.Send(view, 0, 0, nullptr).staged_bytes, 0u);
  x.fabric.RunUntilIdle();
  x.Drain(*x.c.device);
  fwd.Finish();
  EXPECT_EQ(x.c.space->LoadByte(in.region.base + 48), kFlagEmpty);
  EXPECT_EQ(x.p.space->LoadByte(back.base + 48), kFlagReady);
  EXPECT_EQ(0, std::memcmp(x.p.space->Data(back.base, 48), Bytes(t).data(), 48));
}

// --- dynamic allocation ----------------------------------------------------

struct DynEdge {
  RegionHandle meta;
  std::unique_ptr<DynSender> sender;
  std::unique_ptr<DynReceiver> receiver;

  DynEdge(Pair& x, uint64_t rank) {
    meta = x.c.arena->Allocate(MetaBlockSize(rank));
    std::memset(x.c.space->Data(meta.base, meta.len), 0, meta.len);
    sender = std::make_unique<DynSender>(x.fabric, *x.p.device, x.to_c,
                                         RemoteRegion{meta.base, meta.token, meta.len},
                                         rank, *x.p.arena);
    receiver = std::make_unique<DynReceiver>(*x.c.device, x.to_p, meta, rank, *x.c.arena);
  }
};

TEST(DynTransferTest, MetaWriteThenRead) {
  Pair x;
  DynEdge e(x, 2);
  Tensor t = Random(*x.p.arena, {5, 8}, 5);
  EXPECT_EQ(e.receiver->Poll(0, 0), DynReceiver::State::kPending);
  SendResult r = e.sender->Send(t, 11, 0, nullptr);
  EXPECT_EQ(r.verbs, 1u);
  EXPECT_EQ(r.wire_bytes, 49u);
  x.fabric.RunUntilIdle();
  auto sent = x.Drain(*x.p.device);
  ASSERT_EQ(sent.size(), 1u);
  EXPECT_EQ(sent[0].kind, VerbKind::kWrite);
  EXPECT_EQ(sent[0].byte_len, 49u);  // no payload write
  const uint64_t arena_before = x.c.arena->current_resident();
  EXPECT_EQ(e.receiver->Poll(22, 0), DynReceiver::State::kReadPosted);
  EXPECT_EQ(x.c.space->LoadByte(e.meta.base + 48), kFlagEmpty);
  x.fabric.RunUntilIdle();
  auto reads = x.Drain(*x.c.device);
  ASSERT_EQ(reads.size(), 1u);
  EXPECT_EQ(reads[0].kind, VerbKind::kRead);
  EXPECT_EQ(reads[0].byte_len, 160u);
  {
    Tensor got = e.receiver->Take();
    EXPECT_EQ(got.dims, (std::vector<uint64_t>{5, 8}));
    EXPECT_EQ(Bytes(got), Bytes(t));
    EXPECT_TRUE(got.registered());
    EXPECT_GT(x.c.arena->current_resident(), arena_before);
  }
  // Last consumer gone: the payload buffer is back in the arena.
  EXPECT_EQ(x.c.arena->current_resident(), arena_before);
}

TEST(DynTransferTest, ShapeChangesKeepTheMetaAddress) {
  Pair x;
  DynEdge e(x, 2);
  for (uint64_t rows : {5u, 7u}) {
    Tensor t = Random(*x.p.arena, {rows, 8}, rows);
    e.sender->Send(t, 0, 0, nullptr);
    x.fabric.RunUntilIdle();
    auto ev = x.Drain(*x.p.device);
    ASSERT_EQ(ev.size(), 1u);
    ASSERT_EQ(e.receiver->Poll(0, 0), DynReceiver::State::kReadPosted);
    x.fabric.RunUntilIdle();
    x.Drain(*x.c.device);
    Tensor got = e.receiver->Take();
    EXPECT_EQ(got.dims[0], rows);
    EXPECT_EQ(Bytes(got), Bytes(t));
    MetaBlock m = DecodeMeta([&] {
      std::vector<std::byte> raw(49);
      std::memcpy(raw.data(), x.c.space->Data(e.meta.base, 49), 49);
      raw[48] = std::byte{1};
      return raw;
    }(), 2);
    EXPECT_EQ(m.dims, (std::vector<uint64_t>{rows, 8}));
  }
}

TEST(DynTransferTest, RankChanged) {
  Pair x;
  DynEdge e(x, 2);
  Tensor t = Random(*x.p.arena, {2, 2, 2}, 1);
  EXPECT_EQ(CodeOf([&] { e.sender->Send(t, 0, 0, nullptr); }), ErrorCode::kRankChanged);
}

TEST(DynTransferTest, EmptyTensorNeedsNoRead) {
  Pair x;
  DynEdge e(x, 2);
  Tensor t = AllocateTensor(*x.p.arena, {0, 8}, ElemType::kF32);
  e.sender->Send(t, 0, 0, nullptr);
  x.fabric.RunUntilIdle();
  x.Drain(*x.p.device);
  const uint64_t reads = x.fabric.posted_verbs();
  EXPECT_EQ(e.receiver->Poll(0, 0), DynReceiver::State::kReady);
  EXPECT_EQ(x.fabric.posted_verbs(), reads);
  Tensor got = e.receiver->Take();
  EXPECT_EQ(got.bytes(), 0u);
  EXPECT_EQ(got.dims, (std::vector<uint64_t>{0, 8}));
}

TEST(DynTransferTest, UnregisteredSourceIsStagedAndRetained) {
  Pair x;
  DynEdge e(x, 1);
  CopyCounters counters;
  const uint64_t before = x.p.arena->current_resident();
  {
    Tensor t = Random(*x.p.heap, {64}, 9);
    SendResult r = e.sender->Send(t, 0, 0, &counters);
    EXPECT_EQ(r.staged_bytes, 256u);
    EXPECT_EQ(counters.Snapshot().payload_bytes_copied, 256u);
    EXPECT_EQ(counters.Snapshot().serialize_bytes, MetaBlockSize(1));
    x.fabric.RunUntilIdle();
    x.Drain(*x.p.device);
    ASSERT_EQ(e.receiver->Poll(0, 0), DynReceiver::State::kReadPosted);
    x.fabric.RunUntilIdle();
    x.Drain(*x.c.device);
    EXPECT_EQ(Bytes(e.receiver->Take()), Bytes(t));
  }
  // The staged copy stays alive for the reader until released.
  EXPECT_EQ(x.p.arena->current_resident(), before + 257);
  e.sender->Release();
  EXPECT_EQ(x.p.arena->current_resident(), before);
}

// --- RPC baseline ----------------------------------------------------------

struct RpcEdge {
  std::unique_ptr<RpcSender> sender;
  std::unique_ptr<RpcReceiver> receiver;
  RpcEdge(Pair& x, uint64_t rank) {
    sender = std::make_unique<RpcSender>(*x.p.device, x.to_c, rank, *x.p.arena, 100,
                                         x.fabric.cost());
    receiver = std::make_unique<RpcReceiver>(*x.c.device, x.to_p, *x.c.arena, rank,
                                             *x.c.heap, 3);
    receiver->PostAll();
  }
};

// Runs one message through: the pump routes slot completions and sender
// fragment completions until the receiver yields a tensor.
Tensor Transfer(Pair& x, RpcEdge& e, const Tensor& t, CopyCounters* counters,
                uint32_t* fragments_done) {
  e.sender->Send(t, MakeTag(TagKind::kSendDone, 1), 0, counters);
  for (int guard = 0; guard < 1000000; ++guard) {
    x.fabric.Progress(64);
    while (auto ev = x.c.device->PollAnyCq()) {
      DecodedTag tag = DecodeTag(ev->user_tag);
      EXPECT_EQ(tag.kind, TagKind::kSlotFilled);
      e.receiver->OnSlotFilled(tag.slot, ev->byte_len);
    }
    while (auto ev = x.p.device->PollAnyCq()) {
      EXPECT_EQ(ev->status, CompletionStatus::kSuccess);
      ++*fragments_done;
      e.sender->OnFragmentDone();
    }
    if (auto got = e.receiver->Poll(counters)) {
      x.fabric.RunUntilIdle();
      while (x.p.device->PollAnyCq()) ++*fragments_done;
      e.sender->Finish();
      return *got;
    }
  }
  ADD_FAILURE() << "rpc transfer did not finish";
  return {};
}

TEST(RpcTransferTest, TenKilobytesIsThreeFragments) {
  Pair x;
  RpcEdge e(x, 1);
  CopyCounters counters;
  Tensor t = Random(*x.p.heap, {2560}, 1);  // 10,240 bytes
  uint32_t done = 0;
  Tensor got = Transfer(x, e, t, &counters, &done);
  EXPECT_EQ(done, 3u);
  EXPECT_EQ(Bytes(got), Bytes(t));
  EXPECT_FALSE(got.registered());
  // One copy in, one copy out, meta serialized once.
  EXPECT_EQ(counters.Snapshot().payload_bytes_copied, 2u * 10240);
  EXPECT_EQ(counters.Snapshot().serialize_bytes, MetaBlockSize(1));
}

TEST(RpcTransferTest, OneBytePayloadIsOneFragment) {
  Pair x;
  RpcEdge e(x, 1);
  Tensor t = AllocateTensor(*x.p.heap, {1}, ElemType::kU8);
  t.data()[0] = std::byte{0x5a};
  uint32_t done = 0;
  Tensor got = Transfer(x, e, t, nullptr, &done);
  EXPECT_EQ(done, 1u);
  EXPECT_EQ(Bytes(got), Bytes(t));
}

TEST(RpcTransferTest, MessagesLargerThanTheRingReuseSlots) {
  Pair x;
  RpcEdge e(x, 2);
  for (uint64_t rows : {100u, 37u}) {
    Tensor t = Random(*x.p.heap, {rows, 256}, rows);  // up to 100 KiB
    uint32_t done = 0;
    Tensor got = Transfer(x, e, t, nullptr, &done);
    EXPECT_EQ(done, FragmentCount(t.bytes() + MetaBlockSize(2)));
    if (rows == 100) {
      EXPECT_GT(done, kRingSlots);
    }
    EXPECT_EQ(got.dims, t.dims);
    EXPECT_EQ(Bytes(got), Bytes(t));
  }
}

TEST(RpcTransferTest, SimCostFormula) {
  CostModel c;
  const uint64_t s = 1 << 20, m = MetaBlockSize(1);
  const uint64_t n = FragmentCount(s + m);
  EXPECT_EQ(n, 258u);
  EXPECT_DOUBLE_EQ(RpcSender::SimCost(c, s, 1),
                   c.gamma * (s + m) + n * c.alpha + c.beta * (s + m + 16 * n) +
                       c.gamma * s);
}

TEST(RpcTransferTest, GapInFragmentIndicesIsDetected) {
  Pair x;
  RpcReceiver recv(*x.c.device, x.to_p, *x.c.arena, 1, *x.c.heap, 3);
  recv.PostAll();
  // Hand-built fragments: index 0 of 3, then index 2.
  RegionHandle stage = x.p.arena->Allocate(2 * kFragmentSize);
  std::vector<std::byte> meta = EncodeMeta(std::vector<uint64_t>{3000}, ElemType::kF32, 0, 0);
  std::byte* base = x.p.space->Data(stage.base, 2 * kFragmentSize);
  std::memset(base, 0, 2 * kFragmentSize);
  EncodeFragmentHeader({9, 0, 3}, {base, 16});
  std::memcpy(base + 16, meta.data(), meta.size());
  EncodeFragmentHeader({9, 2, 3}, {base + kFragmentSize, 16});
  x.p.device->PostSend(x.to_c, stage, 0, kFragmentSize, 0);
  x.p.device->PostSend(x.to_c, stage, kFragmentSize, 100, 0);
  x.fabric.RunUntilIdle();
  while (auto ev = x.c.device->PollAnyCq()) {
    recv.OnSlotFilled(DecodeTag(ev->user_tag).slot, ev->byte_len);
  }
  EXPECT_EQ(CodeOf([&] { recv.Poll(nullptr); }), ErrorCode::kReassemblyGap);
}

TEST(TagTest, RoundTrip) {
  for (TagKind k : {TagKind::kSendDone, TagKind::kReadDone, TagKind::kSlotFilled}) {
    DecodedTag d = DecodeTag(MakeTag(k, 123456, 15));
    EXPECT_EQ(d.kind, k);
    EXPECT_EQ(d.node, 123456u);
    EXPECT_EQ(d.slot, 15u);
  }
  EXPECT_EQ(MakeTag(TagKind::kReadDone, 1, 2), (2ULL << 56) | (2ULL << 32) | 1);
}

}  // namespace
}  // namespace rdmaflow
