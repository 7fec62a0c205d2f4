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

#include "rdmaflow/memspace.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <map>
#include <random>
#include <vector>

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

MemorySpaceOptions SmallSpace(uint64_t capacity) {
  MemorySpaceOptions o;
  o.capacity = capacity;
  return o;
}

TEST(MemorySpaceTest, AllocateRegisteredRegionIsAligned) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle h = space.AllocateRegion(4096, true);
  EXPECT_EQ(h.len, 4096u);
  EXPECT_EQ(h.base % 8, 0u);
  EXPECT_TRUE(h.registered);
  EXPECT_NE(h.token, 0u);
}

TEST(MemorySpaceTest, ZeroLengthRejected) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  EXPECT_EQ(CodeOf([&] { space.AllocateRegion(0, true); }),
            ErrorCode::kZeroLength);
}

TEST(MemorySpaceTest, SeventeenthPageExhaustsSixtyFourKiB) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  for (int i = 0; i < 16; ++i) space.AllocateRegion(4096, false);
  EXPECT_EQ(CodeOf([&] { space.AllocateRegion(4096, false); }),
            ErrorCode::kOutOfMemory);
}

TEST(MemorySpaceTest, RegionCountLimit) {
  MemorySpaceOptions o = SmallSpace(64 * kKiB);
  o.max_regions = 3;
  MemorySpace space(0, o);
  for (int i = 0; i < 3; ++i) space.AllocateRegion(8, true);
  EXPECT_EQ(CodeOf([&] { space.AllocateRegion(8, true); }),
            ErrorCode::kTooManyRegions);
}

TEST(MemorySpaceTest, FreedRangeIsReused) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle a = space.AllocateRegion(1000, false);
  space.AllocateRegion(1000, false);
  space.FreeRegion(a);
  RegionHandle c = space.AllocateRegion(1000, false);
  EXPECT_EQ(c.base, a.base);
}

TEST(MemorySpaceTest, RegionsStayDisjoint) {
  MemorySpace space(0, SmallSpace(1 * kMiB));
  std::mt19937_64 rng(7);
  std::vector<RegionHandle> live;
  for (int step = 0; step < 2000; ++step) {
    if (!live.empty() && (rng() % 3 == 0)) {
      size_t idx = rng() % live.size();
      space.FreeRegion(live[idx]);
      live.erase(live.begin() + idx);
    } else {
      const uint64_t size = 1 + rng() % 5000;
      const bool registered = rng() % 2;
      try {
        live.push_back(space.AllocateRegion(size, registered));
      } catch (const Error& e) {
        ASSERT_TRUE(e.code() == ErrorCode::kOutOfMemory ||
                    e.code() == ErrorCode::kTooManyRegions);
      }
    }
    std::vector<RegionHandle> regions = space.Regions();
    std::sort(regions.begin(), regions.end(),
              [](const auto& x, const auto& y) { return x.base < y.base; });
    for (size_t i = 1; i < regions.size(); ++i) {
      ASSERT_LE(regions[i - 1].end(), regions[i].base);
    }
  }
}

TEST(MemorySpaceTest, WrongTokensAreRejected) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle h = space.AllocateRegion(256, true);
  std::mt19937_64 rng(99);
  int rejected = 0;
  for (int i = 0; i < 1000; ++i) {
    Token t = rng();
    if (t == h.token) continue;
    EXPECT_EQ(CodeOf([&] { space.CheckRemoteAccess(h.base, 8, t); }),
              ErrorCode::kBadToken);
    ++rejected;
  }
  EXPECT_EQ(rejected, 1000);
  space.CheckRemoteAccess(h.base, 256, h.token);
  EXPECT_EQ(CodeOf([&] { space.CheckRemoteAccess(h.base + 200, 57, h.token); }),
            ErrorCode::kRemoteOutOfBounds);
}

TEST(MemorySpaceTest, UnregisteredRegionIsNotRemotelyAccessible) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle h = space.AllocateRegion(256, false);
  EXPECT_FALSE(space.IsRegistered(h.base, 1));
  EXPECT_THROW(space.CheckRemoteAccess(h.base, 1, 0), Error);
}

TEST(CopyBytesTest, ZeroLengthCopyIsNoOp) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle a = space.AllocateRegion(64, false);
  RegionHandle b = space.AllocateRegion(64, false);
  space.CopyBytes(a, 0, b, 0, 0);
  EXPECT_EQ(space.counters().Snapshot(), CopyCounterSnapshot{});
}

TEST(CopyBytesTest, CountsExactBytes) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle a = space.AllocateRegion(64, false);
  RegionHandle b = space.AllocateRegion(64, false);
  std::memset(space.Data(a.base, 64), 0xAB, 64);
  space.CopyBytes(a, 0, b, 8, 48);
  CopyCounterSnapshot s = space.counters().Snapshot();
  EXPECT_EQ(s.payload_bytes_copied, 48u);
  EXPECT_EQ(s.payload_copy_events, 1u);
  EXPECT_EQ(std::memcmp(space.Data(a.base, 48), space.Data(b.base + 8, 48), 48),
            0);
}

TEST(CopyBytesTest, InterleavedCopiesSumToDelta) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle a = space.AllocateRegion(4096, false);
  RegionHandle b = space.AllocateRegion(4096, false);
  CopyCounters attributed;
  std::mt19937 rng(3);
  uint64_t expected = 0;
  for (int i = 0; i < 10; ++i) {
    uint64_t len = rng() % 4096;
    uint64_t so = rng() % (4096 - len + 1);
    uint64_t dst_off = rng() % (4096 - len + 1);
    expected += len;
    space.CopyBytes(a, so, b, dst_off, len, i % 2 ? &attributed : nullptr);
  }
  EXPECT_EQ(space.counters().Snapshot().payload_bytes_copied, expected);
  EXPECT_LE(attributed.Snapshot().payload_bytes_copied, expected);
}

TEST(CopyBytesTest, OutOfBoundsRejected) {
  MemorySpace space(0, SmallSpace(64 * kKiB));
  RegionHandle a = space.AllocateRegion(64, false);
  RegionHandle b = space.AllocateRegion(64, false);
  EXPECT_EQ(CodeOf([&] { space.CopyBytes(a, 32, b, 0, 33); }),
            ErrorCode::kOutOfBounds);
}

TEST(ArenaTest, FirstFitReusesFreedMiddle) {
  MemorySpace space(0, SmallSpace(1 * kMiB));
  ArenaAllocator arena(space, 64 * kKiB, true);
  RegionHandle a = arena.Allocate(1024);
  RegionHandle b = arena.Allocate(1024);
  RegionHandle c = arena.Allocate(1024);
  arena.Free(b);
  RegionHandle d = arena.Allocate(1024);
  EXPECT_EQ(d.base, b.base);
  EXPECT_LT(a.base, d.base);
  EXPECT_GT(c.base, d.base);
  EXPECT_EQ(d.token, arena.backing().token);
}

TEST(ArenaTest, OversizedRequestExhausts) {
  MemorySpace space(0, SmallSpace(1 * kMiB));
  ArenaAllocator arena(space, 64 * kKiB, true);
  EXPECT_EQ(CodeOf([&] { arena.Allocate(arena.backing().len + 1); }),
            ErrorCode::kArenaExhausted);
  EXPECT_EQ(CodeOf([&] { arena.Allocate(0); }), ErrorCode::kZeroLength);
}

TEST(ArenaTest, LedgerReplayMatchesResidency) {
  MemorySpace space(0, SmallSpace(8 * kMiB));
  ArenaAllocator arena(space, 4 * kMiB, true);
  std::mt19937_64 rng(2024);
  std::map<Addr, std::pair<RegionHandle, uint64_t>> ledger;
  uint64_t peak = 0;
  for (int i = 0; i < 1000; ++i) {
    if (!ledger.empty() && rng() % 3 == 0) {
      auto it = std::next(ledger.begin(), rng() % ledger.size());
      arena.Free(it->second.first);
      ledger.erase(it);
    } else {
      uint64_t len = 1 + rng() % 20000;
      RegionHandle h = arena.Allocate(len);
      ASSERT_TRUE(arena.Contains(h.base));
      ASSERT_LE(h.end(), arena.backing().end());
      ledger[h.base] = {h, len};
    }
    uint64_t sum = 0;
    Addr prev_end = 0;
    for (const auto& [base, entry] : ledger) {
      ASSERT_GE(base, prev_end);  // no overlap
      prev_end = base + entry.second;
      sum += entry.second;
    }
    peak = std::max(peak, sum);
    ASSERT_EQ(arena.current_resident(), sum);
  }
  EXPECT_EQ(arena.peak_resident(), peak);
  for (auto& [base, entry] : ledger) arena.Free(entry.first);
  EXPECT_EQ(arena.current_resident(), 0u);
  EXPECT_EQ(arena.live_count(), 0u);
}

TEST(ArenaTest, WindowPeakRestarts) {
  MemorySpace space(0, SmallSpace(1 * kMiB));
  ArenaAllocator arena(space, 64 * kKiB, false);
  RegionHandle a = arena.Allocate(4000);
  arena.Free(a);
  arena.StartWindow();
  RegionHandle b = arena.Allocate(100);
  EXPECT_EQ(arena.window_peak(), 100u);
  EXPECT_EQ(arena.peak_resident(), 4000u);
  EXPECT_FALSE(arena.registered());
  arena.Free(b);
}

}  // namespace
}  // namespace rdmaflow
