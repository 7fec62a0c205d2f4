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

#ifndef RDMAFLOW_MEMSPACE_H_
#define RDMAFLOW_MEMSPACE_H_

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <utility>
#include <vector>

namespace rdmaflow {

using ServerId = uint32_t;
using Addr = uint64_t;
using Token = uint64_t;

inline constexpr uint64_t kKiB = 1024;
inline constexpr uint64_t kMiB = 1024 * kKiB;
inline constexpr uint64_t kAddrAlignment = 8;

inline constexpr uint64_t AlignUp(uint64_t v, uint64_t a) {
  return (v + a - 1) / a * a;
}

// A contiguous byte range inside one MemorySpace. Arena sub-allocations share
// the region_id and token of their backing region.
struct RegionHandle {
  uint32_t region_id = 0;
  ServerId server = 0;
  Addr base = 0;
  uint64_t len = 0;
  Token token = 0;
  bool registered = false;

  Addr end() const { return base + len; }
  bool operator==(const RegionHandle&) const = default;
};

struct CopyCounterSnapshot {
  uint64_t payload_bytes_copied = 0;
  uint64_t payload_copy_events = 0;
  uint64_t serialize_bytes = 0;

  CopyCounterSnapshot& operator+=(const CopyCounterSnapshot& o);
  bool operator==(const CopyCounterSnapshot&) const = default;
};

// Monotone within a run. Reset() is only meant to be called between runs.
class CopyCounters {
 public:
  void AddPayload(uint64_t bytes);
  void AddSerialize(uint64_t bytes);
  CopyCounterSnapshot Snapshot() const;
  void Reset();

 private:
  std::atomic<uint64_t> payload_bytes_copied_{0};
  std::atomic<uint64_t> payload_copy_events_{0};
  std::atomic<uint64_t> serialize_bytes_{0};
};

struct MemorySpaceOptions {
  uint64_t capacity = 256 * kMiB;
  size_t max_regions = 1024;
  uint64_t token_seed = 0x5eed;
};

// Byte-addressable memory of one simulated server. Addresses are offsets in
// [0, capacity). Region metadata is mutex protected; bulk data access is not,
// but single bytes can be loaded/stored atomically (the flag protocol needs
// this).
class MemorySpace {
 public:
  explicit MemorySpace(ServerId id, MemorySpaceOptions options = {});
  ~MemorySpace();

  MemorySpace(const MemorySpace&) = delete;
  MemorySpace& operator=(const MemorySpace&) = delete;

  ServerId server_id() const { return id_; }
  uint64_t capacity() const { return options_.capacity; }

  // First-fit, 8-byte aligned. Registered regions get a fresh random token.
  RegionHandle AllocateRegion(uint64_t len, bool register_region);
  void FreeRegion(const RegionHandle& handle);
  size_t region_count() const;
  std::vector<RegionHandle> Regions() const;

  // Throws BadToken / RemoteOutOfBounds unless [addr, addr+len) lies inside
  // one registered region whose token equals `token`.
  void CheckRemoteAccess(Addr addr, uint64_t len, Token token) const;
  // True iff [addr, addr+len) lies inside one registered region.
  bool IsRegistered(Addr addr, uint64_t len) const;

  // Raw access, bounds-checked against capacity (OutOfBounds).
  std::byte* Data(Addr addr, uint64_t len);
  const std::byte* Data(Addr addr, uint64_t len) const;

  uint8_t LoadByte(Addr addr) const;     // acquire
  void StoreByte(Addr addr, uint8_t v);  // release

  // Writes `len` bytes in ascending order; the highest byte is published
  // with release semantics after the rest, so an observer that acquires it
  // sees the whole chunk.
  void WriteAscending(Addr dst, const std::byte* src, uint64_t len);

  // Instrumented local copy between two handles of this space. Updates this
  // space's counters and, if given, `attributed` as well.
  void CopyBytes(const RegionHandle& src, uint64_t src_offset,
                 const RegionHandle& dst, uint64_t dst_offset, uint64_t len,
                 CopyCounters* attributed = nullptr);

  CopyCounters& counters() { return counters_; }
  const CopyCounters& counters() const { return counters_; }

 private:
  struct Region {
    Addr base;
    uint64_t len;
    bool registered;
    Token token;
  };

  const Region* FindRegionLocked(Addr addr, uint64_t len) const;
  void CheckBounds(Addr addr, uint64_t len) const;

  ServerId id_;
  MemorySpaceOptions options_;
  std::unique_ptr<std::byte, void (*)(void*)> storage_;
  mutable std::mutex mu_;
  uint32_t next_region_id_ = 1;
  std::map<uint32_t, Region> regions_;
  std::map<Addr, uint64_t> free_;  // base -> len, coalesced
  std::mt19937_64 token_rng_;
  CopyCounters counters_;
};

// First-fit sub-allocator over one region of a MemorySpace. When the backing
// region is registered this is the RDMA arena; an unregistered backing gives
// the "normal" tensor heap.
class ArenaAllocator {
 public:
  ArenaAllocator(MemorySpace& space, uint64_t backing_len, bool register_backing);
  ~ArenaAllocator();

  ArenaAllocator(const ArenaAllocator&) = delete;
  ArenaAllocator& operator=(const ArenaAllocator&) = delete;

  // Throws ZeroLength for len 0 and ArenaExhausted when no block fits.
  RegionHandle Allocate(uint64_t len);
  void Free(const RegionHandle& handle);

  MemorySpace& space() { return space_; }
  const RegionHandle& backing() const { return backing_; }
  bool registered() const { return backing_.registered; }
  bool Contains(Addr addr) const {
    return addr >= backing_.base && addr < backing_.end();
  }

  uint64_t current_resident() const;
  uint64_t peak_resident() const;
  size_t live_count() const;
  // (addr, requested len) of every live allocation, ascending by addr.
  std::vector<std::pair<Addr, uint64_t>> LiveAllocations() const;

  // Secondary watermark restartable per measurement window (e.g. one
  // iteration); peak_resident() stays the all-time maximum.
  void StartWindow();
  uint64_t window_peak() const;

 private:
  struct Live {
    uint64_t reserved;
    uint64_t requested;
  };

  MemorySpace& space_;
  RegionHandle backing_;
  mutable std::mutex mu_;
  std::map<uint64_t, uint64_t> free_;  // offset -> len
  std::map<uint64_t, Live> live_;      // offset -> sizes
  uint64_t current_ = 0;
  uint64_t peak_ = 0;
  uint64_t window_peak_ = 0;
};

}  // namespace rdmaflow

#endif  // RDMAFLOW_MEMSPACE_H_
