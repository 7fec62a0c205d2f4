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

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <string>

#include "rdmaflow/errors.h"

namespace rdmaflow {

namespace {

// Carves `len` bytes (already aligned) out of a first-fit free list.
// Returns false if no block is large enough.
bool TakeFirstFit(std::map<uint64_t, uint64_t>& free_list, uint64_t len,
                  uint64_t* out) {
  for (auto it = free_list.begin(); it != free_list.end(); ++it) {
    if (it->second < len) continue;
    uint64_t start = it->first;
    uint64_t remaining = it->second - len;
    free_list.erase(it);
    if (remaining > 0) free_list.emplace(start + len, remaining);
    *out = start;
    return true;
  }
  return false;
}

void GiveBack(std::map<uint64_t, uint64_t>& free_list, uint64_t start,
              uint64_t len) {
  auto next = free_list.lower_bound(start);
  if (next != free_list.begin()) {
    auto prev = std::prev(next);
    if (prev->first + prev->second == start) {
      start = prev->first;
      len += prev->second;
      free_list.erase(prev);
    }
  }
  next = free_list.lower_bound(start);
  if (next != free_list.end() && start + len == next->first) {
    len += next->second;
    free_list.erase(next);
  }
  free_list.emplace(start, len);
}

}  // namespace

CopyCounterSnapshot& CopyCounterSnapshot::operator+=(
    const CopyCounterSnapshot& o) {
  payload_bytes_copied += o.payload_bytes_copied;
  payload_copy_events += o.payload_copy_events;
  serialize_bytes += o.serialize_bytes;
  return *this;
}

void CopyCounters::AddPayload(uint64_t bytes) {
  payload_bytes_copied_.fetch_add(bytes, std::memory_order_relaxed);
  payload_copy_events_.fetch_add(1, std::memory_order_relaxed);
}

void CopyCounters::AddSerialize(uint64_t bytes) {
  serialize_bytes_.fetch_add(bytes, std::memory_order_relaxed);
}

CopyCounterSnapshot CopyCounters::Snapshot() const {
  CopyCounterSnapshot s;
  s.payload_bytes_copied = payload_bytes_copied_.load(std::memory_order_relaxed);
  s.payload_copy_events = payload_copy_events_.load(std::memory_order_relaxed);
  s.serialize_bytes = serialize_bytes_.load(std::memory_order_relaxed);
  return s;
}

void CopyCounters::Reset() {
  payload_bytes_copied_.store(0);
  payload_copy_events_.store(0);
  serialize_bytes_.store(0);
}

MemorySpace::MemorySpace(ServerId id, MemorySpaceOptions options)
    : id_(id),
      options_(options),
      // calloc keeps untouched pages lazily committed and zeroed.
      storage_(static_cast<std::byte*>(std::calloc(options.capacity, 1)),
               &std::free),
      token_rng_(options.token_seed ^ (0x9e3779b97f4a7c15ull * (id + 1))) {
  if (options_.capacity == 0 || storage_ == nullptr) {
    Fail(ErrorCode::kOutOfMemory,
         "cannot back memory space of " + std::to_string(options_.capacity) +
             " bytes");
  }
  free_.emplace(0, options_.capacity / kAddrAlignment * kAddrAlignment);
}

MemorySpace::~MemorySpace() = default;

RegionHandle MemorySpace::AllocateRegion(uint64_t len, bool register_region) {
  if (len == 0) Fail(ErrorCode::kZeroLength, "region length must be >= 1");
  std::lock_guard<std::mutex> lock(mu_);
  if (regions_.size() >= options_.max_regions) {
    Fail(ErrorCode::kTooManyRegions,
         "server " + std::to_string(id_) + " reached " +
             std::to_string(options_.max_regions) + " regions");
  }
  uint64_t base = 0;
  if (!TakeFirstFit(free_, AlignUp(len, kAddrAlignment), &base)) {
    Fail(ErrorCode::kOutOfMemory, "server " + std::to_string(id_) +
                                      " has no " + std::to_string(len) +
                                      " contiguous free bytes");
  }
  Token token = 0;
  if (register_region) {
    do {
      token = token_rng_();
    } while (token == 0);
  }
  uint32_t rid = next_region_id_++;
  regions_.emplace(rid, Region{base, len, register_region, token});
  return RegionHandle{rid, id_, base, len, token, register_region};
}

void MemorySpace::FreeRegion(const RegionHandle& handle) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = regions_.find(handle.region_id);
  if (it == regions_.end() || it->second.base != handle.base) {
    Fail(ErrorCode::kOutOfBounds, "freeing unknown region " +
                                      std::to_string(handle.region_id));
  }
  GiveBack(free_, it->second.base, AlignUp(it->second.len, kAddrAlignment));
  regions_.erase(it);
}

size_t MemorySpace::region_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return regions_.size();
}

std::vector<RegionHandle> MemorySpace::Regions() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<RegionHandle> out;
  out.reserve(regions_.size());
  for (const auto& [rid, r] : regions_) {
    out.push_back(RegionHandle{rid, id_, r.base, r.len, r.token, r.registered});
  }
  return out;
}

const MemorySpace::Region* MemorySpace::FindRegionLocked(Addr addr,
                                                         uint64_t len) const {
  for (const auto& [rid, r] : regions_) {
    if (addr >= r.base && addr - r.base <= r.len && len <= r.len - (addr - r.base)) {
      return &r;
    }
  }
  return nullptr;
}

void MemorySpace::CheckRemoteAccess(Addr addr, uint64_t len,
                                    Token token) const {
  std::lock_guard<std::mutex> lock(mu_);
  const Region* r = FindRegionLocked(addr, len);
  if (r == nullptr || !r->registered) {
    Fail(ErrorCode::kRemoteOutOfBounds,
         "range [" + std::to_string(addr) + ", +" + std::to_string(len) +
             ") is not inside a registered region of server " +
             std::to_string(id_));
  }
  if (r->token != token) {
    Fail(ErrorCode::kBadToken, "token mismatch on server " +
                                   std::to_string(id_) + " at addr " +
                                   std::to_string(addr));
  }
}

bool MemorySpace::IsRegistered(Addr addr, uint64_t len) const {
  std::lock_guard<std::mutex> lock(mu_);
  const Region* r = FindRegionLocked(addr, len);
  return r != nullptr && r->registered;
}

void MemorySpace::CheckBounds(Addr addr, uint64_t len) const {
  if (addr > options_.capacity || len > options_.capacity - addr) {
    Fail(ErrorCode::kOutOfBounds,
         "[" + std::to_string(addr) + ", +" + std::to_string(len) +
             ") exceeds capacity of server " + std::to_string(id_));
  }
}

std::byte* MemorySpace::Data(Addr addr, uint64_t len) {
  CheckBounds(addr, len);
  return storage_.get() + addr;
}

const std::byte* MemorySpace::Data(Addr addr, uint64_t len) const {
  CheckBounds(addr, len);
  return storage_.get() + addr;
}

uint8_t MemorySpace::LoadByte(Addr addr) const {
  CheckBounds(addr, 1);
  auto* p = reinterpret_cast<uint8_t*>(storage_.get() + addr);
  return std::atomic_ref<uint8_t>(*p).load(std::memory_order_acquire);
}

void MemorySpace::StoreByte(Addr addr, uint8_t v) {
  CheckBounds(addr, 1);
  auto* p = reinterpret_cast<uint8_t*>(storage_.get() + addr);
  std::atomic_ref<uint8_t>(*p).store(v, std::memory_order_release);
}

void MemorySpace::WriteAscending(Addr dst, const std::byte* src, uint64_t len) {
  if (len == 0) return;
  std::byte* out = Data(dst, len);
  // Pollers may read these bytes while they land, so every store is atomic:
  // relaxed for the body, word-wide where aligned, release for the last byte.
  const uint64_t body = len - 1;
  uint64_t i = 0;
  auto store_byte = [&](uint64_t k) {
    std::atomic_ref<uint8_t>(*reinterpret_cast<uint8_t*>(out + k))
        .store(static_cast<uint8_t>(src[k]), std::memory_order_relaxed);
  };
  for (; i < body && (reinterpret_cast<uintptr_t>(out + i) % 8) != 0; ++i) store_byte(i);
  for (; i + 8 <= body; i += 8) {
    uint64_t word;
    std::memcpy(&word, src + i, 8);
    std::atomic_ref<uint64_t>(*reinterpret_cast<uint64_t*>(out + i))
        .store(word, std::memory_order_relaxed);
  }
  for (; i < body; ++i) store_byte(i);
  auto* last = reinterpret_cast<uint8_t*>(out + len - 1);
  std::atomic_ref<uint8_t>(*last).store(static_cast<uint8_t>(src[len - 1]),
                                        std::memory_order_release);
}

void MemorySpace::CopyBytes(const RegionHandle& src, uint64_t src_offset,
                            const RegionHandle& dst, uint64_t dst_offset,
                            uint64_t len, CopyCounters* attributed) {
  if (len == 0) return;
  if (src.server != id_ || dst.server != id_) {
    Fail(ErrorCode::kOutOfBounds, "copy handles belong to another server");
  }
  if (src_offset > src.len || len > src.len - src_offset ||
      dst_offset > dst.len || len > dst.len - dst_offset) {
    Fail(ErrorCode::kOutOfBounds, "copy of " + std::to_string(len) +
                                      " bytes exceeds a handle");
  }
  std::memmove(Data(dst.base + dst_offset, len), Data(src.base + src_offset, len),
               len);
  counters_.AddPayload(len);
  if (attributed != nullptr) attributed->AddPayload(len);
}

ArenaAllocator::ArenaAllocator(MemorySpace& space, uint64_t backing_len,
                               bool register_backing)
    : space_(space),
      backing_(space.AllocateRegion(backing_len, register_backing)) {
  free_.emplace(0, backing_len / kAddrAlignment * kAddrAlignment);
}

ArenaAllocator::~ArenaAllocator() { space_.FreeRegion(backing_); }

RegionHandle ArenaAllocator::Allocate(uint64_t len) {
  if (len == 0) Fail(ErrorCode::kZeroLength, "arena allocation of 0 bytes");
  uint64_t reserved = AlignUp(len, kAddrAlignment);
  std::lock_guard<std::mutex> lock(mu_);
  uint64_t offset = 0;
  if (reserved < len || !TakeFirstFit(free_, reserved, &offset)) {
    Fail(ErrorCode::kArenaExhausted,
         "no " + std::to_string(len) + "-byte block in arena of server " +
             std::to_string(space_.server_id()) + " (resident " +
             std::to_string(current_) + " of " + std::to_string(backing_.len) +
             ")");
  }
  live_.emplace(offset, Live{reserved, len});
  current_ += len;
  if (current_ > peak_) peak_ = current_;
  if (current_ > window_peak_) window_peak_ = current_;
  RegionHandle h = backing_;
  h.base = backing_.base + offset;
  h.len = len;
  return h;
}

void ArenaAllocator::Free(const RegionHandle& handle) {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = Contains(handle.base) ? live_.find(handle.base - backing_.base)
                                  : live_.end();
  if (it == live_.end() || it->second.requested != handle.len) {
    Fail(ErrorCode::kOutOfBounds, "freeing an address the arena of server " +
                                      std::to_string(space_.server_id()) +
                                      " did not hand out");
  }
  GiveBack(free_, it->first, it->second.reserved);
  current_ -= it->second.requested;
  live_.erase(it);
}

uint64_t ArenaAllocator::current_resident() const {
  std::lock_guard<std::mutex> lock(mu_);
  return current_;
}

uint64_t ArenaAllocator::peak_resident() const {
  std::lock_guard<std::mutex> lock(mu_);
  return peak_;
}

size_t ArenaAllocator::live_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return live_.size();
}

std::vector<std::pair<Addr, uint64_t>> ArenaAllocator::LiveAllocations() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::pair<Addr, uint64_t>> out;
  out.reserve(live_.size());
  for (const auto& [off, l] : live_) {
    out.emplace_back(backing_.base + off, l.requested);
  }
  return out;
}

void ArenaAllocator::StartWindow() {
  std::lock_guard<std::mutex> lock(mu_);
  window_peak_ = current_;
}

uint64_t ArenaAllocator::window_peak() const {
  std::lock_guard<std::mutex> lock(mu_);
  return window_peak_;
}

}  // namespace rdmaflow
