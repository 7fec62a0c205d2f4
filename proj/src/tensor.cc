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

#include "rdmaflow/tensor.h"

#include <cstring>

namespace rdmaflow {

Buffer::Buffer(MemorySpace& space, RegionHandle region, ArenaAllocator* owner,
               std::function<void(const RegionHandle&)> on_release)
    : space_(space),
      region_(region),
      owner_(owner),
      on_release_(std::move(on_release)) {}

Buffer::~Buffer() {
  if (owner_ != nullptr) owner_->Free(region_);
  if (on_release_) on_release_(region_);
}

void Buffer::BorrowTail(uint64_t payload_len) {
  std::lock_guard<std::mutex> lock(tail_mu_);
  if (tail_borrowers_++ == 0) {
    saved_tail_ = space_.LoadByte(region_.base + payload_len);
    space_.StoreByte(region_.base + payload_len, kFlagReady);
  }
}

void Buffer::ReturnTail(uint64_t payload_len) {
  std::lock_guard<std::mutex> lock(tail_mu_);
  if (--tail_borrowers_ == 0) {
    space_.StoreByte(region_.base + payload_len, saved_tail_);
  }
}

uint64_t Tensor::num_elements() const {
  uint64_t n = 1;
  for (uint64_t d : dims) n *= d;
  return n;
}

std::vector<std::byte> Tensor::CopyOut() const {
  const uint64_t n = bytes();
  std::vector<std::byte> out(n);
  if (n) std::memcpy(out.data(), buffer->data(), n);
  return out;
}

Tensor AllocateTensor(ArenaAllocator& allocator, std::vector<uint64_t> dims,
                      ElemType t,
                      std::function<void(const RegionHandle&)> on_release) {
  Tensor out;
  out.dims = std::move(dims);
  out.elem_type = t;
  RegionHandle h = allocator.Allocate(out.bytes() + 1);
  out.buffer = std::make_shared<Buffer>(allocator.space(), h, &allocator,
                                        std::move(on_release));
  return out;
}

}  // namespace rdmaflow
