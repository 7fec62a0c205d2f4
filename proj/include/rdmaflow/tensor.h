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

#ifndef RDMAFLOW_TENSOR_H_
#define RDMAFLOW_TENSOR_H_

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "rdmaflow/memspace.h"
#include "rdmaflow/wire.h"

namespace rdmaflow {

// Backing storage of a tensor. Every buffer reserves one byte past the
// payload ("tail") so it can be the source of a single payload+flag write.
class Buffer {
 public:
  // `owner` may be null for views over memory managed elsewhere (static
  // receive regions). `on_release` runs after the region is returned.
  Buffer(MemorySpace& space, RegionHandle region, ArenaAllocator* owner,
         std::function<void(const RegionHandle&)> on_release = {});
  ~Buffer();

  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;

  MemorySpace& space() const { return space_; }
  const RegionHandle& region() const { return region_; }
  bool registered() const { return region_.registered; }
  std::byte* data() { return space_.Data(region_.base, region_.len); }

  // Sets the byte at `payload_len` to the ready flag for the duration of a
  // static send; concurrent borrowers share it and the last one restores
  // the original value.
  void BorrowTail(uint64_t payload_len);
  void ReturnTail(uint64_t payload_len);

 private:
  MemorySpace& space_;
  RegionHandle region_;
  ArenaAllocator* owner_;
  std::function<void(const RegionHandle&)> on_release_;
  std::mutex tail_mu_;
  int tail_borrowers_ = 0;
  uint8_t saved_tail_ = 0;
};

struct Tensor {
  std::vector<uint64_t> dims;
  ElemType elem_type = ElemType::kF32;
  std::shared_ptr<Buffer> buffer;

  uint64_t bytes() const { return PayloadBytes(dims, elem_type); }
  uint64_t num_elements() const;
  std::byte* data() const { return buffer->data(); }
  float* f32() const { return reinterpret_cast<float*>(buffer->data()); }
  Addr addr() const { return buffer->region().base; }
  bool registered() const { return buffer->registered(); }
  std::vector<std::byte> CopyOut() const;
};

// Allocates payload+1 bytes from `allocator`.
Tensor AllocateTensor(ArenaAllocator& allocator, std::vector<uint64_t> dims,
                      ElemType t,
                      std::function<void(const RegionHandle&)> on_release = {});

}  // namespace rdmaflow

#endif  // RDMAFLOW_TENSOR_H_
