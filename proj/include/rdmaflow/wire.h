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

// Bit-exact byte layouts shared by the transfer protocols. All multi-byte
// integers are little-endian. See FORMATS.md for annotated hex dumps.

#ifndef RDMAFLOW_WIRE_H_
#define RDMAFLOW_WIRE_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace rdmaflow {

enum class ElemType : uint8_t { kF32 = 0, kF64 = 1, kI32 = 2, kI64 = 3, kU8 = 4 };

uint64_t ElemSize(ElemType t);
std::string_view ElemTypeName(ElemType t);
bool IsValidElemType(uint8_t raw);

inline constexpr uint8_t kFlagEmpty = 0x00;
inline constexpr uint8_t kFlagReady = 0x01;

// product(dims) * elem_size; throws LengthMismatch on overflow.
uint64_t PayloadBytes(std::span<const uint64_t> dims, ElemType t);

// Static placement region: payload followed by one flag byte.
uint64_t StaticRegionSize(std::span<const uint64_t> dims, ElemType t);

// Dynamic allocation meta block, fixed size for a fixed rank D:
//   [0]      elem_type
//   [1]      ndims (= D)
//   [2..8)   reserved, zero
//   [8..)    dims, D x u64
//   then     remote_addr u64, remote_token u64, payload_len u64
//   last     flag byte
inline constexpr uint64_t MetaBlockSize(uint64_t rank) { return 8 * rank + 33; }

struct MetaBlock {
  ElemType elem_type = ElemType::kF32;
  std::vector<uint64_t> dims;
  uint64_t remote_addr = 0;
  uint64_t remote_token = 0;
  uint64_t payload_len = 0;

  bool operator==(const MetaBlock&) const = default;
};

// Encoded with the flag byte set (0x01). Throws RankZero for empty dims.
std::vector<std::byte> EncodeMeta(std::span<const uint64_t> dims, ElemType t,
                                  uint64_t remote_addr, uint64_t remote_token);

// Throws LengthMismatch (wrong byte count or inconsistent payload_len),
// RankMismatch, BadElemType or FlagNotSet.
MetaBlock DecodeMeta(std::span<const std::byte> bytes, uint64_t expected_rank);

enum class Mechanism : uint8_t { kStatic = 0, kDynamic = 1 };
std::string_view MechanismName(Mechanism m);

// Address distribution record, fixed 33 bytes:
//   edge_id u64 | base_addr u64 | token u64 | region_len u64 | mechanism u8
struct AddrExchangeMsg {
  uint64_t edge_id = 0;
  uint64_t base_addr = 0;
  uint64_t token = 0;
  uint64_t region_len = 0;
  Mechanism mechanism = Mechanism::kStatic;

  bool operator==(const AddrExchangeMsg&) const = default;
};

inline constexpr uint64_t kAddrExchangeMsgSize = 33;
std::vector<std::byte> EncodeAddrExchange(const AddrExchangeMsg& msg);
AddrExchangeMsg DecodeAddrExchange(std::span<const std::byte> bytes);

// RPC baseline fragment header, 16 bytes:
//   msg_id u64 | frag_index u32 | frag_count u32
struct FragmentHeader {
  uint64_t msg_id = 0;
  uint32_t frag_index = 0;
  uint32_t frag_count = 0;

  bool operator==(const FragmentHeader&) const = default;
};

inline constexpr uint64_t kFragmentHeaderSize = 16;
inline constexpr uint64_t kFragmentSize = 4096;
inline constexpr uint64_t kFragmentBodyCapacity = kFragmentSize - kFragmentHeaderSize;

void EncodeFragmentHeader(const FragmentHeader& h, std::span<std::byte> out);
FragmentHeader DecodeFragmentHeader(std::span<const std::byte> bytes);
// Number of fragments needed for a message body of `body_len` bytes (>= 1).
uint32_t FragmentCount(uint64_t body_len);

// Little-endian helpers.
void StoreU64(std::byte* p, uint64_t v);
uint64_t LoadU64(const std::byte* p);
void StoreU32(std::byte* p, uint32_t v);
uint32_t LoadU32(const std::byte* p);

}  // namespace rdmaflow

#endif  // RDMAFLOW_WIRE_H_
