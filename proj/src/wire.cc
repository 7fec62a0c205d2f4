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

#include "rdmaflow/wire.h"

#include <string>

#include "rdmaflow/errors.h"

namespace rdmaflow {

void StoreU64(std::byte* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

uint64_t LoadU64(const std::byte* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

void StoreU32(std::byte* p, uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

uint32_t LoadU32(const std::byte* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

uint64_t ElemSize(ElemType t) {
  switch (t) {
    case ElemType::kF32: return 4;
    case ElemType::kF64: return 8;
    case ElemType::kI32: return 4;
    case ElemType::kI64: return 8;
    case ElemType::kU8: return 1;
  }
  Fail(ErrorCode::kBadElemType, "unknown element type");
}

std::string_view ElemTypeName(ElemType t) {
  switch (t) {
    case ElemType::kF32: return "f32";
    case ElemType::kF64: return "f64";
    case ElemType::kI32: return "i32";
    case ElemType::kI64: return "i64";
    case ElemType::kU8: return "u8";
  }
  return "?";
}

bool IsValidElemType(uint8_t raw) { return raw <= 4; }

std::string_view MechanismName(Mechanism m) {
  return m == Mechanism::kStatic ? "STATIC" : "DYNAMIC";
}

uint64_t PayloadBytes(std::span<const uint64_t> dims, ElemType t) {
  unsigned __int128 n = ElemSize(t);
  for (uint64_t d : dims) {
    n *= d;
    if (n > UINT64_MAX) Fail(ErrorCode::kLengthMismatch, "tensor size overflows u64");
  }
  return static_cast<uint64_t>(n);
}

uint64_t StaticRegionSize(std::span<const uint64_t> dims, ElemType t) {
  return PayloadBytes(dims, t) + 1;
}

std::vector<std::byte> EncodeMeta(std::span<const uint64_t> dims, ElemType t,
                                  uint64_t remote_addr, uint64_t remote_token) {
  if (dims.empty()) Fail(ErrorCode::kRankZero, "meta block needs rank >= 1");
  if (dims.size() > 255) Fail(ErrorCode::kRankMismatch, "rank exceeds 255");
  const uint64_t rank = dims.size();
  std::vector<std::byte> out(MetaBlockSize(rank), std::byte{0});
  out[0] = static_cast<std::byte>(t);
  out[1] = static_cast<std::byte>(rank);
  std::byte* p = out.data() + 8;
  for (uint64_t d : dims) {
    StoreU64(p, d);
    p += 8;
  }
  StoreU64(p, remote_addr);
  StoreU64(p + 8, remote_token);
  StoreU64(p + 16, PayloadBytes(dims, t));
  out.back() = std::byte{kFlagReady};
  return out;
}

MetaBlock DecodeMeta(std::span<const std::byte> bytes, uint64_t expected_rank) {
  // The rank byte is checked before the length so that a block written for a
  // different rank is reported as such rather than as a size problem.
  if (bytes.size() >= 2) {
    const auto header_rank = static_cast<uint8_t>(bytes[1]);
    if (header_rank != expected_rank) {
      Fail(ErrorCode::kRankMismatch, "meta block rank " +
                                         std::to_string(header_rank) +
                                         ", edge rank " +
                                         std::to_string(expected_rank));
    }
  }
  if (bytes.size() != MetaBlockSize(expected_rank)) {
    Fail(ErrorCode::kLengthMismatch,
         "meta block of " + std::to_string(bytes.size()) + " bytes, expected " +
             std::to_string(MetaBlockSize(expected_rank)));
  }
  const auto ndims = static_cast<uint8_t>(bytes[1]);
  const auto raw_type = static_cast<uint8_t>(bytes[0]);
  if (!IsValidElemType(raw_type)) {
    Fail(ErrorCode::kBadElemType, "elem_type " + std::to_string(raw_type));
  }
  if (static_cast<uint8_t>(bytes.back()) != kFlagReady) {
    Fail(ErrorCode::kFlagNotSet, "meta block flag is not set");
  }
  MetaBlock m;
  m.elem_type = static_cast<ElemType>(raw_type);
  const std::byte* p = bytes.data() + 8;
  m.dims.resize(ndims);
  for (auto& d : m.dims) {
    d = LoadU64(p);
    p += 8;
  }
  m.remote_addr = LoadU64(p);
  m.remote_token = LoadU64(p + 8);
  m.payload_len = LoadU64(p + 16);
  if (m.payload_len != PayloadBytes(m.dims, m.elem_type)) {
    Fail(ErrorCode::kLengthMismatch,
         "payload_len " + std::to_string(m.payload_len) +
             " disagrees with dims x elem_size");
  }
  return m;
}

std::vector<std::byte> EncodeAddrExchange(const AddrExchangeMsg& msg) {
  std::vector<std::byte> out(kAddrExchangeMsgSize);
  StoreU64(out.data(), msg.edge_id);
  StoreU64(out.data() + 8, msg.base_addr);
  StoreU64(out.data() + 16, msg.token);
  StoreU64(out.data() + 24, msg.region_len);
  out[32] = static_cast<std::byte>(msg.mechanism);
  return out;
}

AddrExchangeMsg DecodeAddrExchange(std::span<const std::byte> bytes) {
  if (bytes.size() != kAddrExchangeMsgSize) {
    Fail(ErrorCode::kLengthMismatch, "address exchange message of " +
                                         std::to_string(bytes.size()) + " bytes");
  }
  const auto mech = static_cast<uint8_t>(bytes[32]);
  if (mech > 1) Fail(ErrorCode::kBadValue, "mechanism byte " + std::to_string(mech));
  AddrExchangeMsg m;
  m.edge_id = LoadU64(bytes.data());
  m.base_addr = LoadU64(bytes.data() + 8);
  m.token = LoadU64(bytes.data() + 16);
  m.region_len = LoadU64(bytes.data() + 24);
  m.mechanism = static_cast<Mechanism>(mech);
  return m;
}

void EncodeFragmentHeader(const FragmentHeader& h, std::span<std::byte> out) {
  if (out.size() < kFragmentHeaderSize) {
    Fail(ErrorCode::kLengthMismatch, "fragment header needs 16 bytes");
  }
  StoreU64(out.data(), h.msg_id);
  StoreU32(out.data() + 8, h.frag_index);
  StoreU32(out.data() + 12, h.frag_count);
}

FragmentHeader DecodeFragmentHeader(std::span<const std::byte> bytes) {
  if (bytes.size() < kFragmentHeaderSize) {
    Fail(ErrorCode::kLengthMismatch, "fragment shorter than its header");
  }
  return FragmentHeader{LoadU64(bytes.data()), LoadU32(bytes.data() + 8),
                        LoadU32(bytes.data() + 12)};
}

uint32_t FragmentCount(uint64_t body_len) {
  if (body_len == 0) return 1;
  return static_cast<uint32_t>((body_len + kFragmentBodyCapacity - 1) /
                               kFragmentBodyCapacity);
}

}  // namespace rdmaflow
