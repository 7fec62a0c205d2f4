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

#include "rdmaflow/errors.h"

namespace rdmaflow {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kZeroLength: return "ZeroLength";
    case ErrorCode::kOutOfMemory: return "OutOfMemory";
    case ErrorCode::kTooManyRegions: return "TooManyRegions";
    case ErrorCode::kArenaExhausted: return "ArenaExhausted";
    case ErrorCode::kOutOfBounds: return "OutOfBounds";
    case ErrorCode::kBadToken: return "BadToken";
    case ErrorCode::kRemoteOutOfBounds: return "RemoteOutOfBounds";
    case ErrorCode::kNotRegistered: return "NotRegistered";
    case ErrorCode::kInvalidLength: return "InvalidLength";
    case ErrorCode::kPeerUnreachable: return "PeerUnreachable";
    case ErrorCode::kRecvBufferTooSmall: return "RecvBufferTooSmall";
    case ErrorCode::kNoPostedReceive: return "NoPostedReceive";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kHandlerMissing: return "HandlerMissing";
    case ErrorCode::kRankZero: return "RankZero";
    case ErrorCode::kRankMismatch: return "RankMismatch";
    case ErrorCode::kBadElemType: return "BadElemType";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kFlagNotSet: return "FlagNotSet";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kMissingAnnotation: return "MissingAnnotation";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kInvalidGraph: return "InvalidGraph";
    case ErrorCode::kUnknownAddress: return "UnknownAddress";
    case ErrorCode::kSizeMismatch: return "SizeMismatch";
    case ErrorCode::kRankChanged: return "RankChanged";
    case ErrorCode::kReassemblyGap: return "ReassemblyGap";
    case ErrorCode::kDeadlock: return "Deadlock";
    case ErrorCode::kProtocolViolation: return "ProtocolViolation";
    case ErrorCode::kUnknownKey: return "UnknownKey";
    case ErrorCode::kBadValue: return "BadValue";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
      code_(code) {}

void Fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace rdmaflow
