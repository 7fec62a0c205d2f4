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

#ifndef RDMAFLOW_ERRORS_H_
#define RDMAFLOW_ERRORS_H_

#include <stdexcept>
#include <string>
#include <string_view>

namespace rdmaflow {

enum class ErrorCode {
  // memspace
  kZeroLength,
  kOutOfMemory,
  kTooManyRegions,
  kArenaExhausted,
  kOutOfBounds,
  // fabric
  kBadToken,
  kRemoteOutOfBounds,
  kNotRegistered,
  kInvalidLength,
  kPeerUnreachable,
  kRecvBufferTooSmall,
  kNoPostedReceive,
  kTimeout,
  kHandlerMissing,
  // wire
  kRankZero,
  kRankMismatch,
  kBadElemType,
  kLengthMismatch,
  kFlagNotSet,
  // graph
  kShapeMismatch,
  kMissingAnnotation,
  kInvalidConfig,
  kInvalidGraph,
  // analyzer
  kUnknownAddress,
  // runtime
  kSizeMismatch,
  kRankChanged,
  kReassemblyGap,
  kDeadlock,
  kProtocolViolation,
  // benchcli
  kUnknownKey,
  kBadValue,
};

std::string_view ErrorCodeName(ErrorCode code);

// All library failures surface as this exception type; `code()` is the
// programmatic discriminator, `what()` carries context for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void Fail(ErrorCode code, const std::string& message);

}  // namespace rdmaflow

#endif  // RDMAFLOW_ERRORS_H_
