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

#include <cstdlib>
#include <string_view>

#include "kernels_internal.h"

namespace rdmaflow::kernels {

std::string_view IsaName(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

bool CpuSupportsAvx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const KernelTable* Avx2Kernels() {
#if defined(RDMAFLOW_HAVE_AVX2)
  if (CpuSupportsAvx2()) return &Avx2Table();
#endif
  return nullptr;
}

const KernelTable& ActiveKernels() {
  static const KernelTable& active = [] () -> const KernelTable& {
    const char* forced = std::getenv("RDMAFLOW_ISA");
    if (forced != nullptr && std::string_view(forced) == "scalar") {
      return ScalarKernels();
    }
    const KernelTable* avx2 = Avx2Kernels();
    return avx2 != nullptr ? *avx2 : ScalarKernels();
  }();
  return active;
}

}  // namespace rdmaflow::kernels
