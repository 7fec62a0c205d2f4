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

// Arithmetic kernels for the compute operators. Each entry has a scalar
// reference implementation; an AVX2 variant is selected at runtime when the
// CPU supports it. Variants evaluate in the same order as the reference and
// never contract multiply/add, so results are bit-identical.

#ifndef RDMAFLOW_KERNELS_H_
#define RDMAFLOW_KERNELS_H_

#include <cstddef>
#include <string_view>

namespace rdmaflow::kernels {

enum class Isa { kScalar, kAvx2 };
std::string_view IsaName(Isa isa);

struct KernelTable {
  Isa isa;
  // out[i] = a[i] + b[i]
  void (*add)(const float* a, const float* b, float* out, size_t n);
  // x[i] *= s
  void (*scale)(float* x, float s, size_t n);
  // y[i] += a * x[i]
  void (*axpy)(float a, const float* x, float* y, size_t n);
  // max over x[0..n); -inf when n == 0
  float (*reduce_max)(const float* x, size_t n);
  // c[m x n] = a[m x k] * b[k x n], row-major, k summed in ascending order
  void (*matmul)(const float* a, const float* b, float* c, size_t m, size_t k,
                 size_t n);
  // out[i] = 1 / (1 + exp(-x[i]))
  void (*sigmoid)(const float* x, float* out, size_t n);
};

const KernelTable& ScalarKernels();
// nullptr when the build has no AVX2 variant or the CPU lacks AVX2.
const KernelTable* Avx2Kernels();
bool CpuSupportsAvx2();

// The table used by the runtime: AVX2 when available, unless the
// RDMAFLOW_ISA environment variable is set to "scalar".
const KernelTable& ActiveKernels();

}  // namespace rdmaflow::kernels

#endif  // RDMAFLOW_KERNELS_H_
