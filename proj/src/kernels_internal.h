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

#ifndef RDMAFLOW_SRC_KERNELS_INTERNAL_H_
#define RDMAFLOW_SRC_KERNELS_INTERNAL_H_

#include <cstddef>

#include "rdmaflow/kernels.h"

namespace rdmaflow::kernels {

namespace scalar {
void Add(const float* a, const float* b, float* out, size_t n);
void Scale(float* x, float s, size_t n);
void Axpy(float a, const float* x, float* y, size_t n);
float ReduceMax(const float* x, size_t n);
void MatMul(const float* a, const float* b, float* c, size_t m, size_t k,
            size_t n);
void Sigmoid(const float* x, float* out, size_t n);
}  // namespace scalar

#if defined(RDMAFLOW_HAVE_AVX2)
const KernelTable& Avx2Table();
#endif

}  // namespace rdmaflow::kernels

#endif  // RDMAFLOW_SRC_KERNELS_INTERNAL_H_
