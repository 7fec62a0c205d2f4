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

// Compiled with -mavx2 only; callers reach it through Avx2Kernels(), which
// checks the CPU first.

#include <immintrin.h>

#include <limits>

#include "kernels_internal.h"

namespace rdmaflow::kernels {

namespace {

void Add(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 va = _mm256_loadu_ps(a + i);
    __m256 vb = _mm256_loadu_ps(b + i);
    _mm256_storeu_ps(out + i, _mm256_add_ps(va, vb));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void Scale(float* x, float s, size_t n) {
  const __m256 vs = _mm256_set1_ps(s);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), vs));
  }
  for (; i < n; ++i) x[i] *= s;
}

void Axpy(float a, const float* x, float* y, size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) {
    float prod = a * x[i];
    y[i] = y[i] + prod;
  }
}

float ReduceMax(const float* x, size_t n) {
  const float neg_inf = -std::numeric_limits<float>::infinity();
  size_t i = 0;
  float m = neg_inf;
  if (n >= 8) {
    __m256 acc = _mm256_set1_ps(neg_inf);
    for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(_mm256_loadu_ps(x + i), acc);
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    for (float v : lanes) m = v > m ? v : m;
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

void MatMul(const float* a, const float* b, float* c, size_t m, size_t k,
            size_t n) {
  for (size_t i = 0; i < m; ++i) {
    size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_setzero_ps();
      for (size_t p = 0; p < k; ++p) {
        __m256 prod = _mm256_mul_ps(_mm256_set1_ps(a[i * k + p]),
                                    _mm256_loadu_ps(b + p * n + j));
        acc = _mm256_add_ps(acc, prod);
      }
      _mm256_storeu_ps(c + i * n + j, acc);
    }
    for (; j < n; ++j) {
      float acc = 0.0f;
      for (size_t p = 0; p < k; ++p) {
        float prod = a[i * k + p] * b[p * n + j];
        acc = acc + prod;
      }
      c[i * n + j] = acc;
    }
  }
}

}  // namespace

const KernelTable& Avx2Table() {
  // Sigmoid has no vector exp that matches libm bit for bit; reuse scalar.
  static const KernelTable table{Isa::kAvx2, Add,    Scale,          Axpy,
                                 ReduceMax,  MatMul, scalar::Sigmoid};
  return table;
}

}  // namespace rdmaflow::kernels
