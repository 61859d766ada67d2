#pragma once

// Row-major matrix multiply kernels. This is the compute core behind the
// im2col convolution path, so it is written for throughput on a single
// CPU core while keeping a fixed, documented summation order:
//
//   C[i][j] = seed + sum_{k=0}^{K-1} A[i][k] * B[k][j]
//
// accumulated strictly in ascending k with a single binary32 (resp.
// binary64) accumulator per output cell, where seed is 0, a per-row bias,
// or the previous value of C[i][j] in accumulate mode. The AVX-512 path
// blocks over k to keep the B panel cache-resident, but each cell's
// accumulator survives across blocks, so the order (and therefore the
// result, bit for bit) is identical to the naive triple loop with fused
// multiply-add. Every output cell is owned by exactly one kernel
// invocation, which makes results independent of how callers partition
// work across threads.

#include <cstddef>

#include "fastnet/error.hpp"
#include "fastnet/tensor.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace fastnet {
namespace detail {

// Generic tiled kernel, used for double and as the portable float fallback.
template <typename T>
void gemm_tiled(const T* a, const T* b, T* c, int m, int k, int n, const T* bias, bool accumulate) {
  constexpr int MR = 4;
  constexpr int NR = 16;
  for (int j0 = 0; j0 < n; j0 += NR) {
    const int nr = (n - j0) < NR ? (n - j0) : NR;
    for (int i0 = 0; i0 < m; i0 += MR) {
      const int mr = (m - i0) < MR ? (m - i0) : MR;
      T acc[MR][NR];
      for (int r = 0; r < mr; ++r) {
        const T seed = bias ? bias[i0 + r] : T(0);
        for (int v = 0; v < nr; ++v)
          acc[r][v] = accumulate ? c[static_cast<std::size_t>(i0 + r) * n + j0 + v] : seed;
      }
      for (int kk = 0; kk < k; ++kk) {
        const T* brow = b + static_cast<std::size_t>(kk) * n + j0;
        for (int r = 0; r < mr; ++r) {
          const T av = a[static_cast<std::size_t>(i0 + r) * k + kk];
          for (int v = 0; v < nr; ++v) acc[r][v] += av * brow[v];
        }
      }
      for (int r = 0; r < mr; ++r)
        for (int v = 0; v < nr; ++v) c[static_cast<std::size_t>(i0 + r) * n + j0 + v] = acc[r][v];
    }
  }
}

#if defined(__AVX512F__)

// 8x48 register tile, k-blocked. kc <= KC, first marks the k0 == 0 block.
inline void gemm_f32_8x48(const float* a, int lda, const float* b, int ldb, float* c, int ldc, int kc,
                          bool first, const float* bias, bool accumulate) {
  __m512 acc[8][3];
  for (int r = 0; r < 8; ++r) {
    if (!first || accumulate) {
      for (int v = 0; v < 3; ++v) acc[r][v] = _mm512_loadu_ps(c + static_cast<std::size_t>(r) * ldc + v * 16);
    } else {
      const __m512 seed = bias ? _mm512_set1_ps(bias[r]) : _mm512_setzero_ps();
      for (int v = 0; v < 3; ++v) acc[r][v] = seed;
    }
  }
  const float* brow = b;
  for (int kk = 0; kk < kc; ++kk, brow += ldb) {
    const __m512 b0 = _mm512_loadu_ps(brow);
    const __m512 b1 = _mm512_loadu_ps(brow + 16);
    const __m512 b2 = _mm512_loadu_ps(brow + 32);
    for (int r = 0; r < 8; ++r) {
      const __m512 av = _mm512_set1_ps(a[static_cast<std::size_t>(r) * lda + kk]);
      acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_ps(av, b2, acc[r][2]);
    }
  }
  for (int r = 0; r < 8; ++r)
    for (int v = 0; v < 3; ++v) _mm512_storeu_ps(c + static_cast<std::size_t>(r) * ldc + v * 16, acc[r][v]);
}

// Masked tail tile: mr <= 8 rows, nr <= 16 columns.
inline void gemm_f32_rx16(int mr, int nr, const float* a, int lda, const float* b, int ldb, float* c,
                          int ldc, int kc, bool first, const float* bias, bool accumulate) {
  const __mmask16 mask = static_cast<__mmask16>((1u << nr) - 1u);
  __m512 acc[8];
  for (int r = 0; r < mr; ++r) {
    if (!first || accumulate) {
      acc[r] = _mm512_maskz_loadu_ps(mask, c + static_cast<std::size_t>(r) * ldc);
    } else {
      acc[r] = bias ? _mm512_set1_ps(bias[r]) : _mm512_setzero_ps();
    }
  }
  const float* brow = b;
  for (int kk = 0; kk < kc; ++kk, brow += ldb) {
    const __m512 bv = _mm512_maskz_loadu_ps(mask, brow);
    for (int r = 0; r < mr; ++r) {
      const __m512 av = _mm512_set1_ps(a[static_cast<std::size_t>(r) * lda + kk]);
      acc[r] = _mm512_fmadd_ps(av, bv, acc[r]);
    }
  }
  for (int r = 0; r < mr; ++r)
    _mm512_mask_storeu_ps(c + static_cast<std::size_t>(r) * ldc, mask, acc[r]);
}

inline void gemm_f32(const float* a, const float* b, float* c, int m, int k, int n, const float* bias,
                     bool accumulate) {
  constexpr int KC = 128;  // B panel of 48 columns x 128 rows = 24 KiB, L1-resident
  int j0 = 0;
  for (; j0 + 48 <= n; j0 += 48) {
    for (int k0 = 0; k0 < k; k0 += KC) {
      const int kc = (k - k0) < KC ? (k - k0) : KC;
      const bool first = (k0 == 0);
      int i0 = 0;
      for (; i0 + 8 <= m; i0 += 8)
        gemm_f32_8x48(a + static_cast<std::size_t>(i0) * k + k0, k, b + static_cast<std::size_t>(k0) * n + j0,
                      n, c + static_cast<std::size_t>(i0) * n + j0, n, kc, first, bias ? bias + i0 : nullptr,
                      accumulate);
      if (i0 < m) {
        for (int jj = 0; jj < 48; jj += 16)
          gemm_f32_rx16(m - i0, 16, a + static_cast<std::size_t>(i0) * k + k0, k,
                        b + static_cast<std::size_t>(k0) * n + j0 + jj, n,
                        c + static_cast<std::size_t>(i0) * n + j0 + jj, n, kc, first,
                        bias ? bias + i0 : nullptr, accumulate);
      }
    }
  }
  for (; j0 < n; j0 += 16) {
    const int nr = (n - j0) < 16 ? (n - j0) : 16;
    for (int k0 = 0; k0 < k; k0 += KC) {
      const int kc = (k - k0) < KC ? (k - k0) : KC;
      const bool first = (k0 == 0);
      int i0 = 0;
      for (; i0 + 8 <= m; i0 += 8)
        gemm_f32_rx16(8, nr, a + static_cast<std::size_t>(i0) * k + k0, k,
                      b + static_cast<std::size_t>(k0) * n + j0, n, c + static_cast<std::size_t>(i0) * n + j0,
                      n, kc, first, bias ? bias + i0 : nullptr, accumulate);
      if (i0 < m)
        gemm_f32_rx16(m - i0, nr, a + static_cast<std::size_t>(i0) * k + k0, k,
                      b + static_cast<std::size_t>(k0) * n + j0, n, c + static_cast<std::size_t>(i0) * n + j0,
                      n, kc, first, bias ? bias + i0 : nullptr, accumulate);
    }
  }
}

#endif  // __AVX512F__

// C (m x n) = seed + A (m x k) * B (k x n), seed = bias column, previous C
// (accumulate), or zero.
template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, const T* bias = nullptr,
          bool accumulate = false) {
  gemm_tiled(a, b, c, m, k, n, bias, accumulate);
}

#if defined(__AVX512F__)
template <>
inline void gemm<float>(const float* a, const float* b, float* c, int m, int k, int n, const float* bias,
                        bool accumulate) {
  gemm_f32(a, b, c, m, k, n, bias, accumulate);
}
#endif

// dst (cols x rows) = transpose of src (rows x cols); 32x32 tiles.
template <typename T>
void transpose(const T* src, int rows, int cols, T* dst) {
  constexpr int TB = 32;
  for (int r0 = 0; r0 < rows; r0 += TB) {
    const int r1 = (r0 + TB) < rows ? (r0 + TB) : rows;
    for (int c0 = 0; c0 < cols; c0 += TB) {
      const int c1 = (c0 + TB) < cols ? (c0 + TB) : cols;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c)
          dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
    }
  }
}

}  // namespace detail

// Matrix product of two rank-2 tensors.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail(ErrorCode::shape_mismatch, "matmul: want rank-2 operands, got " + a.shape().str() + " and " + b.shape().str());
  if (a.extent(1) != b.extent(0))
    fail(ErrorCode::shape_mismatch,
         "matmul: inner extents disagree: " + a.shape().str() + " x " + b.shape().str());
  Tensor<T> c({a.extent(0), b.extent(1)});
  detail::gemm(a.data(), b.data(), c.data(), a.extent(0), a.extent(1), b.extent(1));
  return c;
}

}  // namespace fastnet
