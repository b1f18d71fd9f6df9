#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace aelab::detail {

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

/// C (+)= op(A) · op(B), row-major. op(A) is M×K, op(B) is K×N.
///
/// Transposed operands are packed first so the kernel always streams rows of
/// B; four rows of C are updated per pass over B.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  std::vector<T> a_packed;
  std::vector<T> b_packed;
  if (trans_a) {
    a_packed.resize(m * k);
    transpose(a, k, m, a_packed.data());
    a = a_packed.data();
  }
  if (trans_b) {
    b_packed.resize(k * n);
    transpose(b, n, k, b_packed.data());
    b = b_packed.data();
  }
  if (!accumulate) std::fill(c, c + m * n, T{0});

  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

}  // namespace aelab::detail
