#pragma once

// Data-parallel compute cores. Each kernel has a serial reference and an
// OpenMP variant; both compute every output element with the same inner
// reduction order, so results are bit-identical regardless of thread count.
// The active backend is a process-wide switch (tests pin it to compare,
// tools/bench_kernels measures the difference).

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dwp::kernels {

enum class Backend { serial, openmp };

inline Backend& backend() {
#ifdef _OPENMP
  static Backend b = Backend::openmp;
#else
  static Backend b = Backend::serial;
#endif
  return b;
}

namespace detail {

// C (m x n) = A (m x k) * B (k x n), optionally accumulating into C.
template <class T, bool Acc>
inline void gemm_nn_rows(std::int64_t r0, std::int64_t r1, std::int64_t k, std::int64_t n,
                         const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (std::int64_t i = r0; i < r1; ++i) {
    T* ci = c + i * n;
    if (!Acc)
      for (std::int64_t j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (m x n) = A (m x k) * B^T (n x k).
template <class T, bool Acc>
inline void gemm_nt_rows(std::int64_t r0, std::int64_t r1, std::int64_t k, std::int64_t n,
                         const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (std::int64_t i = r0; i < r1; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = Acc ? ci[j] : T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

// C (m x n) = A^T (k x m) * B (k x n).
template <class T, bool Acc>
inline void gemm_tn_rows(std::int64_t r0, std::int64_t r1, std::int64_t k, std::int64_t m,
                         std::int64_t n, const T* __restrict a, const T* __restrict b,
                         T* __restrict c) {
  for (std::int64_t i = r0; i < r1; ++i) {
    T* ci = c + i * n;
    if (!Acc)
      for (std::int64_t j = 0; j < n; ++j) ci[j] = T(0);
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = a[p * m + i];
      const T* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

}  // namespace detail

template <class T, bool Acc = false>
void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
#ifdef _OPENMP
  if (backend() == Backend::openmp && m > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) detail::gemm_nn_rows<T, Acc>(i, i + 1, k, n, a, b, c);
    return;
  }
#endif
  detail::gemm_nn_rows<T, Acc>(0, m, k, n, a, b, c);
}

template <class T, bool Acc = false>
void gemm_nt(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
#ifdef _OPENMP
  if (backend() == Backend::openmp && m > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) detail::gemm_nt_rows<T, Acc>(i, i + 1, k, n, a, b, c);
    return;
  }
#endif
  detail::gemm_nt_rows<T, Acc>(0, m, k, n, a, b, c);
}

template <class T, bool Acc = false>
void gemm_tn(std::int64_t m, std::int64_t k, std::int64_t n, const T* a, const T* b, T* c) {
#ifdef _OPENMP
  if (backend() == Backend::openmp && m > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) detail::gemm_tn_rows<T, Acc>(i, i + 1, k, m, n, a, b, c);
    return;
  }
#endif
  detail::gemm_tn_rows<T, Acc>(0, m, k, m, n, a, b, c);
}

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// im2col for one image: x (C,H,W) -> cols (C*kh*kw, oh*ow). Zero padding.
template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, T* cols) {
  const std::int64_t oh = conv_out_extent(H, kh, stride, pad);
  const std::int64_t ow = conv_out_extent(W, kw, stride, pad);
  const std::int64_t rows = C * kh * kw;
  auto fill_row = [&](std::int64_t r) {
    const std::int64_t c = r / (kh * kw);
    const std::int64_t dy = (r / kw) % kh;
    const std::int64_t dx = r % kw;
    T* out = cols + r * oh * ow;
    const T* xc = x + c * H * W;
    for (std::int64_t i = 0; i < oh; ++i) {
      const std::int64_t y = i * stride - pad + dy;
      for (std::int64_t j = 0; j < ow; ++j) {
        const std::int64_t xx = j * stride - pad + dx;
        out[i * ow + j] =
            (y >= 0 && y < H && xx >= 0 && xx < W) ? xc[y * W + xx] : T(0);
      }
    }
  };
#ifdef _OPENMP
  if (backend() == Backend::openmp && rows > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) fill_row(r);
    return;
  }
#endif
  for (std::int64_t r = 0; r < rows; ++r) fill_row(r);
}

// Adjoint of im2col: scatter-add cols back into x (which must be pre-zeroed).
// Parallel over channels; each channel's writes are disjoint.
template <class T>
void col2im(const T* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, T* x) {
  const std::int64_t oh = conv_out_extent(H, kh, stride, pad);
  const std::int64_t ow = conv_out_extent(W, kw, stride, pad);
  auto scatter_channel = [&](std::int64_t c) {
    T* xc = x + c * H * W;
    for (std::int64_t dy = 0; dy < kh; ++dy) {
      for (std::int64_t dx = 0; dx < kw; ++dx) {
        const T* in = cols + ((c * kh + dy) * kw + dx) * oh * ow;
        for (std::int64_t i = 0; i < oh; ++i) {
          const std::int64_t y = i * stride - pad + dy;
          if (y < 0 || y >= H) continue;
          for (std::int64_t j = 0; j < ow; ++j) {
            const std::int64_t xx = j * stride - pad + dx;
            if (xx >= 0 && xx < W) xc[y * W + xx] += in[i * ow + j];
          }
        }
      }
    }
  };
#ifdef _OPENMP
  if (backend() == Backend::openmp && C > 1) {
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) scatter_channel(c);
    return;
  }
#endif
  for (std::int64_t c = 0; c < C; ++c) scatter_channel(c);
}

}  // namespace dwp::kernels
