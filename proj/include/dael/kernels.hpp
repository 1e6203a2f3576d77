#pragma once

// OpenMP kernels behind the tensor engine. Every parallel loop partitions
// output elements only, and each output element is reduced in a fixed order,
// so results are bitwise identical for any thread count.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <limits>
#include <vector>

#include "dael/kernels_serial.hpp"

namespace dael::kernels {

using serial::ConvGeometry;

namespace detail {

// Below this many multiply-adds a parallel region costs more than it saves.
inline constexpr std::size_t kParallelWork = std::size_t{1} << 16;

template <typename T, std::size_t MR, std::size_t NR>
inline void gemm_tile_full(std::size_t N, std::size_t K, const T* A, const T* B, T* C,
                           std::size_t i0, std::size_t j0) {
  T acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t c = 0; c < NR; ++c) acc[r][c] = C[(i0 + r) * N + j0 + c];
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N + j0;
    for (std::size_t r = 0; r < MR; ++r) {
      const T a = A[(i0 + r) * K + k];
      for (std::size_t c = 0; c < NR; ++c) acc[r][c] += a * b[c];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t c = 0; c < NR; ++c) C[(i0 + r) * N + j0 + c] = acc[r][c];
}

template <typename T>
inline void gemm_tile_edge(std::size_t N, std::size_t K, const T* A, const T* B, T* C,
                           std::size_t i0, std::size_t mr, std::size_t j0,
                           std::size_t nr) {
  for (std::size_t r = 0; r < mr; ++r) {
    T* c = C + (i0 + r) * N + j0;
    const T* a = A + (i0 + r) * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N + j0;
      for (std::size_t j = 0; j < nr; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

/// C[M x N] += A[M x K] * B[K x N], row-major, register-blocked.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
              T* C) {
  constexpr std::size_t MR = 4;
  constexpr std::size_t NR = 128 / sizeof(T);
  const auto row_blocks = static_cast<std::ptrdiff_t>((M + MR - 1) / MR);
#pragma omp parallel for schedule(static) if (M * N * K > detail::kParallelWork)
  for (std::ptrdiff_t rb = 0; rb < row_blocks; ++rb) {
    const std::size_t i0 = static_cast<std::size_t>(rb) * MR;
    const std::size_t mr = std::min(MR, M - i0);
    for (std::size_t j0 = 0; j0 < N; j0 += NR) {
      const std::size_t nr = std::min(NR, N - j0);
      if (mr == MR && nr == NR)
        detail::gemm_tile_full<T, MR, NR>(N, K, A, B, C, i0, j0);
      else
        detail::gemm_tile_edge(N, K, A, B, C, i0, mr, j0, nr);
    }
  }
}

/// dst[cols x rows] = src[rows x cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t tile = 16;
  for (std::size_t i0 = 0; i0 < rows; i0 += tile)
    for (std::size_t j0 = 0; j0 < cols; j0 += tile)
      for (std::size_t i = i0; i < std::min(rows, i0 + tile); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + tile); ++j)
          dst[j * rows + i] = src[i * cols + j];
}

/// C[M x N] += A^T * B with A stored K x M.
template <typename T>
void gemm_at_b_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
                   T* C) {
  std::vector<T> at(M * K);
  transpose(K, M, A, at.data());
  gemm_acc(M, N, K, at.data(), B, C);
}

/// C[M x N] += A * B^T with B stored N x K.
template <typename T>
void gemm_a_bt_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
                   T* C) {
  std::vector<T> bt(K * N);
  transpose(N, K, B, bt.data());
  gemm_acc(M, N, K, A, bt.data(), C);
}

/// Unfolds one CHW image into a (C*k*k) x (Ho*Wo) patch matrix.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const auto Ho = g.out_height(), Wo = g.out_width();
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + Wo, T(0));
            continue;
          }
          const T* in = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? T(0)
                          : in[ix];
          }
        }
      }
}

/// Folds a patch-matrix gradient back onto one CHW image gradient.
template <typename T>
void col2im_acc(const ConvGeometry& g, const T* col, T* dx) {
  const auto Ho = g.out_height(), Wo = g.out_width();
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* out = dx + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width))
              out[ix] += row[oy * Wo + ox];
          }
        }
      }
}

/// Batched convolution via im2col + GEMM, parallel over images.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const auto P = g.out_height() * g.out_width();
  const auto CK = g.in_channels * g.kernel * g.kernel;
  const auto in_size = g.in_channels * g.height * g.width;
  const auto batch = static_cast<std::ptrdiff_t>(g.batch);
#pragma omp parallel if (g.batch > 1)
  {
    std::vector<T> col(CK * P);
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < batch; ++n) {
      T* yn = y + static_cast<std::size_t>(n) * g.out_channels * P;
      for (std::size_t o = 0; o < g.out_channels; ++o)
        std::fill(yn + o * P, yn + (o + 1) * P, bias ? bias[o] : T(0));
      im2col(g, x + static_cast<std::size_t>(n) * in_size, col.data());
      // Single-threaded inside: the outer loop already owns the threads.
      for (std::size_t i0 = 0; i0 < g.out_channels; i0 += 4) {
        const auto mr = std::min<std::size_t>(4, g.out_channels - i0);
        constexpr std::size_t NR = 128 / sizeof(T);
        for (std::size_t j0 = 0; j0 < P; j0 += NR) {
          const auto nr = std::min(NR, P - j0);
          if (mr == 4 && nr == NR)
            detail::gemm_tile_full<T, 4, NR>(P, CK, w, col.data(), yn, i0, j0);
          else
            detail::gemm_tile_edge(P, CK, w, col.data(), yn, i0, mr, j0, nr);
        }
      }
    }
  }
}

/// Accumulates dx, dw, db (each may be null).
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx,
                     T* dw, T* db) {
  const auto P = g.out_height() * g.out_width();
  const auto CK = g.in_channels * g.kernel * g.kernel;
  const auto in_size = g.in_channels * g.height * g.width;
  const auto out_size = g.out_channels * P;

  if (db) {
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const T* d = dy + n * out_size + o * P;
        T acc = T(0);
        for (std::size_t p = 0; p < P; ++p) acc += d[p];
        db[o] += acc;
      }
  }

  if (dx) {
    std::vector<T> wt(CK * g.out_channels);
    transpose(g.out_channels, CK, w, wt.data());
    const auto batch = static_cast<std::ptrdiff_t>(g.batch);
#pragma omp parallel if (g.batch > 1)
    {
      std::vector<T> dcol(CK * P);
#pragma omp for schedule(static)
      for (std::ptrdiff_t n = 0; n < batch; ++n) {
        std::fill(dcol.begin(), dcol.end(), T(0));
        const T* dyn = dy + static_cast<std::size_t>(n) * out_size;
        constexpr std::size_t NR = 128 / sizeof(T);
        for (std::size_t i0 = 0; i0 < CK; i0 += 4) {
          const auto mr = std::min<std::size_t>(4, CK - i0);
          for (std::size_t j0 = 0; j0 < P; j0 += NR) {
            const auto nr = std::min(NR, P - j0);
            if (mr == 4 && nr == NR)
              detail::gemm_tile_full<T, 4, NR>(P, g.out_channels, wt.data(), dyn,
                                               dcol.data(), i0, j0);
            else
              detail::gemm_tile_edge(P, g.out_channels, wt.data(), dyn, dcol.data(), i0,
                                     mr, j0, nr);
          }
        }
        col2im_acc(g, dcol.data(), dx + static_cast<std::size_t>(n) * in_size);
      }
    }
  }

  if (dw) {
    std::vector<T> col(CK * P), colt(P * CK);
    for (std::size_t n = 0; n < g.batch; ++n) {
      im2col(g, x + n * in_size, col.data());
      transpose(CK, P, col.data(), colt.data());
      gemm_acc(g.out_channels, CK, P, dy + n * out_size, colt.data(), dw);
    }
  }
}

template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t H, std::size_t W, const T* x,
                        T* y, std::size_t* argmax) {
  const auto Ho = H / 2, Wo = W / 2;
  const auto np = static_cast<std::ptrdiff_t>(planes);
#pragma omp parallel for schedule(static) if (planes * H * W > detail::kParallelWork)
  for (std::ptrdiff_t ps = 0; ps < np; ++ps) {
    const auto p = static_cast<std::size_t>(ps);
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const auto base = (p * H + 2 * oy) * W + 2 * ox;
        std::size_t best_i = base;
        T best = x[base];
        for (const auto i : {base + 1, base + W, base + W + 1})
          if (x[i] > best) {
            best = x[i];
            best_i = i;
          }
        const auto o = (p * Ho + oy) * Wo + ox;
        y[o] = best;
        argmax[o] = best_i;
      }
  }
}

/// Scatters pooled gradients back to the selected inputs.
template <typename T>
void maxpool2x2_backward(std::size_t out_count, const std::size_t* argmax, const T* dy,
                         T* dx) {
  // Windows do not overlap, so every input receives at most one write.
  for (std::size_t o = 0; o < out_count; ++o) dx[argmax[o]] += dy[o];
}

}  // namespace dael::kernels
