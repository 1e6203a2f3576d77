#pragma once

// Straightforward reference kernels. They are kept deliberately naive so the
// optimized kernels in kernels.hpp can be checked against them.

#include <cstddef>
#include <limits>

namespace dael::kernels::serial {

/// C[M x N] += A[M x K] * B[K x N], all row-major.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A,
              const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T acc = C[i * N + j];
      for (std::size_t k = 0; k < K; ++k) acc += A[i * K + k] * B[k * N + j];
      C[i * N + j] = acc;
    }
}

/// C[M x N] += A^T * B with A stored K x M and B stored K x N.
template <typename T>
void gemm_at_b_acc(std::size_t M, std::size_t N, std::size_t K, const T* A,
                   const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T acc = C[i * N + j];
      for (std::size_t k = 0; k < K; ++k) acc += A[k * M + i] * B[k * N + j];
      C[i * N + j] = acc;
    }
}

/// C[M x N] += A[M x K] * B^T with B stored N x K.
template <typename T>
void gemm_a_bt_acc(std::size_t M, std::size_t N, std::size_t K, const T* A,
                   const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      T acc = C[i * N + j];
      for (std::size_t k = 0; k < K; ++k) acc += A[i * K + k] * B[j * K + k];
      C[i * N + j] = acc;
    }
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel;
  std::size_t stride, pad;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

/// Direct convolution, NCHW input, OIHW weights, optional bias (may be null).
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias,
                    T* y) {
  const auto Ho = g.out_height(), Wo = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          T acc = bias ? bias[o] : T(0);
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                acc += x[((n * g.in_channels + c) * g.height + iy) * g.width + ix] *
                       w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
              }
          y[((n * g.out_channels + o) * Ho + oy) * Wo + ox] = acc;
        }
}

/// Accumulates dx, dw and db (each may be null) for the direct convolution.
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy,
                     T* dx, T* dw, T* db) {
  const auto Ho = g.out_height(), Wo = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const T d = dy[((n * g.out_channels + o) * Ho + oy) * Wo + ox];
          if (db) db[o] += d;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                const auto xi = ((n * g.in_channels + c) * g.height + iy) * g.width + ix;
                const auto wi = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                if (dw) dw[wi] += d * x[xi];
                if (dx) dx[xi] += d * w[wi];
              }
        }
}

/// 2x2 max pooling with stride 2 over `planes` HxW planes. `argmax` receives
/// the flat input index of each selected element; ties pick the first in
/// row-major window order.
template <typename T>
void maxpool2x2_forward(std::size_t planes, std::size_t H, std::size_t W, const T* x,
                        T* y, std::size_t* argmax) {
  const auto Ho = H / 2, Wo = W / 2;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const auto i = (p * H + 2 * oy + dy) * W + 2 * ox + dx;
            if (x[i] > best) {
              best = x[i];
              best_i = i;
            }
          }
        const auto o = (p * Ho + oy) * Wo + ox;
        y[o] = best;
        argmax[o] = best_i;
      }
}

}  // namespace dael::kernels::serial
