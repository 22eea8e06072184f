#pragma once

// Raw numeric kernels on contiguous row-major buffers. No shape checking here;
// callers in ops.hpp validate shapes first.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace attfuse::kernels {

/// C[n x m] += A[n x k] * B[k x m]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  constexpr std::size_t kBlockK = 128;
  constexpr std::size_t kBlockM = 256;
  for (std::size_t k0 = 0; k0 < k; k0 += kBlockK) {
    const std::size_t k1 = std::min(k, k0 + kBlockK);
    for (std::size_t j0 = 0; j0 < m; j0 += kBlockM) {
      const std::size_t j1 = std::min(m, j0 + kBlockM);
      const std::size_t width = j1 - j0;
      for (std::size_t i = 0; i < n; ++i) {
        double* __restrict crow = c + i * m + j0;
        const double* arow = a + i * k;
        std::size_t p = k0;
        // Four rows of B per pass keeps the C segment in registers longer.
        for (; p + 4 <= k1; p += 4) {
          const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
          const double* __restrict b0 = b + p * m + j0;
          const double* __restrict b1 = b0 + m;
          const double* __restrict b2 = b1 + m;
          const double* __restrict b3 = b2 + m;
          for (std::size_t j = 0; j < width; ++j) {
            crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
          }
        }
        for (; p < k1; ++p) {
          const double av = arow[p];
          const double* __restrict brow = b + p * m + j0;
          for (std::size_t j = 0; j < width; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

/// out[cols x rows] = in[rows x cols]^T
inline void transpose(const double* in, double* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
      }
    }
  }
}

/// C[n x m] += A[n x k] * B[m x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  std::vector<double> bt(k * m);
  transpose(b, bt.data(), m, k);
  gemm_nn(a, bt.data(), c, n, k, m);
}

/// C[n x m] += A[k x n]^T * B[k x m]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  if (n * m <= 16384) {
    // Small output (kernel gradients): stream A and B once, C stays cached.
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * n;
      const double* __restrict brow = b + p * m;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        double* __restrict crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  std::vector<double> at(k * n);
  transpose(a, at.data(), k, n);
  gemm_nn(at.data(), b, c, n, k, m);
}

struct ConvGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t pad_top, pad_left;
  std::size_t stride;
  std::size_t out_h, out_w;

  std::size_t patch() const { return k_h * k_w * in_c; }
  std::size_t positions() const { return batch * out_h * out_w; }
};

/// Unfolds input patches into rows of length kh*kw*Cin, ordered (ky, kx, c)
/// to match the [kh x kw x Cin x Cout] kernel layout. Padding reads as zero.
inline void im2col(const ConvGeometry& g, const double* in, double* cols) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* img = in + b * g.in_h * g.in_w * g.in_c;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = cols + row * patch;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
            double* d = dst + (ky * g.k_w + kx) * g.in_c;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) || ix >= static_cast<long>(g.in_w)) {
              std::fill(d, d + g.in_c, 0.0);
            } else {
              const double* s = img + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
              std::copy(s, s + g.in_c, d);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch rows back onto the input gradient.
inline void col2im(const ConvGeometry& g, const double* cols, double* in_grad) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.batch; ++b) {
    double* img = in_grad + b * g.in_h * g.in_w * g.in_c;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = cols + row * patch;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            const double* s = src + (ky * g.k_w + kx) * g.in_c;
            double* d = img + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * g.in_c;
            for (std::size_t c = 0; c < g.in_c; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

}  // namespace attfuse::kernels
