// SPDX-License-Identifier: Apache-2.0
#pragma once

// Internal dense-matrix helpers shared by the op implementations.

#include <Eigen/Core>

namespace lowdino::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
inline MatMap<T> mat(T* p, Eigen::Index rows, Eigen::Index cols) {
  return MatMap<T>(p, rows, cols);
}
template <typename T>
inline ConstMatMap<T> mat(const T* p, Eigen::Index rows, Eigen::Index cols) {
  return ConstMatMap<T>(p, rows, cols);
}

/// Unrolls k x k patches of one [C, H, W] image into [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + static_cast<std::ptrdiff_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::ptrdiff_t>(ci) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          T* out = row + oy * wo;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) out[ox] = T{0};
            continue;
          }
          const T* xr = xc + iy * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            out[ox] = (ix >= 0 && ix < w) ? xr[ix] : T{0};
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates [C*k*k, Ho*Wo] back into [C, H, W].
template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  for (int ci = 0; ci < c; ++ci) {
    T* xc = x + static_cast<std::ptrdiff_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::ptrdiff_t>(ci) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* xr = xc + iy * w;
          const T* in = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) xr[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace lowdino::kernels
