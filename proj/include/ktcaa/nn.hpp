#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ktcaa/tensor.hpp"

namespace ktcaa {
namespace nn {

// 3x3 convolution, padding 1, stride 1 or 2, on CHW feature maps.
// Weights are stored as (C_out, C_in*9) so the forward pass is one GEMM over
// the im2col patch matrix (C_in*9, H_out*W_out).
struct ConvSpec {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t stride = 1;

  static std::size_t out_extent(std::size_t n, std::size_t stride) {
    return (n + 2 - 3) / stride + 1;
  }
};

template <typename T>
struct ConvParams {
  Tensor<T> w;  // (out_ch, in_ch*9)
  Tensor<T> b;  // (out_ch)
  ConvSpec spec;
};

template <typename T>
struct DenseParams {
  Tensor<T> w;  // (out, in)
  Tensor<T> b;  // (out)
};

template <typename T>
void im2col(const T* x, std::size_t ch, std::size_t h, std::size_t w, std::size_t stride,
            std::vector<T>& col, std::size_t& out_h, std::size_t& out_w) {
  out_h = ConvSpec::out_extent(h, stride);
  out_w = ConvSpec::out_extent(w, stride);
  const std::size_t patches = out_h * out_w;
  col.assign(ch * 9 * patches, T(0));
  for (std::size_t c = 0; c < ch; ++c) {
    const T* plane = x + c * h * w;
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col.data() + ((c * 3 + ky) * 3 + kx) * patches;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          T* dst = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ox] = src[ix];
          }
        }
      }
  }
}

template <typename T>
void col2im(const std::vector<T>& col, std::size_t ch, std::size_t h, std::size_t w,
            std::size_t stride, T* dx) {
  const std::size_t out_h = ConvSpec::out_extent(h, stride);
  const std::size_t out_w = ConvSpec::out_extent(w, stride);
  const std::size_t patches = out_h * out_w;
  for (std::size_t c = 0; c < ch; ++c) {
    T* plane = dx + c * h * w;
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = col.data() + ((c * 3 + ky) * 3 + kx) * patches;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const T* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - 1;
            if (ix >= 0 && ix < static_cast<long>(w)) dst[ix] += src[ox];
          }
        }
      }
  }
}

// Row-major (r x c) data viewed as a column-major (c x r) matrix; products
// expressed this way keep Eigen on its fastest GEMM path.
template <typename T>
using TransMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
template <typename T>
using ConstTransMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;

// y = W * col + b. col is produced here and kept for the backward pass.
template <typename T>
void conv_forward(const ConvParams<T>& p, const T* x, std::size_t h, std::size_t w,
                  std::vector<T>& col, std::vector<T>& y, std::size_t& out_h,
                  std::size_t& out_w) {
  im2col(x, p.spec.in_ch, h, w, p.spec.stride, col, out_h, out_w);
  const std::size_t patches = out_h * out_w;
  const std::size_t k = p.spec.in_ch * 9;
  y.resize(p.spec.out_ch * patches);
  // y^T (patches x out) = col^T (patches x k) * w^T (k x out), all col-major
  ConstTransMap<T> wt(p.w.ptr(), static_cast<Eigen::Index>(k),
                      static_cast<Eigen::Index>(p.spec.out_ch));
  ConstTransMap<T> ct(col.data(), static_cast<Eigen::Index>(patches),
                      static_cast<Eigen::Index>(k));
  TransMap<T> yt(y.data(), static_cast<Eigen::Index>(patches),
                 static_cast<Eigen::Index>(p.spec.out_ch));
  yt.noalias() = ct * wt;
  for (std::size_t c = 0; c < p.spec.out_ch; ++c) {
    T* row = y.data() + c * patches;
    const T bias = p.b.data[c];
    for (std::size_t i = 0; i < patches; ++i) row[i] += bias;
  }
}

// dy: (out_ch, patches). Accumulates into gw/gb when given; writes dx (CHW,
// caller-zeroed) when given.
template <typename T>
void conv_backward(const ConvParams<T>& p, const std::vector<T>& col, const T* dy,
                   std::size_t h, std::size_t w, ConvParams<T>* grad, T* dx,
                   std::vector<T>& dcol_scratch) {
  const std::size_t out_h = ConvSpec::out_extent(h, p.spec.stride);
  const std::size_t out_w = ConvSpec::out_extent(w, p.spec.stride);
  const std::size_t patches = out_h * out_w;
  const std::size_t k = p.spec.in_ch * 9;
  // dy viewed transposed: (patches x out_ch), column-major
  ConstTransMap<T> dyt(dy, static_cast<Eigen::Index>(patches),
                       static_cast<Eigen::Index>(p.spec.out_ch));
  if (grad) {
    ConstTransMap<T> ct(col.data(), static_cast<Eigen::Index>(patches),
                        static_cast<Eigen::Index>(k));
    TransMap<T> gwt(grad->w.ptr(), static_cast<Eigen::Index>(k),
                    static_cast<Eigen::Index>(p.spec.out_ch));
    gwt.noalias() += ct.transpose() * dyt;
    for (std::size_t c = 0; c < p.spec.out_ch; ++c) {
      T s = 0;
      const T* row = dy + c * patches;
      for (std::size_t i = 0; i < patches; ++i) s += row[i];
      grad->b.data[c] += s;
    }
  }
  if (dx) {
    dcol_scratch.resize(k * patches);
    ConstTransMap<T> wt(p.w.ptr(), static_cast<Eigen::Index>(k),
                        static_cast<Eigen::Index>(p.spec.out_ch));
    TransMap<T> dct(dcol_scratch.data(), static_cast<Eigen::Index>(patches),
                    static_cast<Eigen::Index>(k));
    dct.noalias() = dyt * wt.transpose();
    col2im(dcol_scratch, p.spec.in_ch, h, w, p.spec.stride, dx);
  }
}

template <typename T>
void relu_inplace(std::vector<T>& v) {
  for (T& x : v)
    if (x < T(0)) x = T(0);
}

// dx = dy where pre > 0 (in place on dy).
template <typename T>
void relu_backward_inplace(const std::vector<T>& pre, std::vector<T>& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (pre[i] <= T(0)) dy[i] = T(0);
}

template <typename T>
void dense_forward(const DenseParams<T>& p, const T* x, T* y) {
  const std::size_t out = p.b.size();
  const std::size_t in = p.w.size() / out;
  for (std::size_t o = 0; o < out; ++o) {
    const T* row = p.w.ptr() + o * in;
    T s = p.b.data[o];
    for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

template <typename T>
void dense_backward(const DenseParams<T>& p, const T* x, const T* dy, DenseParams<T>* grad,
                    T* dx) {
  const std::size_t out = p.b.size();
  const std::size_t in = p.w.size() / out;
  if (grad) {
    for (std::size_t o = 0; o < out; ++o) {
      T* grow = grad->w.ptr() + o * in;
      const T g = dy[o];
      for (std::size_t i = 0; i < in; ++i) grow[i] += g * x[i];
      grad->b.data[o] += g;
    }
  }
  if (dx) {
    for (std::size_t i = 0; i < in; ++i) dx[i] = T(0);
    for (std::size_t o = 0; o < out; ++o) {
      const T* row = p.w.ptr() + o * in;
      const T g = dy[o];
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * row[i];
    }
  }
}

// f = e / max(||e||, 1e-12); returns the norm used.
template <typename T>
T l2_normalize(const T* e, std::size_t n, T* f) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(e[i]) * static_cast<double>(e[i]);
  T norm = static_cast<T>(std::sqrt(s));
  if (norm < T(1e-12)) norm = T(1e-12);
  for (std::size_t i = 0; i < n; ++i) f[i] = e[i] / norm;
  return norm;
}

// de = (df - f <f, df>) / norm
template <typename T>
void l2_normalize_backward(const T* f, T norm, const T* df, std::size_t n, T* de) {
  T dot = 0;
  for (std::size_t i = 0; i < n; ++i) dot += f[i] * df[i];
  for (std::size_t i = 0; i < n; ++i) de[i] = (df[i] - f[i] * dot) / norm;
}

}  // namespace nn
}  // namespace ktcaa
