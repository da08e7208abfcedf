#pragma once

// Shared dense kernels for the flow model and feature plumbing. Everything is
// single threaded and deterministic: accumulation order depends only on the
// operand shapes. Tensors are row-major (channels x time).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "flowdenoise/errors.hpp"
#include "flowdenoise/tensor.hpp"

namespace fdn::kern {

template <typename T>
using EMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
EMap<T> map(Tensor<T>& t) {
  return EMap<T>(t.data(), t.rows(), t.cols());
}
template <typename T>
ECMap<T> cmap(const Tensor<T>& t) {
  return ECMap<T>(t.data(), t.rows(), t.cols());
}

// out = w * x (+ bias per output channel). w: Cout x Cin, x: Cin x T.
template <typename T>
void pointwise_forward(const Tensor<T>& w, const Tensor<T>* bias,
                       const Tensor<T>& x, Tensor<T>& out) {
  if (w.cols() != x.rows()) throw ShapeError("pointwise: w/x mismatch");
  out = Tensor<T>(w.rows(), x.cols());
  map(out).noalias() = cmap(w) * cmap(x);
  if (bias != nullptr) {
    if (bias->size() != static_cast<size_t>(w.rows()))
      throw ShapeError("pointwise: bias size");
    map(out).colwise() +=
        Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>>(bias->data(),
                                                           bias->size());
  }
}

// Backward kernels accumulate (+=) into pre-sized, pre-zeroed targets; a null
// target skips that gradient.
template <typename T>
void pointwise_backward(const Tensor<T>& w, const Tensor<T>& x,
                        const Tensor<T>& gout, Tensor<T>* gw, Tensor<T>* gbias,
                        Tensor<T>* gx) {
  if (gw != nullptr) map(*gw).noalias() += cmap(gout) * cmap(x).transpose();
  if (gx != nullptr) map(*gx).noalias() += cmap(w).transpose() * cmap(gout);
  if (gbias != nullptr)
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>>(gbias->data(),
                                                 gbias->size()) +=
        cmap(gout).rowwise().sum();
}

// Depthwise conv with zero "same" padding. kernel: C x k, taps at offsets
// (j - (k-1)/2) * dilation around each output position.
template <typename T>
void depthwise_forward(const Tensor<T>& kernel, const Tensor<T>* bias,
                       int dilation, const Tensor<T>& x, Tensor<T>& out) {
  const int c_n = x.rows();
  const int t_n = x.cols();
  const int k = kernel.cols();
  if (kernel.rows() != c_n) throw ShapeError("depthwise: kernel channels");
  if (dilation < 1) throw ValueError("depthwise: dilation");
  const int center = (k - 1) / 2;
  out = Tensor<T>(c_n, t_n);
  for (int c = 0; c < c_n; ++c) {
    const T* xr = x.data() + static_cast<size_t>(c) * t_n;
    T* or_ = out.data() + static_cast<size_t>(c) * t_n;
    const T b = bias != nullptr ? (*bias)[c] : T(0);
    for (int t = 0; t < t_n; ++t) or_[t] = b;
    for (int j = 0; j < k; ++j) {
      const int off = (j - center) * dilation;
      const T kv = kernel(c, j);
      const int lo = std::max(0, -off);
      const int hi = std::min(t_n, t_n - off);
      for (int t = lo; t < hi; ++t) or_[t] += kv * xr[t + off];
    }
  }
}

template <typename T>
void depthwise_backward(const Tensor<T>& kernel, int dilation,
                        const Tensor<T>& x, const Tensor<T>& gout,
                        Tensor<T>* gkernel, Tensor<T>* gbias, Tensor<T>* gx) {
  const int c_n = x.rows();
  const int t_n = x.cols();
  const int k = kernel.cols();
  const int center = (k - 1) / 2;
  for (int c = 0; c < c_n; ++c) {
    const T* xr = x.data() + static_cast<size_t>(c) * t_n;
    const T* gr = gout.data() + static_cast<size_t>(c) * t_n;
    T* gxr = gx != nullptr ? gx->data() + static_cast<size_t>(c) * t_n : nullptr;
    for (int j = 0; j < k; ++j) {
      const int off = (j - center) * dilation;
      const T kv = kernel(c, j);
      const int lo = std::max(0, -off);
      const int hi = std::min(t_n, t_n - off);
      T acc = 0;
      for (int t = lo; t < hi; ++t) {
        acc += gr[t] * xr[t + off];
        if (gxr != nullptr) gxr[t + off] += kv * gr[t];
      }
      if (gkernel != nullptr) (*gkernel)(c, j) += acc;
    }
    if (gbias != nullptr) {
      T acc = 0;
      for (int t = 0; t < t_n; ++t) acc += gr[t];
      (*gbias)[c] += acc;
    }
  }
}

// Transposed depthwise conv: out[c, t*stride + j] += kernel[c, j] * x[c, t],
// plus bias everywhere; accumulation outside [0, out_len) is dropped and the
// output is zero-extended (bias only) past the raw coverage.
template <typename T>
void tconv_depthwise_forward(const Tensor<T>& kernel, const Tensor<T>* bias,
                             int stride, int out_len, const Tensor<T>& x,
                             Tensor<T>& out) {
  const int c_n = x.rows();
  const int t_n = x.cols();
  const int k = kernel.cols();
  if (kernel.rows() != c_n) throw ShapeError("tconv: kernel channels");
  if (stride < 1) throw ValueError("tconv: stride");
  out = Tensor<T>(c_n, out_len);
  for (int c = 0; c < c_n; ++c) {
    const T* xr = x.data() + static_cast<size_t>(c) * t_n;
    T* or_ = out.data() + static_cast<size_t>(c) * out_len;
    const T b = bias != nullptr ? (*bias)[c] : T(0);
    for (int t = 0; t < out_len; ++t) or_[t] = b;
    for (int t = 0; t < t_n; ++t) {
      const int base = t * stride;
      if (base >= out_len) break;
      const int jmax = std::min(k, out_len - base);
      const T xv = xr[t];
      for (int j = 0; j < jmax; ++j) or_[base + j] += kernel(c, j) * xv;
    }
  }
}

template <typename T>
void tconv_depthwise_backward(const Tensor<T>& kernel, int stride,
                              const Tensor<T>& x, const Tensor<T>& gout,
                              Tensor<T>* gkernel, Tensor<T>* gbias,
                              Tensor<T>* gx) {
  const int c_n = x.rows();
  const int t_n = x.cols();
  const int k = kernel.cols();
  const int out_len = gout.cols();
  for (int c = 0; c < c_n; ++c) {
    const T* xr = x.data() + static_cast<size_t>(c) * t_n;
    const T* gr = gout.data() + static_cast<size_t>(c) * out_len;
    T* gxr = gx != nullptr ? gx->data() + static_cast<size_t>(c) * t_n : nullptr;
    for (int t = 0; t < t_n; ++t) {
      const int base = t * stride;
      if (base >= out_len) break;
      const int jmax = std::min(k, out_len - base);
      T acc = 0;
      for (int j = 0; j < jmax; ++j) {
        if (gkernel != nullptr) (*gkernel)(c, j) += gr[base + j] * xr[t];
        acc += kernel(c, j) * gr[base + j];
      }
      if (gxr != nullptr) gxr[t] += acc;
    }
    if (gbias != nullptr) {
      T acc = 0;
      for (int t = 0; t < out_len; ++t) acc += gr[t];
      (*gbias)[c] += acc;
    }
  }
}

// Gated activation: x is 2H x T, out[h, t] = tanh(x[h, t]) * sigmoid(x[H+h, t]).
template <typename T>
void gated_forward(const Tensor<T>& x, Tensor<T>& out) {
  if (x.rows() % 2 != 0) throw ShapeError("gated: odd channel count");
  const int h_n = x.rows() / 2;
  const int t_n = x.cols();
  out = Tensor<T>(h_n, t_n);
  for (int h = 0; h < h_n; ++h) {
    const T* a = x.data() + static_cast<size_t>(h) * t_n;
    const T* b = x.data() + static_cast<size_t>(h_n + h) * t_n;
    T* o = out.data() + static_cast<size_t>(h) * t_n;
    for (int t = 0; t < t_n; ++t)
      o[t] = std::tanh(a[t]) * (T(1) / (T(1) + std::exp(-b[t])));
  }
}

template <typename T>
void gated_backward(const Tensor<T>& x, const Tensor<T>& gout, Tensor<T>& gx) {
  const int h_n = x.rows() / 2;
  const int t_n = x.cols();
  for (int h = 0; h < h_n; ++h) {
    const T* a = x.data() + static_cast<size_t>(h) * t_n;
    const T* b = x.data() + static_cast<size_t>(h_n + h) * t_n;
    const T* g = gout.data() + static_cast<size_t>(h) * t_n;
    T* ga = gx.data() + static_cast<size_t>(h) * t_n;
    T* gb = gx.data() + static_cast<size_t>(h_n + h) * t_n;
    for (int t = 0; t < t_n; ++t) {
      const T th = std::tanh(a[t]);
      const T sg = T(1) / (T(1) + std::exp(-b[t]));
      ga[t] += g[t] * (T(1) - th * th) * sg;
      gb[t] += g[t] * th * sg * (T(1) - sg);
    }
  }
}

// Interleaved squeeze: (C x N) -> (C*g x N/g); input sample (c, t*g + r) goes
// to output (c*g + r, t). Requires N divisible by g.
template <typename T>
void squeeze_forward(const Tensor<T>& x, int g, Tensor<T>& out) {
  if (g < 1) throw ValueError("squeeze: group");
  if (x.cols() % g != 0) throw ShapeError("squeeze: length not divisible");
  const int c_n = x.rows();
  const int t_n = x.cols() / g;
  out = Tensor<T>(c_n * g, t_n);
  for (int c = 0; c < c_n; ++c)
    for (int r = 0; r < g; ++r) {
      const T* xr = x.data() + static_cast<size_t>(c) * x.cols();
      T* o = out.data() + static_cast<size_t>(c * g + r) * t_n;
      for (int t = 0; t < t_n; ++t) o[t] = xr[static_cast<size_t>(t) * g + r];
    }
}

template <typename T>
void unsqueeze_forward(const Tensor<T>& x, int g, Tensor<T>& out) {
  if (g < 1) throw ValueError("unsqueeze: group");
  if (x.rows() % g != 0) throw ShapeError("unsqueeze: channels not divisible");
  const int c_n = x.rows() / g;
  const int t_n = x.cols();
  out = Tensor<T>(c_n, t_n * g);
  for (int c = 0; c < c_n; ++c)
    for (int r = 0; r < g; ++r) {
      const T* xr = x.data() + static_cast<size_t>(c * g + r) * t_n;
      T* o = out.data() + static_cast<size_t>(c) * out.cols();
      for (int t = 0; t < t_n; ++t) o[static_cast<size_t>(t) * g + r] = xr[t];
    }
}

}  // namespace fdn::kern
