#pragma once

// Differentiable primitives recorded on a Tape. Dense products go through Eigen;
// all other reductions run sequentially in row-major order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/rng.hpp"
#include "npss/tensor.hpp"

namespace npss {

inline constexpr double kInstanceNormEps = 1e-5;
inline constexpr double kProbClamp = 1e-12;

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

struct Conv4d {
  int n, c, h, w;
};

template <class T>
Conv4d as_batched(const BasicTensor<T>& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw ShapeError(std::string(op) + ": expected C x H x W or N x C x H x W input, got " + shape_str(x.shape()));
}

// A 3x3 convolution as nine GEMMs over shifted views of a zero-padded image. With the
// padded row width pw = w + 2, output pixel (y, x) sits at column y * pw + x of a
// "wide" cout x L matrix; the two columns per row beyond w are scratch.
template <class T>
struct Shift3x3 {
  using StridedRM = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
  using CStridedRM = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

  int cin, h, w, pw, plane, len;

  Shift3x3(int cin_, int h_, int w_) : cin(cin_), h(h_), w(w_), pw(w_ + 2), plane((h_ + 2) * (w_ + 2)), len(h_ * (w_ + 2) - 2) {}

  int tap_offset(int tap) const { return (tap / 3) * pw + tap % 3; }

  void pad(const T* img, std::vector<T>& xp) const {
    xp.assign(static_cast<std::size_t>(cin) * plane, T(0));
    for (int c = 0; c < cin; ++c)
      for (int y = 0; y < h; ++y)
        std::copy_n(img + (static_cast<std::size_t>(c) * h + y) * w, w, xp.data() + static_cast<std::size_t>(c) * plane + (y + 1) * pw + 1);
  }
  CStridedRM view(const T* xp, int tap) const { return CStridedRM(xp + tap_offset(tap), cin, len, Eigen::OuterStride<>(plane)); }
  StridedRM view(T* xp, int tap) const { return StridedRM(xp + tap_offset(tap), cin, len, Eigen::OuterStride<>(plane)); }
};

// Weight taps: tap t of a cout x cin x 3 x 3 tensor as a cout x cin matrix.
template <class T>
std::vector<MatRM<T>> split_taps(const BasicTensor<T>& wt) {
  const int cout = wt.dim(0), cin = wt.dim(1);
  std::vector<MatRM<T>> taps(9, MatRM<T>(cout, cin));
  for (int o = 0; o < cout; ++o)
    for (int c = 0; c < cin; ++c)
      for (int t = 0; t < 9; ++t) taps[static_cast<std::size_t>(t)](o, c) = wt[(static_cast<std::size_t>(o) * cin + c) * 9 + t];
  return taps;
}

}  // namespace detail

/// Cross-correlation with bias. Input C x H x W or N x C x H x W; k = 1 (pad 0) or k = 3 (pad 1).
template <class T>
Var conv2d(Tape<T>& tape, Var input, Var weight, Var bias, int padding) {
  const auto& x = tape.value(input);
  const auto& wt = tape.value(weight);
  const auto& b = tape.value(bias);
  const auto g = detail::as_batched(x, "conv2d");
  if (wt.rank() != 4 || wt.dim(2) != wt.dim(3)) throw ShapeError("conv2d: weight must be Cout x Cin x k x k");
  const int cout = wt.dim(0), cin = wt.dim(1), k = wt.dim(2);
  if (cin != g.c)
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels, weight expects " + std::to_string(cin));
  if (!((k == 1 && padding == 0) || (k == 3 && padding == 1)))
    throw ShapeError("conv2d: only k=1/pad=0 and k=3/pad=1 are supported");
  if (b.rank() != 1 || b.dim(0) != cout) throw ShapeError("conv2d: bias must have Cout entries");

  const int hw = g.h * g.w;
  const int kk = cin * k * k;
  Shape out_shape = x.rank() == 3 ? Shape{cout, g.h, g.w} : Shape{g.n, cout, g.h, g.w};
  BasicTensor<T> y(out_shape);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias_vec(b.raw(), cout);
  if (k == 1) {
    detail::CMapRM<T> wm(wt.raw(), cout, kk);
    for (int n = 0; n < g.n; ++n) {
      detail::MapRM<T> ym(y.raw() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
      ym.noalias() = wm * detail::CMapRM<T>(x.raw() + static_cast<std::size_t>(n) * g.c * hw, kk, hw);
      ym.colwise() += bias_vec;
    }
  } else {
    const detail::Shift3x3<T> sh(cin, g.h, g.w);
    const auto taps = detail::split_taps(wt);
    std::vector<T> xp;
    detail::MatRM<T> wide(cout, sh.len);
    for (int n = 0; n < g.n; ++n) {
      sh.pad(x.raw() + static_cast<std::size_t>(n) * g.c * hw, xp);
      wide.setZero();
      for (int t = 0; t < 9; ++t) wide.noalias() += taps[static_cast<std::size_t>(t)] * sh.view(static_cast<const T*>(xp.data()), t);
      T* out = y.raw() + static_cast<std::size_t>(n) * cout * hw;
      for (int o = 0; o < cout; ++o)
        for (int yy = 0; yy < g.h; ++yy)
          for (int xx = 0; xx < g.w; ++xx) out[(static_cast<std::size_t>(o) * g.h + yy) * g.w + xx] = wide(o, yy * sh.pw + xx) + b[static_cast<std::size_t>(o)];
    }
  }

  return tape.push(std::move(y), {input, weight, bias},
                   [=](Tape<T>& tp, const BasicTensor<T>& gy) {
                     const auto& xv = tp.value(input);
                     const auto& wv = tp.value(weight);
                     const bool need_x = tp.needs_grad(input);
                     const bool need_w = tp.needs_grad(weight);
                     if (tp.needs_grad(bias)) {
                       auto& gb = tp.grad_buffer(bias);
                       for (int n = 0; n < g.n; ++n)
                         for (int o = 0; o < cout; ++o) {
                           T s = 0;
                           const T* row = gy.raw() + (static_cast<std::size_t>(n) * cout + o) * hw;
                           for (int p = 0; p < hw; ++p) s += row[p];
                           gb[static_cast<std::size_t>(o)] += s;
                         }
                     }
                     if (!need_x && !need_w) return;
                     if (k == 1) {
                       detail::CMapRM<T> wmat(wv.raw(), cout, kk);
                       for (int n = 0; n < g.n; ++n) {
                         detail::CMapRM<T> gm(gy.raw() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
                         if (need_w)
                           detail::MapRM<T>(tp.grad_buffer(weight).raw(), cout, kk).noalias() +=
                               gm * detail::CMapRM<T>(xv.raw() + static_cast<std::size_t>(n) * g.c * hw, kk, hw).transpose();
                         if (need_x)
                           detail::MapRM<T>(tp.grad_buffer(input).raw() + static_cast<std::size_t>(n) * g.c * hw, kk, hw).noalias() +=
                               wmat.transpose() * gm;
                       }
                       return;
                     }
                     const detail::Shift3x3<T> sh(cin, g.h, g.w);
                     const auto taps = detail::split_taps(wv);
                     std::vector<detail::MatRM<T>> gtaps(9, detail::MatRM<T>::Zero(cout, cin));
                     std::vector<T> xp, gxp;
                     detail::MatRM<T> gwide(cout, sh.len);
                     for (int n = 0; n < g.n; ++n) {
                       gwide.setZero();
                       const T* gyn = gy.raw() + static_cast<std::size_t>(n) * cout * hw;
                       for (int o = 0; o < cout; ++o)
                         for (int yy = 0; yy < g.h; ++yy)
                           for (int xx = 0; xx < g.w; ++xx) gwide(o, yy * sh.pw + xx) = gyn[(static_cast<std::size_t>(o) * g.h + yy) * g.w + xx];
                       if (need_w) {
                         sh.pad(xv.raw() + static_cast<std::size_t>(n) * g.c * hw, xp);
                         for (int t = 0; t < 9; ++t)
                           gtaps[static_cast<std::size_t>(t)].noalias() += gwide * sh.view(static_cast<const T*>(xp.data()), t).transpose();
                       }
                       if (need_x) {
                         gxp.assign(static_cast<std::size_t>(cin) * sh.plane, T(0));
                         for (int t = 0; t < 9; ++t) sh.view(gxp.data(), t).noalias() += taps[static_cast<std::size_t>(t)].transpose() * gwide;
                         T* gimg = tp.grad_buffer(input).raw() + static_cast<std::size_t>(n) * g.c * hw;
                         for (int c = 0; c < cin; ++c)
                           for (int yy = 0; yy < g.h; ++yy)
                             for (int xx = 0; xx < g.w; ++xx)
                               gimg[(static_cast<std::size_t>(c) * g.h + yy) * g.w + xx] +=
                                   gxp[static_cast<std::size_t>(c) * sh.plane + (yy + 1) * sh.pw + xx + 1];
                       }
                     }
                     if (need_w) {
                       auto& gw = tp.grad_buffer(weight);
                       for (int o = 0; o < cout; ++o)
                         for (int c = 0; c < cin; ++c)
                           for (int t = 0; t < 9; ++t) gw[(static_cast<std::size_t>(o) * cin + c) * 9 + t] += gtaps[static_cast<std::size_t>(t)](o, c);
                     }
                   });
}

/// Per-instance, per-channel standardization with biased variance, then gamma * x + beta.
template <class T>
Var instance_norm(Tape<T>& tape, Var input, Var gamma, Var beta, double eps = kInstanceNormEps) {
  const auto& x = tape.value(input);
  const auto g = detail::as_batched(x, "instance_norm");
  const int hw = g.h * g.w;
  if (hw < 2) throw ShapeError("instance_norm: H*W must be at least 2 (variance is undefined for one pixel)");
  const auto& ga = tape.value(gamma);
  const auto& be = tape.value(beta);
  if (ga.size() != static_cast<std::size_t>(g.c) || be.size() != static_cast<std::size_t>(g.c))
    throw ShapeError("instance_norm: gamma/beta must have C entries");

  BasicTensor<T> y(x.shape());
  BasicTensor<T> xhat(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(g.n) * g.c);
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < g.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * g.c + c) * hw;
      double mean = 0;
      for (int p = 0; p < hw; ++p) mean += x[base + p];
      mean /= hw;
      double var = 0;
      for (int p = 0; p < hw; ++p) {
        const double d = x[base + p] - mean;
        var += d * d;
      }
      var /= hw;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * g.c + c] = static_cast<T>(is);
      for (int p = 0; p < hw; ++p) {
        const T xh = static_cast<T>((x[base + p] - mean) * is);
        xhat[base + p] = xh;
        y[base + p] = ga[static_cast<std::size_t>(c)] * xh + be[static_cast<std::size_t>(c)];
      }
    }

  return tape.push(std::move(y), {input, gamma, beta},
                   [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp, const BasicTensor<T>& gy) {
                     const auto& gav = tp.value(gamma);
                     const bool need_x = tp.needs_grad(input);
                     const bool need_g = tp.needs_grad(gamma);
                     const bool need_b = tp.needs_grad(beta);
                     for (int n = 0; n < g.n; ++n)
                       for (int c = 0; c < g.c; ++c) {
                         const std::size_t base = (static_cast<std::size_t>(n) * g.c + c) * hw;
                         double sum_g = 0, sum_gx = 0;
                         for (int p = 0; p < hw; ++p) {
                           sum_g += gy[base + p];
                           sum_gx += static_cast<double>(gy[base + p]) * xhat[base + p];
                         }
                         if (need_g) tp.grad_buffer(gamma)[static_cast<std::size_t>(c)] += static_cast<T>(sum_gx);
                         if (need_b) tp.grad_buffer(beta)[static_cast<std::size_t>(c)] += static_cast<T>(sum_g);
                         if (need_x) {
                           auto& gx = tp.grad_buffer(input);
                           const double gam = gav[static_cast<std::size_t>(c)];
                           const double is = inv_std[static_cast<std::size_t>(n) * g.c + c];
                           // d xhat = gy * gamma; dx = is/N * (N dxhat - sum dxhat - xhat * sum(dxhat xhat))
                           const double sd = gam * sum_g, sdx = gam * sum_gx;
                           for (int p = 0; p < hw; ++p) {
                             const double dxh = gam * gy[base + p];
                             gx[base + p] += static_cast<T>(is * (dxh - sd / hw - xhat[base + p] * sdx / hw));
                           }
                         }
                       }
                   });
}

template <class T>
Var relu(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    const auto& xv = tp.value(input);
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T(0)) gx[i] += gy[i];
  });
}

/// Row-wise affine map: N x Din -> N x Dout.
template <class T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  const auto& b = tape.value(bias);
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) throw ShapeError("linear: expected N x Din input, Dout x Din weight");
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (w.dim(1) != din) throw ShapeError("linear: input width " + std::to_string(din) + " != weight width " + std::to_string(w.dim(1)));
  if (b.dim(0) != dout) throw ShapeError("linear: bias length mismatch");
  BasicTensor<T> y({n, dout});
  detail::MapRM<T> ym(y.raw(), n, dout);
  ym.noalias() = detail::CMapRM<T>(x.raw(), n, din) * detail::CMapRM<T>(w.raw(), dout, din).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.raw(), dout);
  return tape.push(std::move(y), {input, weight, bias}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    detail::CMapRM<T> gm(gy.raw(), n, dout);
    if (tp.needs_grad(input)) {
      auto& gx = tp.grad_buffer(input);
      detail::MapRM<T>(gx.raw(), n, din).noalias() += gm * detail::CMapRM<T>(tp.value(weight).raw(), dout, din);
    }
    if (tp.needs_grad(weight)) {
      auto& gw = tp.grad_buffer(weight);
      detail::MapRM<T>(gw.raw(), dout, din).noalias() += gm.transpose() * detail::CMapRM<T>(tp.value(input).raw(), n, din);
    }
    if (tp.needs_grad(bias)) {
      auto& gb = tp.grad_buffer(bias);
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < dout; ++o) gb[static_cast<std::size_t>(o)] += gy[static_cast<std::size_t>(i) * dout + o];
    }
  });
}

/// Numerically stable softmax along `axis` (defaults to the last axis).
template <class T>
BasicTensor<T> softmax_values(const BasicTensor<T>& x, int axis = -1) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
  const std::size_t len = static_cast<std::size_t>(x.dim(axis));
  BasicTensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T m = x[base];
      for (std::size_t c = 1; c < len; ++c) m = std::max(m, x[base + c * inner]);
      T s = 0;
      for (std::size_t c = 0; c < len; ++c) {
        const T e = std::exp(x[base + c * inner] - m);
        y[base + c * inner] = e;
        s += e;
      }
      for (std::size_t c = 0; c < len; ++c) y[base + c * inner] /= s;
    }
  return y;
}

template <class T>
Var softmax(Tape<T>& tape, Var input, int axis = -1) {
  const auto& x = tape.value(input);
  if (axis < 0) axis += x.rank();
  auto y = softmax_values(x, axis);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
  const std::size_t len = static_cast<std::size_t>(x.dim(axis));
  // push appends, so the output node id is the current tape size
  const Var out{static_cast<int>(tape.size())};
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    const auto& yv = tp.value(out);
    auto& gx = tp.grad_buffer(input);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t c = 0; c < len; ++c) dot += gy[base + c * inner] * yv[base + c * inner];
        for (std::size_t c = 0; c < len; ++c) gx[base + c * inner] += yv[base + c * inner] * (gy[base + c * inner] - dot);
      }
  });
}

/// C x H x W -> C, mean over spatial positions.
template <class T>
Var global_avg_pool(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  if (x.rank() != 3) throw ShapeError("global_avg_pool: expected C x H x W, got " + shape_str(x.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  BasicTensor<T> y({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (int p = 0; p < hw; ++p) s += x[static_cast<std::size_t>(ch) * hw + p];
    y[static_cast<std::size_t>(ch)] = static_cast<T>(s / hw);
  }
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (int ch = 0; ch < c; ++ch) {
      const T g = gy[static_cast<std::size_t>(ch)] / static_cast<T>(hw);
      for (int p = 0; p < hw; ++p) gx[static_cast<std::size_t>(ch) * hw + p] += g;
    }
  });
}

template <class T>
Var reshape(Tape<T>& tape, Var input, Shape shape) {
  auto y = tape.value(input).reshaped(std::move(shape));
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) { tp.accumulate(input, gy.data()); });
}

template <class T>
Var softplus(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    y[i] = v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    const auto& xv = tp.value(input);
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] / (T(1) + std::exp(-xv[i]));
  });
}

template <class T>
Var add_scalar(Tape<T>& tape, Var input, T c) {
  auto y = tape.value(input);
  for (auto& v : y.data()) v += c;
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) { tp.accumulate(input, gy.data()); });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  BasicTensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return tape.push(std::move(y), {a, b}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    tp.accumulate(a, gy.data());
    tp.accumulate(b, gy.data());
  });
}

template <class T>
Var scale(Tape<T>& tape, Var input, T s) {
  auto y = tape.value(input);
  for (auto& v : y.data()) v *= s;
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
  });
}

/// Sum of all entries, shape [1].
template <class T>
Var sum(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  double s = 0;
  for (T v : x.data()) s += v;
  return tape.push(BasicTensor<T>({1}, static_cast<T>(s)), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (auto& v : gx.data()) v += gy[0];
  });
}

template <class T>
Var sum_squares(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  double s = 0;
  for (T v : x.data()) s += static_cast<double>(v) * v;
  return tape.push(BasicTensor<T>({1}, static_cast<T>(s)), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    const auto& xv = tp.value(input);
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += T(2) * xv[i] * gy[0];
  });
}

/// Scalar sum_i x_i * c_i against a constant tensor of the same shape.
template <class T>
Var dot(Tape<T>& tape, Var input, const BasicTensor<T>& c) {
  const auto& x = tape.value(input);
  if (x.shape() != c.shape()) throw ShapeError("dot: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(c.shape()));
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * c[i];
  return tape.push(BasicTensor<T>({1}, static_cast<T>(s)), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < c.size(); ++i) gx[i] += gy[0] * c[i];
  });
}

/// Weighted sum of scalar nodes.
template <class T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (tape.value(terms[i]).size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    s += static_cast<double>(weights[i]) * tape.value(terms[i])[0];
  }
  return tape.push(BasicTensor<T>({1}, static_cast<T>(s)), terms, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const T g = weights[i] * gy[0];
      tp.accumulate(terms[i], std::span<const T>(&g, 1));
    }
  });
}

/// Reparameterized draws: rows of mu + sqrt(var) * eps, with eps a fixed T x D tensor.
template <class T>
Var reparameterize(Tape<T>& tape, Var mu, Var var, const BasicTensor<T>& eps) {
  const auto& m = tape.value(mu);
  const auto& v = tape.value(var);
  if (m.rank() != 1 || v.shape() != m.shape() || eps.rank() != 2 || eps.dim(1) != m.dim(0))
    throw ShapeError("reparameterize: expected mu, var of length D and eps of T x D");
  const int t = eps.dim(0), d = eps.dim(1);
  BasicTensor<T> z({t, d});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j)
      z.at(i, j) = m[static_cast<std::size_t>(j)] + std::sqrt(v[static_cast<std::size_t>(j)]) * eps.at(i, j);
  return tape.push(std::move(z), {mu, var}, [=](Tape<T>& tp, const BasicTensor<T>& gz) {
    const auto& vv = tp.value(var);
    const bool nm = tp.needs_grad(mu), nv = tp.needs_grad(var);
    for (int j = 0; j < d; ++j) {
      T gm = 0, gv = 0;
      const T sd = std::sqrt(vv[static_cast<std::size_t>(j)]);
      for (int i = 0; i < t; ++i) {
        gm += gz.at(i, j);
        gv += gz.at(i, j) * eps.at(i, j) / (T(2) * sd);
      }
      if (nm) tp.grad_buffer(mu)[static_cast<std::size_t>(j)] += gm;
      if (nv) tp.grad_buffer(var)[static_cast<std::size_t>(j)] += gv;
    }
  });
}

/// N x K -> N x K x H x W, each row copied to every spatial position.
template <class T>
Var tile_spatial(Tape<T>& tape, Var input, int h, int w) {
  const auto& x = tape.value(input);
  if (x.rank() != 2) throw ShapeError("tile_spatial: expected N x K input");
  const int n = x.dim(0), k = x.dim(1), hw = h * w;
  BasicTensor<T> y({n, k, h, w});
  for (int i = 0; i < n * k; ++i) std::fill_n(y.raw() + static_cast<std::size_t>(i) * hw, hw, x[static_cast<std::size_t>(i)]);
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (int i = 0; i < n * k; ++i) {
      T s = 0;
      for (int p = 0; p < hw; ++p) s += gy[static_cast<std::size_t>(i) * hw + p];
      gx[static_cast<std::size_t>(i)] += s;
    }
  });
}

/// Stacks `reps` copies of the input along a new leading axis.
template <class T>
Var repeat(Tape<T>& tape, Var input, int reps) {
  const auto& x = tape.value(input);
  Shape shape{reps};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  BasicTensor<T> y(shape);
  for (int r = 0; r < reps; ++r) std::copy(x.raw(), x.raw() + x.size(), y.raw() + static_cast<std::size_t>(r) * x.size());
  const std::size_t len = x.size();
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    for (int r = 0; r < reps; ++r) tp.accumulate(input, gy.data().subspan(static_cast<std::size_t>(r) * len, len));
  });
}

/// Concatenates N x Ci x H x W tensors along the channel axis.
template <class T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const auto& first = tape.value(parts.front());
  if (first.rank() != 4) throw ShapeError("concat_channels: expected N x C x H x W parts");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3), hw = h * w;
  std::vector<int> chans;
  int total = 0;
  for (Var p : parts) {
    const auto& v = tape.value(p);
    if (v.rank() != 4 || v.dim(0) != n || v.dim(2) != h || v.dim(3) != w)
      throw ShapeError("concat_channels: part " + shape_str(v.shape()) + " incompatible with " + shape_str(first.shape()));
    chans.push_back(v.dim(1));
    total += v.dim(1);
  }
  BasicTensor<T> y({n, total, h, w});
  for (int i = 0; i < n; ++i) {
    int off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto& v = tape.value(parts[p]);
      const std::size_t len = static_cast<std::size_t>(chans[p]) * hw;
      std::copy_n(v.raw() + i * len, len, y.raw() + (static_cast<std::size_t>(i) * total + off) * hw);
      off += chans[p];
    }
  }
  return tape.push(std::move(y), parts, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    for (int i = 0; i < n; ++i) {
      int off = 0;
      for (std::size_t p = 0; p < parts.size(); ++p) {
        const std::size_t len = static_cast<std::size_t>(chans[p]) * hw;
        if (tp.needs_grad(parts[p])) {
          auto& g = tp.grad_buffer(parts[p]);
          const T* src = gy.raw() + (static_cast<std::size_t>(i) * total + off) * hw;
          T* dst = g.raw() + i * len;
          for (std::size_t q = 0; q < len; ++q) dst[q] += src[q];
        }
        off += chans[p];
      }
    }
  });
}

/// Mean over the leading axis.
template <class T>
Var mean_leading(Tape<T>& tape, Var input) {
  const auto& x = tape.value(input);
  if (x.rank() < 2) throw ShapeError("mean_leading: rank must be at least 2");
  const int reps = x.dim(0);
  Shape shape(x.shape().begin() + 1, x.shape().end());
  BasicTensor<T> y(shape);
  const std::size_t len = y.size();
  for (std::size_t i = 0; i < len; ++i) {
    T s = 0;
    for (int r = 0; r < reps; ++r) s += x[static_cast<std::size_t>(r) * len + i];
    y[i] = s / static_cast<T>(reps);
  }
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (int r = 0; r < reps; ++r)
      for (std::size_t i = 0; i < len; ++i) gx[static_cast<std::size_t>(r) * len + i] += gy[i] / static_cast<T>(reps);
  });
}

/// Inverted dropout with a mask drawn from rng; rate 0 is the identity.
template <class T>
Var dropout(Tape<T>& tape, Var input, double rate, Rng& rng) {
  if (rate <= 0.0) return input;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  const auto& x = tape.value(input);
  BasicTensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = rng.bernoulli(rate) ? T(0) : keep_scale;
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
  return tape.push(std::move(y), {input}, [=, mask = std::move(mask)](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
  });
}

/// Non-overlapping factor x factor average pooling over the spatial axes.
template <class T>
Var avg_pool2d(Tape<T>& tape, Var input, int factor) {
  const auto& x = tape.value(input);
  if (factor == 1) return input;
  const auto g = detail::as_batched(x, "avg_pool2d");
  if (factor < 1 || g.h % factor != 0 || g.w % factor != 0)
    throw ShapeError("avg_pool2d: spatial extents " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  const int oh = g.h / factor, ow = g.w / factor;
  Shape shape = x.rank() == 3 ? Shape{g.c, oh, ow} : Shape{g.n, g.c, oh, ow};
  BasicTensor<T> y(shape);
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int p = 0; p < g.n * g.c; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T s = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            s += x[(static_cast<std::size_t>(p) * g.h + oy * factor + dy) * g.w + ox * factor + dx];
        y[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] = s * inv;
      }
  return tape.push(std::move(y), {input}, [=](Tape<T>& tp, const BasicTensor<T>& gy) {
    auto& gx = tp.grad_buffer(input);
    for (int p = 0; p < g.n * g.c; ++p)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T v = gy[(static_cast<std::size_t>(p) * oh + oy) * ow + ox] * inv;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx)
              gx[(static_cast<std::size_t>(p) * g.h + oy * factor + dy) * g.w + ox * factor + dx] += v;
        }
  });
}

}  // namespace npss
