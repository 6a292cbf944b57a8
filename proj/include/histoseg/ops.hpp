#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <type_traits>

#include "histoseg/tensor.hpp"

namespace histoseg {

enum class Padding { kSame, kValid };
enum class Mode { kTrain, kInfer };

namespace detail {

template <typename T>
bool grad_enabled(std::initializer_list<const TensorT<T>*> inputs) {
  if (!TapeT<T>::current()) return false;
  for (const TensorT<T>* p : inputs) {
    if (p && p->defined() && p->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void attach(TensorT<T>& out, std::function<void()> backward_fn) {
  out.set_requires_grad(true);
  out.set_tape_id(TapeT<T>::current()->record(std::move(backward_fn), out.grad_buffer()));
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
}

template <typename T>
void require_4d(const TensorT<T>& x, const char* op) {
  if (x.ndim() != 4) {
    fail(std::string(op) + ": expected NCHW input, got shape " + shape_str(x.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeom {
  int n, in_c, in_h, in_w;
  int out_c, kh, kw;
  int stride, dilation;
  int pad_h, pad_w;  // top/left pad; any extra pad lands on bottom/right
  int out_h, out_w;
};

inline ConvGeom conv_geometry(const Shape& xs, const Shape& ws, int stride, int dilation,
                              Padding padding, const char* op) {
  if (xs.size() != 4) fail(std::string(op) + ": input must be NCHW, got " + shape_str(xs));
  if (ws.size() != 4) fail(std::string(op) + ": weight must be 4-d, got " + shape_str(ws));
  if (stride < 1) fail(std::string(op) + ": stride must be positive");
  if (dilation < 1) fail(std::string(op) + ": dilation must be positive");
  ConvGeom g{};
  g.n = xs[0];
  g.in_c = xs[1];
  g.in_h = xs[2];
  g.in_w = xs[3];
  g.out_c = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = stride;
  g.dilation = dilation;
  int eff_h = (g.kh - 1) * dilation + 1;
  int eff_w = (g.kw - 1) * dilation + 1;
  if (padding == Padding::kSame) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    int tot_h = std::max(0, (g.out_h - 1) * stride + eff_h - g.in_h);
    int tot_w = std::max(0, (g.out_w - 1) * stride + eff_w - g.in_w);
    g.pad_h = tot_h / 2;
    g.pad_w = tot_w / 2;
  } else {
    if (g.in_h < eff_h || g.in_w < eff_w) {
      fail(std::string(op) + ": effective kernel " + std::to_string(eff_h) + "x" +
           std::to_string(eff_w) + " exceeds input " + std::to_string(g.in_h) + "x" +
           std::to_string(g.in_w) + " with valid padding");
    }
    g.out_h = (g.in_h - eff_h) / stride + 1;
    g.out_w = (g.in_w - eff_w) / stride + 1;
    g.pad_h = 0;
    g.pad_w = 0;
  }
  return g;
}

namespace detail {

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  std::size_t k = 0;
  for (int c = 0; c < g.in_c; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++k) {
        T* dst = col + k * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad_h + ky * g.dilation;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T(0));
            dst += g.out_w;
            continue;
          }
          const T* row = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad_w + kx * g.dilation;
            *dst++ = (ix >= 0 && ix < g.in_w) ? row[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  std::size_t k = 0;
  for (int c = 0; c < g.in_c; ++c) {
    T* plane = dx + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx, ++k) {
        const T* src = col + k * P;
        for (int oy = 0; oy < g.out_h; ++oy) {
          int iy = oy * g.stride - g.pad_h + ky * g.dilation;
          if (iy < 0 || iy >= g.in_h) {
            src += g.out_w;
            continue;
          }
          T* row = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            int ix = ox * g.stride - g.pad_w + kx * g.dilation;
            if (ix >= 0 && ix < g.in_w) row[ix] += src[ox];
          }
          src += g.out_w;
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
}

// out[oc, p] = bias[oc] + sum_k w[oc, k] * col[k, p]
template <typename T>
void conv_gemm(const T* w, const T* bias, const T* col, int out_c, std::size_t K, std::size_t P,
               T* out) {
  parallel_for(0, out_c, [&](std::int64_t oc) {
    T* orow = out + static_cast<std::size_t>(oc) * P;
    std::fill(orow, orow + P, bias ? bias[oc] : T(0));
    const T* wrow = w + static_cast<std::size_t>(oc) * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T wv = wrow[k];
      const T* crow = col + k * P;
      for (std::size_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
    }
  });
}

template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                     const TensorT<T>& out, const ConvGeom& g) {
  const std::size_t K = static_cast<std::size_t>(g.in_c) * g.kh * g.kw;
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t in_plane = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_c) * P;
  const bool pointwise = is_pointwise(g);
  const bool need_x = x.requires_grad();
  const bool need_w = w.requires_grad();
  const bool need_b = b.defined() && b.requires_grad();
  const std::vector<T>& gout = out.grad();

  std::vector<T> colbuf, dcolbuf;
  if (!pointwise) colbuf.resize(K * P);
  if (!pointwise && need_x) dcolbuf.resize(K * P);

  for (int n = 0; n < g.n; ++n) {
    const T* go = gout.data() + static_cast<std::size_t>(n) * out_plane;
    if (need_b) {
      std::vector<T>& db = b.grad();
      for (int oc = 0; oc < g.out_c; ++oc) {
        T acc = T(0);
        const T* grow = go + static_cast<std::size_t>(oc) * P;
        for (std::size_t p = 0; p < P; ++p) acc += grow[p];
        db[static_cast<std::size_t>(oc)] += acc;
      }
    }
    const T* col = nullptr;
    if (need_w || need_x) {
      if (pointwise) {
        col = x.cptr() + static_cast<std::size_t>(n) * in_plane;
      } else {
        im2col(x.cptr() + static_cast<std::size_t>(n) * in_plane, g, colbuf.data());
        col = colbuf.data();
      }
    }
    if (need_w) {
      std::vector<T>& dw = w.grad();
      for (int oc = 0; oc < g.out_c; ++oc) {
        const T* grow = go + static_cast<std::size_t>(oc) * P;
        for (std::size_t k = 0; k < K; ++k) {
          const T* crow = col + k * P;
          T acc = T(0);
          for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
          dw[static_cast<std::size_t>(oc) * K + k] += acc;
        }
      }
    }
    if (need_x) {
      std::vector<T>& dx = x.grad();
      if (pointwise) {
        T* dxn = dx.data() + static_cast<std::size_t>(n) * in_plane;
        for (int oc = 0; oc < g.out_c; ++oc) {
          const T* grow = go + static_cast<std::size_t>(oc) * P;
          const T* wrow = w.cptr() + static_cast<std::size_t>(oc) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const T wv = wrow[k];
            T* drow = dxn + k * P;
            for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
          }
        }
      } else {
        std::fill(dcolbuf.begin(), dcolbuf.end(), T(0));
        for (int oc = 0; oc < g.out_c; ++oc) {
          const T* grow = go + static_cast<std::size_t>(oc) * P;
          const T* wrow = w.cptr() + static_cast<std::size_t>(oc) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const T wv = wrow[k];
            T* drow = dcolbuf.data() + k * P;
            for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
          }
        }
        col2im_add(dcolbuf.data(), g, dx.data() + static_cast<std::size_t>(n) * in_plane);
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight,
                  const TensorT<std::type_identity_t<T>>* bias = nullptr, int stride = 1,
                  int dilation = 1, Padding padding = Padding::kSame) {
  ConvGeom g = conv_geometry(x.shape(), weight.shape(), stride, dilation, padding, "conv2d");
  if (weight.dim(1) != g.in_c) {
    fail("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
         std::to_string(g.in_c));
  }
  const bool has_bias = bias && bias->defined();
  if (has_bias && (bias->ndim() != 1 || bias->dim(0) != g.out_c)) {
    fail("conv2d: bias shape " + shape_str(bias->shape()) + " does not match " +
         std::to_string(g.out_c) + " output channels");
  }

  TensorT<T> out(Shape{g.n, g.out_c, g.out_h, g.out_w});
  const std::size_t K = static_cast<std::size_t>(g.in_c) * g.kh * g.kw;
  const std::size_t P = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t in_plane = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_c) * P;
  const bool pointwise = detail::is_pointwise(g);

  std::vector<T> colbuf;
  if (!pointwise) colbuf.resize(K * P);
  for (int n = 0; n < g.n; ++n) {
    const T* xs = x.cptr() + static_cast<std::size_t>(n) * in_plane;
    const T* col = xs;
    if (!pointwise) {
      detail::im2col(xs, g, colbuf.data());
      col = colbuf.data();
    }
    detail::conv_gemm(weight.cptr(), has_bias ? bias->cptr() : nullptr, col, g.out_c, K, P,
                      out.ptr() + static_cast<std::size_t>(n) * out_plane);
  }

  if (detail::grad_enabled<T>({&x, &weight, bias})) {
    TensorT<T> xc = x, wc = weight, bc = has_bias ? *bias : TensorT<T>(), oc = out;
    detail::attach(out, [xc, wc, bc, oc, g]() mutable {
      detail::conv2d_backward(xc, wc, bc, oc, g);
    });
  }
  return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  int stride = 1, int dilation = 1, Padding padding = Padding::kSame) {
  return conv2d(x, weight, &bias, stride, dilation, padding);
}

namespace detail {

template <typename T>
void depthwise_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& out,
                        const ConvGeom& g) {
  const bool need_x = x.requires_grad();
  const bool need_w = w.requires_grad();
  const std::vector<T>& gout = out.grad();
  const std::size_t in_hw = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_hw = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t kk = static_cast<std::size_t>(g.kh) * g.kw;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.in_c; ++c) {
      const T* go = gout.data() + (static_cast<std::size_t>(n) * g.in_c + c) * out_hw;
      const T* xp = x.cptr() + (static_cast<std::size_t>(n) * g.in_c + c) * in_hw;
      const T* wp = w.cptr() + static_cast<std::size_t>(c) * kk;
      T* dxp = need_x ? x.grad().data() + (static_cast<std::size_t>(n) * g.in_c + c) * in_hw
                      : nullptr;
      T* dwp = need_w ? w.grad().data() + static_cast<std::size_t>(c) * kk : nullptr;
      for (int oy = 0; oy < g.out_h; ++oy) {
        for (int ox = 0; ox < g.out_w; ++ox) {
          const T gv = go[static_cast<std::size_t>(oy) * g.out_w + ox];
          for (int ky = 0; ky < g.kh; ++ky) {
            int iy = oy * g.stride - g.pad_h + ky * g.dilation;
            if (iy < 0 || iy >= g.in_h) continue;
            for (int kx = 0; kx < g.kw; ++kx) {
              int ix = ox * g.stride - g.pad_w + kx * g.dilation;
              if (ix < 0 || ix >= g.in_w) continue;
              std::size_t xi = static_cast<std::size_t>(iy) * g.in_w + ix;
              std::size_t wi = static_cast<std::size_t>(ky) * g.kw + kx;
              if (dwp) dwp[wi] += gv * xp[xi];
              if (dxp) dxp[xi] += gv * wp[wi];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// One filter per channel; weight is C x 1 x Kh x Kw.
template <typename T>
TensorT<T> depthwise_conv2d(const TensorT<T>& x, const TensorT<T>& weight, int dilation = 1,
                            Padding padding = Padding::kSame, int stride = 1) {
  detail::require_4d(x, "depthwise_conv2d");
  if (weight.ndim() != 4 || weight.dim(1) != 1) {
    fail("depthwise_conv2d: weight must be Cx1xKhxKw, got " + shape_str(weight.shape()));
  }
  if (weight.dim(0) != x.dim(1)) {
    fail("depthwise_conv2d: weight has " + std::to_string(weight.dim(0)) +
         " channels, input has " + std::to_string(x.dim(1)));
  }
  ConvGeom g = conv_geometry(x.shape(), weight.shape(), stride, dilation, padding,
                             "depthwise_conv2d");
  g.out_c = g.in_c;

  TensorT<T> out(Shape{g.n, g.in_c, g.out_h, g.out_w});
  const std::size_t in_hw = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_hw = static_cast<std::size_t>(g.out_h) * g.out_w;
  const std::size_t kk = static_cast<std::size_t>(g.kh) * g.kw;
  const T* xp0 = x.cptr();
  const T* wp0 = weight.cptr();
  T* op0 = out.ptr();
  parallel_for(0, static_cast<std::int64_t>(g.n) * g.in_c, [&](std::int64_t plane) {
    const T* xp = xp0 + static_cast<std::size_t>(plane) * in_hw;
    const T* wp = wp0 + static_cast<std::size_t>(plane % g.in_c) * kk;
    T* op = op0 + static_cast<std::size_t>(plane) * out_hw;
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        T acc = T(0);
        for (int ky = 0; ky < g.kh; ++ky) {
          int iy = oy * g.stride - g.pad_h + ky * g.dilation;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kw; ++kx) {
            int ix = ox * g.stride - g.pad_w + kx * g.dilation;
            if (ix < 0 || ix >= g.in_w) continue;
            acc += wp[static_cast<std::size_t>(ky) * g.kw + kx] *
                   xp[static_cast<std::size_t>(iy) * g.in_w + ix];
          }
        }
        op[static_cast<std::size_t>(oy) * g.out_w + ox] = acc;
      }
    }
  });

  if (detail::grad_enabled<T>({&x, &weight})) {
    TensorT<T> xc = x, wc = weight, oc = out;
    detail::attach(out, [xc, wc, oc, g]() mutable { detail::depthwise_backward(xc, wc, oc, g); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

// Train mode normalizes with biased batch statistics over N,H,W per channel
// and updates the running stats in place (running = momentum*running +
// (1-momentum)*batch). Infer mode uses the running stats.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      TensorT<T>& running_mean, TensorT<T>& running_var, Mode mode,
                      double momentum = 0.9, double eps = 1e-5) {
  detail::require_4d(x, "batch_norm");
  const int C = x.dim(1);
  auto check_c = [&](const TensorT<T>& t, const char* name) {
    if (t.ndim() != 1 || t.dim(0) != C) {
      fail(std::string("batch_norm: ") + name + " shape " + shape_str(t.shape()) +
           " does not match " + std::to_string(C) + " channels");
    }
  };
  check_c(gamma, "gamma");
  check_c(beta, "beta");
  check_c(running_mean, "running_mean");
  check_c(running_var, "running_var");

  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t chw = static_cast<std::size_t>(C) * hw;
  const std::size_t m = static_cast<std::size_t>(N) * hw;

  TensorT<T> out(x.shape());
  std::vector<T> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));

  if (mode == Mode::kTrain) {
    for (int c = 0; c < C; ++c) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.cptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x.cptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          double d = p[i] - mu;
          sq += d * d;
        }
      }
      double var = sq / static_cast<double>(m);
      mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
      invstd[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + eps));
      running_mean.data()[static_cast<std::size_t>(c)] = static_cast<T>(
          momentum * running_mean.data()[static_cast<std::size_t>(c)] + (1.0 - momentum) * mu);
      running_var.data()[static_cast<std::size_t>(c)] = static_cast<T>(
          momentum * running_var.data()[static_cast<std::size_t>(c)] + (1.0 - momentum) * var);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean.data()[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(running_var.data()[static_cast<std::size_t>(c)]) + eps));
    }
  }

  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.cptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
      T* o = out.ptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T gm = gamma.cptr()[static_cast<std::size_t>(c)];
      const T bt = beta.cptr()[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < hw; ++i) o[i] = gm * ((p[i] - mu) * is) + bt;
    }
  }

  if (detail::grad_enabled<T>({&x, &gamma, &beta})) {
    TensorT<T> xc = x, gc = gamma, bc = beta, oc = out;
    bool train = (mode == Mode::kTrain);
    detail::attach(out, [xc, gc, bc, oc, mean, invstd, N, C, hw, chw, m, train]() mutable {
      const std::vector<T>& gout = oc.grad();
      for (int c = 0; c < C; ++c) {
        const T mu = mean[static_cast<std::size_t>(c)];
        const T is = invstd[static_cast<std::size_t>(c)];
        const T gm = gc.cptr()[static_cast<std::size_t>(c)];
        // dbeta = sum(dy); dgamma = sum(dy * xhat)
        double dbeta = 0.0, dgamma = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* p = xc.cptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
          const T* go = gout.data() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            dbeta += go[i];
            dgamma += go[i] * ((p[i] - mu) * is);
          }
        }
        if (bc.requires_grad()) bc.grad()[static_cast<std::size_t>(c)] += static_cast<T>(dbeta);
        if (gc.requires_grad()) gc.grad()[static_cast<std::size_t>(c)] += static_cast<T>(dgamma);
        if (xc.requires_grad()) {
          std::vector<T>& dx = xc.grad();
          if (train) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (int n = 0; n < N; ++n) {
              const T* p = xc.cptr() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
              const T* go = gout.data() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
              T* d = dx.data() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                double xhat = (p[i] - mu) * is;
                d[i] += static_cast<T>(gm * is * (go[i] - dbeta * inv_m - xhat * dgamma * inv_m));
              }
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const T* go = gout.data() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
              T* d = dx.data() + static_cast<std::size_t>(n) * chw + static_cast<std::size_t>(c) * hw;
              for (std::size_t i = 0; i < hw; ++i) d[i] += gm * is * go[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  const T* p = x.cptr();
  T* o = out.ptr();
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) o[i] = p[i] > T(0) ? p[i] : T(0);
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T* p = xc.cptr();
      // subgradient at exactly 0 is 0
      for (std::size_t i = 0, n = xc.numel(); i < n; ++i) {
        if (p[i] > T(0)) dx[i] += go[i];
      }
    });
  }
  return out;
}

// The exact function never attains 0 or 1; keep rounded results inside the
// open interval so saturated activations stay strictly representable as such.
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  constexpr T lo = std::numeric_limits<T>::denorm_min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  TensorT<T> out(x.shape());
  const T* p = x.cptr();
  T* o = out.ptr();
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) {
    const T v = p[i];
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    // Comparison form rather than min/max so a NaN logit stays NaN instead
    // of being laundered into a plausible probability.
    o[i] = s < lo ? lo : (s > hi ? hi : s);
  }
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T* y = oc.cptr();
      for (std::size_t i = 0, n = xc.numel(); i < n; ++i) dx[i] += go[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / resizing

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  detail::require_4d(x, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  TensorT<T> out(Shape{N, C, 1, 1});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.cptr() + (static_cast<std::size_t>(n) * C + c) * hw;
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      out.ptr()[static_cast<std::size_t>(n) * C + c] = static_cast<T>(acc / static_cast<double>(hw));
    }
  }
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, N, C, hw]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T scale = static_cast<T>(1.0 / static_cast<double>(hw));
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const T g = go[static_cast<std::size_t>(n) * C + c] * scale;
          T* d = dx.data() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) d[i] += g;
        }
      }
    });
  }
  return out;
}

namespace detail {

// Half-pixel-center sampling: src = (dst + 0.5) * in/out - 0.5, clamped.
struct ResizeAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

inline ResizeAxis resize_axis(int in, int out) {
  ResizeAxis a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    if (s > in - 1) s = in - 1;
    int lo = static_cast<int>(std::floor(s));
    if (lo > in - 1) lo = in - 1;
    a.i0[static_cast<std::size_t>(o)] = lo;
    a.i1[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
    a.frac[static_cast<std::size_t>(o)] = s - lo;
  }
  return a;
}

}  // namespace detail

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w) {
  detail::require_4d(x, "bilinear_resize");
  if (out_h < 1 || out_w < 1) fail("bilinear_resize: output extents must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::ResizeAxis ay = detail::resize_axis(H, out_h);
  detail::ResizeAxis ax = detail::resize_axis(W, out_w);
  TensorT<T> out(Shape{N, C, out_h, out_w});
  const std::size_t in_hw = static_cast<std::size_t>(H) * W;
  const std::size_t out_hw = static_cast<std::size_t>(out_h) * out_w;
  parallel_for(0, static_cast<std::int64_t>(N) * C, [&](std::int64_t plane) {
    const T* p = x.cptr() + static_cast<std::size_t>(plane) * in_hw;
    T* o = out.ptr() + static_cast<std::size_t>(plane) * out_hw;
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = ay.i0[static_cast<std::size_t>(oy)], y1 = ay.i1[static_cast<std::size_t>(oy)];
      const double fy = ay.frac[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = ax.i0[static_cast<std::size_t>(ox)], x1 = ax.i1[static_cast<std::size_t>(ox)];
        const double fx = ax.frac[static_cast<std::size_t>(ox)];
        const double v00 = p[static_cast<std::size_t>(y0) * W + x0];
        const double v01 = p[static_cast<std::size_t>(y0) * W + x1];
        const double v10 = p[static_cast<std::size_t>(y1) * W + x0];
        const double v11 = p[static_cast<std::size_t>(y1) * W + x1];
        const double top = v00 * (1.0 - fx) + v01 * fx;
        const double bot = v10 * (1.0 - fx) + v11 * fx;
        o[static_cast<std::size_t>(oy) * out_w + ox] = static_cast<T>(top * (1.0 - fy) + bot * fy);
      }
    }
  });
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, ay, ax, N, C, H, W, out_h, out_w, in_hw, out_hw]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      for (std::int64_t plane = 0; plane < static_cast<std::int64_t>(N) * C; ++plane) {
        const T* g = go.data() + static_cast<std::size_t>(plane) * out_hw;
        T* d = dx.data() + static_cast<std::size_t>(plane) * in_hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y0 = ay.i0[static_cast<std::size_t>(oy)], y1 = ay.i1[static_cast<std::size_t>(oy)];
          const double fy = ay.frac[static_cast<std::size_t>(oy)];
          for (int ox = 0; ox < out_w; ++ox) {
            const int x0 = ax.i0[static_cast<std::size_t>(ox)], x1 = ax.i1[static_cast<std::size_t>(ox)];
            const double fx = ax.frac[static_cast<std::size_t>(ox)];
            const double gv = g[static_cast<std::size_t>(oy) * out_w + ox];
            d[static_cast<std::size_t>(y0) * W + x0] += static_cast<T>(gv * (1.0 - fy) * (1.0 - fx));
            d[static_cast<std::size_t>(y0) * W + x1] += static_cast<T>(gv * (1.0 - fy) * fx);
            d[static_cast<std::size_t>(y1) * W + x0] += static_cast<T>(gv * fy * (1.0 - fx));
            d[static_cast<std::size_t>(y1) * W + x1] += static_cast<T>(gv * fy * fx);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis = 1) {
  if (axis != 1) fail("concat: only the channel axis is supported");
  if (xs.empty()) fail("concat: empty input list");
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int C = 0;
  for (const auto& x : xs) {
    detail::require_4d(x, "concat");
    if (x.dim(0) != N || x.dim(2) != H || x.dim(3) != W) {
      fail("concat: non-channel extents differ: " + shape_str(xs[0].shape()) + " vs " +
           shape_str(x.shape()));
    }
    C += x.dim(1);
  }
  TensorT<T> out(Shape{N, C, H, W});
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::size_t coff = 0;
    for (const auto& x : xs) {
      const std::size_t xc = static_cast<std::size_t>(x.dim(1));
      std::memcpy(out.ptr() + (static_cast<std::size_t>(n) * C + coff) * hw,
                  x.cptr() + static_cast<std::size_t>(n) * xc * hw, xc * hw * sizeof(T));
      coff += xc;
    }
  }
  bool any_grad = false;
  for (const auto& x : xs) any_grad = any_grad || x.requires_grad();
  if (TapeT<T>::current() && any_grad) {
    std::vector<TensorT<T>> inputs = xs;
    TensorT<T> oc = out;
    detail::attach(out, [inputs, oc, N, C, hw]() mutable {
      const std::vector<T>& go = oc.grad();
      for (int n = 0; n < N; ++n) {
        std::size_t coff = 0;
        for (auto& x : inputs) {
          const std::size_t xc = static_cast<std::size_t>(x.dim(1));
          if (x.requires_grad()) {
            T* d = x.grad().data() + static_cast<std::size_t>(n) * xc * hw;
            const T* g = go.data() + (static_cast<std::size_t>(n) * C + coff) * hw;
            for (std::size_t i = 0; i < xc * hw; ++i) d[i] += g[i];
          }
          coff += xc;
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "add");
  TensorT<T> out(a.shape());
  const T* pa = a.cptr();
  const T* pb = b.cptr();
  T* o = out.ptr();
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) o[i] = pa[i] + pb[i];
  if (detail::grad_enabled<T>({&a, &b})) {
    TensorT<T> ac = a, bc = b, oc = out;
    detail::attach(out, [ac, bc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      if (ac.requires_grad()) {
        std::vector<T>& da = ac.grad();
        for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i];
      }
      if (bc.requires_grad()) {
        std::vector<T>& db = bc.grad();
        for (std::size_t i = 0; i < go.size(); ++i) db[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "sub");
  TensorT<T> out(a.shape());
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) out.ptr()[i] = a.cptr()[i] - b.cptr()[i];
  if (detail::grad_enabled<T>({&a, &b})) {
    TensorT<T> ac = a, bc = b, oc = out;
    detail::attach(out, [ac, bc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      if (ac.requires_grad()) {
        std::vector<T>& da = ac.grad();
        for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i];
      }
      if (bc.requires_grad()) {
        std::vector<T>& db = bc.grad();
        for (std::size_t i = 0; i < go.size(); ++i) db[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "mul");
  TensorT<T> out(a.shape());
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) out.ptr()[i] = a.cptr()[i] * b.cptr()[i];
  if (detail::grad_enabled<T>({&a, &b})) {
    TensorT<T> ac = a, bc = b, oc = out;
    detail::attach(out, [ac, bc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      if (ac.requires_grad()) {
        std::vector<T>& da = ac.grad();
        const T* pb = bc.cptr();
        for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i] * pb[i];
      }
      if (bc.requires_grad()) {
        std::vector<T>& db = bc.grad();
        const T* pa = ac.cptr();
        for (std::size_t i = 0; i < go.size(); ++i) db[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "div");
  TensorT<T> out(a.shape());
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) out.ptr()[i] = a.cptr()[i] / b.cptr()[i];
  if (detail::grad_enabled<T>({&a, &b})) {
    TensorT<T> ac = a, bc = b, oc = out;
    detail::attach(out, [ac, bc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      const T* pa = ac.cptr();
      const T* pb = bc.cptr();
      if (ac.requires_grad()) {
        std::vector<T>& da = ac.grad();
        for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i] / pb[i];
      }
      if (bc.requires_grad()) {
        std::vector<T>& db = bc.grad();
        for (std::size_t i = 0; i < go.size(); ++i) db[i] -= go[i] * pa[i] / (pb[i] * pb[i]);
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double s) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0, n = x.numel(); i < n; ++i)
    out.ptr()[i] = static_cast<T>(x.cptr()[i] * s);
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, s]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += static_cast<T>(go[i] * s);
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, double s) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0, n = x.numel(); i < n; ++i)
    out.ptr()[i] = static_cast<T>(x.cptr()[i] + s);
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) out.ptr()[i] = std::log(x.cptr()[i]);
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T* p = xc.cptr();
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] / p[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> pow_scalar(const TensorT<T>& x, double e) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0, n = x.numel(); i < n; ++i)
    out.ptr()[i] = static_cast<T>(std::pow(static_cast<double>(x.cptr()[i]), e));
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, e]() mutable {
      if (e == 0.0) return;  // constant 1, zero gradient
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T* p = xc.cptr();
      for (std::size_t i = 0; i < go.size(); ++i) {
        dx[i] += static_cast<T>(go[i] * e * std::pow(static_cast<double>(p[i]), e - 1.0));
      }
    });
  }
  return out;
}

// Pass-through gradient strictly inside (lo, hi), zero where clamped.
template <typename T>
TensorT<T> clamp(const TensorT<T>& x, double lo, double hi) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) {
    double v = x.cptr()[i];
    out.ptr()[i] = static_cast<T>(v < lo ? lo : (v > hi ? hi : v));
  }
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, lo, hi]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      const T* p = xc.cptr();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (p[i] > static_cast<T>(lo) && p[i] < static_cast<T>(hi)) dx[i] += go[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) acc += x.cptr()[i];
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc]() mutable {
      const T g = oc.grad()[0];
      std::vector<T>& dx = xc.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  const std::size_t n = x.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x.cptr()[i];
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, n]() mutable {
      const T g = static_cast<T>(oc.grad()[0] / static_cast<double>(n));
      std::vector<T>& dx = xc.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

// Sums over all axes except the leading (batch) axis; output shape {N}.
template <typename T>
TensorT<T> sum_per_sample(const TensorT<T>& x) {
  if (x.ndim() < 1) fail("sum_per_sample: tensor must have a batch axis");
  const int N = x.dim(0);
  const std::size_t per = x.numel() / static_cast<std::size_t>(N);
  TensorT<T> out(Shape{N});
  for (int s = 0; s < N; ++s) {
    double acc = 0.0;
    const T* p = x.cptr() + static_cast<std::size_t>(s) * per;
    for (std::size_t i = 0; i < per; ++i) acc += p[i];
    out.ptr()[static_cast<std::size_t>(s)] = static_cast<T>(acc);
  }
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, N, per]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      for (int s = 0; s < N; ++s) {
        const T g = go[static_cast<std::size_t>(s)];
        T* d = dx.data() + static_cast<std::size_t>(s) * per;
        for (std::size_t i = 0; i < per; ++i) d[i] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout

// Inverted dropout: train mode zeroes each element with probability `rate`
// and scales survivors by 1/(1-rate); infer mode is the identity.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must be in [0, 1)");
  if (mode == Mode::kInfer || rate == 0.0) return x;
  const std::size_t n = x.numel();
  auto factors = std::make_shared<std::vector<T>>(n);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    (*factors)[i] = rng.uniform() >= rate ? keep_scale : T(0);
    out.ptr()[i] = x.cptr()[i] * (*factors)[i];
  }
  if (detail::grad_enabled<T>({&x})) {
    TensorT<T> xc = x, oc = out;
    detail::attach(out, [xc, oc, factors]() mutable {
      const std::vector<T>& go = oc.grad();
      std::vector<T>& dx = xc.grad();
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] * (*factors)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
  TapeT<T>* tape = TapeT<T>::current();
  if (!tape) fail("backward: no active tape");
  tape->backward(loss);
}

}  // namespace histoseg
