#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cspec/autodiff.hpp"
#include "cspec/gemm.hpp"
#include "cspec/tensor.hpp"

namespace cspec {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> out = a->value;
  for (size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) accum_grad(*a, n.grad);
    if (b->requires_grad) accum_grad(*b, n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<T> out = a->value;
  for (size_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) accum_grad(*a, n.grad);
    if (b->requires_grad) {
      b->ensure_grad();
      for (size_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor<T> out = a->value;
  for (size_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (size_t i = 0; i < n.grad.numel(); ++i)
        a->grad[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (size_t i = 0; i < n.grad.numel(); ++i)
        b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= s;
  return make_node<T>(std::move(out), {a}, [a, s](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * s;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v += s;
  return make_node<T>(std::move(out), {a},
                      [a](Node<T>& n) { accum_grad(*a, n.grad); });
}

// Elementwise product with a constant tensor. If the constant is rank-2 (H,W)
// and the input rank-3 (C,H,W), the constant is broadcast across channels.
template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  const auto& av = a->value;
  bool broadcast = av.rank() == 3 && c.rank() == 2;
  require(broadcast || av.same_shape(c), "mul_const: shape mismatch");
  Tensor<T> out = av;
  if (broadcast) {
    size_t hw = c.numel();
    for (int ch = 0; ch < av.size(0); ++ch)
      for (size_t i = 0; i < hw; ++i) out[size_t(ch) * hw + i] *= c[i];
  } else {
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  }
  return make_node<T>(std::move(out), {a}, [a, c, broadcast](Node<T>& n) {
    a->ensure_grad();
    if (broadcast) {
      size_t hw = c.numel();
      for (int ch = 0; ch < a->value.size(0); ++ch)
        for (size_t i = 0; i < hw; ++i)
          a->grad[size_t(ch) * hw + i] += n.grad[size_t(ch) * hw + i] * c[i];
    } else {
      for (size_t i = 0; i < n.grad.numel(); ++i)
        a->grad[i] += n.grad[i] * c[i];
    }
  });
}

// out = a / s, s a scalar node (numel == 1); grads to both.
template <typename T>
Var<T> div_by_scalar_node(const Var<T>& a, const Var<T>& s) {
  require(s->value.numel() == 1, "div_by_scalar_node: divisor must be scalar");
  T d = s->value[0];
  Tensor<T> out = a->value;
  for (auto& v : out.data) v /= d;
  return make_node<T>(std::move(out), {a, s}, [a, s, d](Node<T>& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] / d;
    }
    if (s->requires_grad) {
      T acc = 0;
      for (size_t i = 0; i < n.grad.numel(); ++i)
        acc += n.grad[i] * a->value[i];
      s->ensure_grad();
      s->grad[0] -= acc / (d * d);
    }
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out = a->value;
  for (auto& v : out.data)
    if (v < T(0)) v *= slope;
  return make_node<T>(std::move(out), {a}, [a, slope](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * (a->value[i] < T(0) ? slope : T(1));
  });
}

template <typename T>
Var<T> vabs(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = std::abs(v);
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i) {
      T x = a->value[i];
      a->grad[i] += n.grad[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
    }
  });
}

// smooth |x| = sqrt(x^2 + eps); keeps gradient checks well conditioned
template <typename T>
Var<T> vabs_smooth(const Var<T>& a, T eps) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = std::sqrt(v * v + eps);
  return make_node<T>(std::move(out), {a}, [a, eps](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i) {
      T x = a->value[i];
      a->grad[i] += n.grad[i] * x / std::sqrt(x * x + eps);
    }
  });
}

template <typename T>
Var<T> vsquare(const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= v;
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * T(2) * a->value[i];
  });
}

// max(a, c) elementwise against a constant
template <typename T>
Var<T> clamp_min(const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = std::max(v, c);
  return make_node<T>(std::move(out), {a, }, [a, c](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i)
      if (a->value[i] > c) a->grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> vsum(const Var<T>& a) {
  Tensor<T> out({1});
  out[0] = a->value.sum();
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    T g = n.grad[0];
    for (size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

template <typename T>
Var<T> vmean(const Var<T>& a) {
  T inv = T(1) / T(a->value.numel());
  return mul_scalar(vsum(a), inv);
}

// max over all elements; gradient routed to the first argmax
template <typename T>
Var<T> vmax(const Var<T>& a) {
  size_t arg = 0;
  for (size_t i = 1; i < a->value.numel(); ++i)
    if (a->value[i] > a->value[arg]) arg = i;
  Tensor<T> out({1});
  out[0] = a->value[arg];
  return make_node<T>(std::move(out), {a}, [a, arg](Node<T>& n) {
    a->ensure_grad();
    a->grad[arg] += n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, const std::vector<int>& shape) {
  Tensor<T> out(shape);
  require(out.numel() == a->value.numel(), "reshape: element count mismatch");
  out.data = a->value.data;
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    for (size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), "concat_channels: empty input");
  int h = xs[0]->value.size(1), w = xs[0]->value.size(2);
  int ctot = 0;
  for (const auto& x : xs) {
    require(x->value.rank() == 3 && x->value.size(1) == h && x->value.size(2) == w,
            "concat_channels: spatial dims mismatch");
    ctot += x->value.size(0);
  }
  Tensor<T> out({ctot, h, w});
  size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x->value.data.begin(), x->value.data.end(), out.data.begin() + off);
    off += x->value.numel();
  }
  std::vector<Var<T>> parents = xs;
  return make_node<T>(std::move(out), std::move(parents), [xs](Node<T>& n) {
    size_t off = 0;
    for (const auto& x : xs) {
      size_t m = x->value.numel();
      if (x->requires_grad) {
        x->ensure_grad();
        for (size_t i = 0; i < m; ++i) x->grad[i] += n.grad[off + i];
      }
      off += m;
    }
  });
}

// replicate (edge) padding of a CHW tensor
template <typename T>
Var<T> replicate_pad(const Var<T>& a, int pt, int pb, int pl, int pr) {
  if (pt == 0 && pb == 0 && pl == 0 && pr == 0) return a;
  int c = a->value.size(0), h = a->value.size(1), w = a->value.size(2);
  int ho = h + pt + pb, wo = w + pl + pr;
  Tensor<T> out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y) {
      int sy = std::clamp(y - pt, 0, h - 1);
      for (int x = 0; x < wo; ++x) {
        int sx = std::clamp(x - pl, 0, w - 1);
        out.at(ch, y, x) = a->value.at(ch, sy, sx);
      }
    }
  return make_node<T>(std::move(out), {a}, [a, pt, pl, h, w](Node<T>& n) {
    a->ensure_grad();
    int c = a->value.size(0), ho = n.value.size(1), wo = n.value.size(2);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y) {
        int sy = std::clamp(y - pt, 0, h - 1);
        for (int x = 0; x < wo; ++x) {
          int sx = std::clamp(x - pl, 0, w - 1);
          a->grad.at(ch, sy, sx) += n.grad.at(ch, y, x);
        }
      }
  });
}

// top-left anchored crop of a CHW tensor
template <typename T>
Var<T> crop2d(const Var<T>& a, int h, int w) {
  int c = a->value.size(0), hi = a->value.size(1), wi = a->value.size(2);
  require(h <= hi && w <= wi, "crop2d: target larger than input");
  if (h == hi && w == wi) return a;
  Tensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = a->value.at(ch, y, x);
  return make_node<T>(std::move(out), {a}, [a, h, w](Node<T>& n) {
    a->ensure_grad();
    int c = a->value.size(0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) a->grad.at(ch, y, x) += n.grad.at(ch, y, x);
  });
}

// 2x2 average pooling, stride 2; input dims must be even
template <typename T>
Var<T> avg_pool2(const Var<T>& a) {
  int c = a->value.size(0), h = a->value.size(1), w = a->value.size(2);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2: dims must be even");
  Tensor<T> out({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h / 2; ++y)
      for (int x = 0; x < w / 2; ++x)
        out.at(ch, y, x) =
            T(0.25) * (a->value.at(ch, 2 * y, 2 * x) + a->value.at(ch, 2 * y, 2 * x + 1) +
                       a->value.at(ch, 2 * y + 1, 2 * x) + a->value.at(ch, 2 * y + 1, 2 * x + 1));
  return make_node<T>(std::move(out), {a}, [a](Node<T>& n) {
    a->ensure_grad();
    int c = n.value.size(0), ho = n.value.size(1), wo = n.value.size(2);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
          T g = T(0.25) * n.grad.at(ch, y, x);
          a->grad.at(ch, 2 * y, 2 * x) += g;
          a->grad.at(ch, 2 * y, 2 * x + 1) += g;
          a->grad.at(ch, 2 * y + 1, 2 * x) += g;
          a->grad.at(ch, 2 * y + 1, 2 * x + 1) += g;
        }
  });
}

// ---------------------------------------------------------------------------
// convolution (im2col + GEMM); x: (Cin,H,W), w: (Cout,Cin,K,K), b: (Cout) or empty
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, Tensor<T>& cols,
            int ho, int wo) {
  int cin = x.size(0), h = x.size(1), w = x.size(2);
  // cols: (cin*k*k, ho*wo)
  T* cp = cols.data.data();
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int y = 0; y < ho; ++y) {
          int sy = y * stride + ky - pad;
          if (sy < 0 || sy >= h) {
            std::fill(cp, cp + wo, T(0));
            cp += wo;
            continue;
          }
          const T* row = &x.at(c, sy, 0);
          for (int xo = 0; xo < wo; ++xo) {
            int sx = xo * stride + kx - pad;
            cp[xo] = (sx >= 0 && sx < w) ? row[sx] : T(0);
          }
          cp += wo;
        }
      }
}

template <typename T>
void col2im(const Tensor<T>& cols, int k, int stride, int pad, Tensor<T>& x,
            int ho, int wo) {
  int cin = x.size(0), h = x.size(1), w = x.size(2);
  const T* cp = cols.data.data();
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int y = 0; y < ho; ++y) {
          int sy = y * stride + ky - pad;
          if (sy < 0 || sy >= h) {
            cp += wo;
            continue;
          }
          T* row = &x.at(c, sy, 0);
          for (int xo = 0; xo < wo; ++xo) {
            int sx = xo * stride + kx - pad;
            if (sx >= 0 && sx < w) row[sx] += cp[xo];
          }
          cp += wo;
        }
      }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  int cin = x->value.size(0), h = x->value.size(1), wi = x->value.size(2);
  int cout = w->value.size(0), k = w->value.size(2);
  require(w->value.size(1) == cin, "conv2d: channel mismatch");
  int ho = (h + 2 * pad - k) / stride + 1;
  int wo = (wi + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: output dims empty");
  int kk = cin * k * k, n = ho * wo;
  Tensor<T> cols({kk, n});
  detail::im2col(x->value, k, stride, pad, cols, ho, wo);
  Tensor<T> out({cout, ho, wo});
  gemm(false, false, cout, n, kk, T(1), w->value.data.data(), kk,
       cols.data.data(), n, T(0), out.data.data(), n);
  if (b && b->value.numel() > 0) {
    for (int c = 0; c < cout; ++c) {
      T bv = b->value[size_t(c)];
      T* p = &out.at(c, 0, 0);
      for (int i = 0; i < n; ++i) p[i] += bv;
    }
  }
  std::vector<Var<T>> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node<T>(std::move(out), std::move(parents),
                      [x, w, b, stride, pad, k, ho, wo](Node<T>& node) {
    int cin = x->value.size(0), cout = w->value.size(0);
    int kk = cin * k * k, n = ho * wo;
    // recompute cols (memory over speed)
    Tensor<T> cols({kk, n});
    detail::im2col(x->value, k, stride, pad, cols, ho, wo);
    if (w->requires_grad) {
      w->ensure_grad();
      gemm(false, true, cout, kk, n, T(1), node.grad.data.data(), n,
           cols.data.data(), n, T(1), w->grad.data.data(), kk);
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (int c = 0; c < cout; ++c) {
        T acc = 0;
        const T* p = &node.grad.at(c, 0, 0);
        for (int i = 0; i < n; ++i) acc += p[i];
        b->grad[size_t(c)] += acc;
      }
    }
    if (x->requires_grad) {
      Tensor<T> dcols({kk, n});
      gemm(true, false, kk, n, cout, T(1), w->value.data.data(), kk,
           node.grad.data.data(), n, T(0), dcols.data.data(), n);
      x->ensure_grad();
      detail::col2im(dcols, k, stride, pad, x->grad, ho, wo);
    }
  });
}

// transpose convolution; x: (Cin,H,W), w: (Cin,Cout,K,K), output dims
// Hout = (H-1)*stride - 2*pad + K
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                        int stride, int pad) {
  int cin = x->value.size(0), h = x->value.size(1), wi = x->value.size(2);
  require(w->value.size(0) == cin, "conv_transpose2d: channel mismatch");
  int cout = w->value.size(1), k = w->value.size(2);
  int ho = (h - 1) * stride - 2 * pad + k;
  int wo = (wi - 1) * stride - 2 * pad + k;
  int kk = cout * k * k, n = h * wi;
  // cols = W^T (Cin x kk)^T * X (Cin x n)
  Tensor<T> cols({kk, n});
  gemm(true, false, kk, n, cin, T(1), w->value.data.data(), kk,
       x->value.data.data(), n, T(0), cols.data.data(), n);
  Tensor<T> out({cout, ho, wo});
  detail::col2im(cols, k, stride, pad, out, h, wi);
  if (b && b->value.numel() > 0) {
    for (int c = 0; c < cout; ++c) {
      T bv = b->value[size_t(c)];
      T* p = &out.at(c, 0, 0);
      for (int i = 0; i < ho * wo; ++i) p[i] += bv;
    }
  }
  std::vector<Var<T>> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node<T>(std::move(out), std::move(parents),
                      [x, w, b, stride, pad, k, h, wi](Node<T>& node) {
    int cin = x->value.size(0), cout = w->value.size(1);
    int kk = cout * k * k, n = h * wi;
    Tensor<T> dcols({kk, n});
    detail::im2col(node.grad, k, stride, pad, dcols, h, wi);
    if (x->requires_grad) {
      x->ensure_grad();
      gemm(false, false, cin, n, kk, T(1), w->value.data.data(), kk,
           dcols.data.data(), n, T(1), x->grad.data.data(), n);
    }
    if (w->requires_grad) {
      w->ensure_grad();
      gemm(false, true, cin, kk, n, T(1), x->value.data.data(), n,
           dcols.data.data(), n, T(1), w->grad.data.data(), kk);
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      int m = node.grad.size(1) * node.grad.size(2);
      for (int c = 0; c < cout; ++c) {
        T acc = 0;
        const T* p = &node.grad.at(c, 0, 0);
        for (int i = 0; i < m; ++i) acc += p[i];
        b->grad[size_t(c)] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// backward bilinear warping: out(p) = src(p + f(p)), zero fill out of bounds
// ---------------------------------------------------------------------------

namespace detail {

// shared forward kernel, also usable without the tape
template <typename T>
Tensor<T> warp_kernel(const Tensor<T>& src, const Tensor<T>& flow) {
  int c = src.size(0), h = src.size(1), w = src.size(2);
  Tensor<T> out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T sx = T(x) + flow.at(0, y, x);
      T sy = T(y) + flow.at(1, y, x);
      int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      T wx = sx - T(x0), wy = sy - T(y0);
      const T w00 = (T(1) - wx) * (T(1) - wy), w01 = wx * (T(1) - wy);
      const T w10 = (T(1) - wx) * wy, w11 = wx * wy;
      bool i00 = x0 >= 0 && x0 < w && y0 >= 0 && y0 < h;
      bool i01 = x0 + 1 >= 0 && x0 + 1 < w && y0 >= 0 && y0 < h;
      bool i10 = x0 >= 0 && x0 < w && y0 + 1 >= 0 && y0 + 1 < h;
      bool i11 = x0 + 1 >= 0 && x0 + 1 < w && y0 + 1 >= 0 && y0 + 1 < h;
      for (int ch = 0; ch < c; ++ch) {
        T v = 0;
        if (i00) v += w00 * src.at(ch, y0, x0);
        if (i01) v += w01 * src.at(ch, y0, x0 + 1);
        if (i10) v += w10 * src.at(ch, y0 + 1, x0);
        if (i11) v += w11 * src.at(ch, y0 + 1, x0 + 1);
        out.at(ch, y, x) = v;
      }
    }
  return out;
}

}  // namespace detail

// src: (C,H,W), flow: (2,H,W) with channels (u,v); differentiable in both.
template <typename T>
Var<T> bilinear_warp_op(const Var<T>& src, const Var<T>& flow) {
  require(src->value.rank() == 3 && flow->value.rank() == 3 &&
              flow->value.size(0) == 2,
          "bilinear_warp: src must be CHW, flow 2HW");
  require(src->value.size(1) == flow->value.size(1) &&
              src->value.size(2) == flow->value.size(2),
          "bilinear_warp: spatial dims mismatch between src " +
              Tensor<T>::shape_str(src->value.shape) + " and flow " +
              Tensor<T>::shape_str(flow->value.shape));
  Tensor<T> out = detail::warp_kernel(src->value, flow->value);
  return make_node<T>(std::move(out), {src, flow}, [src, flow](Node<T>& n) {
    int c = src->value.size(0), h = src->value.size(1), w = src->value.size(2);
    bool gs = src->requires_grad, gf = flow->requires_grad;
    if (gs) src->ensure_grad();
    if (gf) flow->ensure_grad();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T sx = T(x) + flow->value.at(0, y, x);
        T sy = T(y) + flow->value.at(1, y, x);
        int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
        T wx = sx - T(x0), wy = sy - T(y0);
        bool i00 = x0 >= 0 && x0 < w && y0 >= 0 && y0 < h;
        bool i01 = x0 + 1 >= 0 && x0 + 1 < w && y0 >= 0 && y0 < h;
        bool i10 = x0 >= 0 && x0 < w && y0 + 1 >= 0 && y0 + 1 < h;
        bool i11 = x0 + 1 >= 0 && x0 + 1 < w && y0 + 1 >= 0 && y0 + 1 < h;
        T du = 0, dv = 0;
        for (int ch = 0; ch < c; ++ch) {
          T g = n.grad.at(ch, y, x);
          if (g == T(0)) continue;
          T v00 = i00 ? src->value.at(ch, y0, x0) : T(0);
          T v01 = i01 ? src->value.at(ch, y0, x0 + 1) : T(0);
          T v10 = i10 ? src->value.at(ch, y0 + 1, x0) : T(0);
          T v11 = i11 ? src->value.at(ch, y0 + 1, x0 + 1) : T(0);
          if (gs) {
            if (i00) src->grad.at(ch, y0, x0) += g * (T(1) - wx) * (T(1) - wy);
            if (i01) src->grad.at(ch, y0, x0 + 1) += g * wx * (T(1) - wy);
            if (i10) src->grad.at(ch, y0 + 1, x0) += g * (T(1) - wx) * wy;
            if (i11) src->grad.at(ch, y0 + 1, x0 + 1) += g * wx * wy;
          }
          if (gf) {
            du += g * ((T(1) - wy) * (v01 - v00) + wy * (v11 - v10));
            dv += g * ((T(1) - wx) * (v10 - v00) + wx * (v11 - v01));
          }
        }
        if (gf) {
          flow->grad.at(0, y, x) += du;
          flow->grad.at(1, y, x) += dv;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// cost-volume correlation: out(d, p) = mean_c ref(c,p) * wrp(c, p+d),
// zero-padded outside; d spans a (2r+1)^2 window, row-major in (dy, dx).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> correlation(const Var<T>& ref, const Var<T>& wrp, int radius) {
  require(ref->value.same_shape(wrp->value), "correlation: shape mismatch");
  require(radius >= 1, "correlation: radius must be >= 1");
  int c = ref->value.size(0), h = ref->value.size(1), w = ref->value.size(2);
  int side = 2 * radius + 1;
  Tensor<T> out({side * side, h, w});
  T inv_c = T(1) / T(c);
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      int d = (dy + radius) * side + (dx + radius);
      for (int y = 0; y < h; ++y) {
        int sy = y + dy;
        if (sy < 0 || sy >= h) continue;  // stays zero
        for (int x = 0; x < w; ++x) {
          int sx = x + dx;
          if (sx < 0 || sx >= w) continue;
          T acc = 0;
          for (int ch = 0; ch < c; ++ch)
            acc += ref->value.at(ch, y, x) * wrp->value.at(ch, sy, sx);
          out.at(d, y, x) = acc * inv_c;
        }
      }
    }
  return make_node<T>(std::move(out), {ref, wrp}, [ref, wrp, radius](Node<T>& n) {
    int c = ref->value.size(0), h = ref->value.size(1), w = ref->value.size(2);
    int side = 2 * radius + 1;
    T inv_c = T(1) / T(c);
    bool gr = ref->requires_grad, gw = wrp->requires_grad;
    if (gr) ref->ensure_grad();
    if (gw) wrp->ensure_grad();
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        int d = (dy + radius) * side + (dx + radius);
        for (int y = 0; y < h; ++y) {
          int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            int sx = x + dx;
            if (sx < 0 || sx >= w) continue;
            T g = n.grad.at(d, y, x) * inv_c;
            if (g == T(0)) continue;
            for (int ch = 0; ch < c; ++ch) {
              if (gr) ref->grad.at(ch, y, x) += g * wrp->value.at(ch, sy, sx);
              if (gw) wrp->grad.at(ch, sy, sx) += g * ref->value.at(ch, y, x);
            }
          }
        }
      }
  });
}

// Per-pixel L2 normalization across channels: y(c,p) = x(c,p) / n(p) with
// n(p) = sqrt(sum_c x(c,p)^2 + eps). Feeding correlation with normalized
// features makes the cost volume a (near-)cosine similarity, so
// self-correlation peaks at zero displacement.
template <typename T>
Var<T> pixel_l2_normalize(const Var<T>& x, T eps = T(1e-12)) {
  int c = x->value.size(0), h = x->value.size(1), w = x->value.size(2);
  Tensor<T> out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      T sq = eps;
      for (int ch = 0; ch < c; ++ch) {
        T v = x->value.at(ch, y, xx);
        sq += v * v;
      }
      T inv = T(1) / std::sqrt(sq);
      for (int ch = 0; ch < c; ++ch) out.at(ch, y, xx) = x->value.at(ch, y, xx) * inv;
    }
  return make_node<T>(std::move(out), {x}, [x, eps](Node<T>& n) {
    int c = x->value.size(0), h = x->value.size(1), w = x->value.size(2);
    x->ensure_grad();
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T sq = eps;
        for (int ch = 0; ch < c; ++ch) {
          T v = x->value.at(ch, y, xx);
          sq += v * v;
        }
        T inv = T(1) / std::sqrt(sq);
        T dot = 0;  // sum_c g(c) * x(c)
        for (int ch = 0; ch < c; ++ch)
          dot += n.grad.at(ch, y, xx) * x->value.at(ch, y, xx);
        T k = dot * inv * inv * inv;
        for (int ch = 0; ch < c; ++ch)
          x->grad.at(ch, y, xx) += n.grad.at(ch, y, xx) * inv -
                                   x->value.at(ch, y, xx) * k;
      }
  });
}

// Spectrum-agnostic structure map: channel mean, 4 passes of 3x3 binomial
// smoothing, then Sobel edge energy. Gray conversion and blurring are linear,
// and the gradient magnitude of 1-x equals that of x, so the output survives
// intensity inversion, channel mixing, and mild blur between bands while
// staying sharply sensitive to misalignment. Returns a {1, h, w} tensor.
template <typename T>
Var<T> structure_map(const Var<T>& img) {
  int c = img->value.size(0);
  Var<T> g = img;
  if (c > 1) {
    Tensor<T> mw({1, c, 1, 1});
    mw.fill(T(1) / T(c));
    g = conv2d(img, make_const(std::move(mw)), Var<T>(), 1, 0);
  }
  Tensor<T> k({1, 1, 3, 3});
  const T kv[3] = {T(0.25), T(0.5), T(0.25)};
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) k.data[size_t(y * 3 + x)] = kv[y] * kv[x];
  Var<T> kw = make_const(std::move(k));
  for (int i = 0; i < 4; ++i)
    g = conv2d(replicate_pad(g, 1, 1, 1, 1), kw, Var<T>(), 1, 0);
  int h = g->value.size(1), w = g->value.size(2);
  return reshape(sobel_energy(g), {1, h, w});
}

// ---------------------------------------------------------------------------
// per-pixel Huber penalty on flow magnitude above a cap m:
//   x = max(0, |f| - m),  out = x^2/2 if x < 1 else x - 1/2
// fused so the zero branch has an exact zero gradient.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> flow_excess_huber(const Var<T>& flow, T m) {
  require(flow->value.rank() == 3 && flow->value.size(0) == 2,
          "flow_excess_huber: flow must be 2HW");
  require(m > T(0), "flow_excess_huber: m must be positive");
  int h = flow->value.size(1), w = flow->value.size(2);
  Tensor<T> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T u = flow->value.at(0, y, x), v = flow->value.at(1, y, x);
      T mag = std::sqrt(u * u + v * v);
      T e = mag - m;
      if (e <= T(0)) continue;
      out.at(y, x) = e < T(1) ? e * e / T(2) : e - T(0.5);
    }
  return make_node<T>(std::move(out), {flow}, [flow, m](Node<T>& n) {
    flow->ensure_grad();
    int h = flow->value.size(1), w = flow->value.size(2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T u = flow->value.at(0, y, x), v = flow->value.at(1, y, x);
        T mag = std::sqrt(u * u + v * v);
        T e = mag - m;
        if (e <= T(0)) continue;
        T dpen = e < T(1) ? e : T(1);  // d out / d mag
        T g = n.grad.at(y, x) * dpen / mag;  // mag > m > 0 here
        flow->grad.at(0, y, x) += g * u;
        flow->grad.at(1, y, x) += g * v;
      }
  });
}

// ---------------------------------------------------------------------------
// Sobel gradient magnitude (channel-averaged), replicate borders. Unnormalized;
// callers divide by the (differentiable) per-input max.
// ---------------------------------------------------------------------------

namespace detail {

// raw 3x3 Sobel responses at one pixel, replicate borders
template <typename T>
inline std::pair<T, T> sobel_response(const Tensor<T>& t, int ch, int y, int xx) {
  int h = t.size(1), w = t.size(2);
  auto v = [&](int yy, int xc) {
    return t.at(ch, std::clamp(yy, 0, h - 1), std::clamp(xc, 0, w - 1));
  };
  T gx = v(y - 1, xx + 1) + T(2) * v(y, xx + 1) + v(y + 1, xx + 1) -
         v(y - 1, xx - 1) - T(2) * v(y, xx - 1) - v(y + 1, xx - 1);
  T gy = v(y + 1, xx - 1) + T(2) * v(y + 1, xx) + v(y + 1, xx + 1) -
         v(y - 1, xx - 1) - T(2) * v(y - 1, xx) - v(y - 1, xx + 1);
  return {gx, gy};
}

}  // namespace detail

template <typename T>
Var<T> sobel_energy(const Var<T>& x) {
  require(x->value.rank() == 3, "sobel_energy: input must be CHW");
  int c = x->value.size(0), h = x->value.size(1), w = x->value.size(2);
  const T eps = T(1e-12);
  Tensor<T> out({h, w});
  T inv_c = T(1) / T(c);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      T acc = 0;
      // the eps floor is subtracted back out so constant inputs map to an
      // exact zero response while the kink at zero stays smoothed
      for (int ch = 0; ch < c; ++ch) {
        auto [gx, gy] = detail::sobel_response(x->value, ch, y, xx);
        acc += std::sqrt(gx * gx + gy * gy + eps) - std::sqrt(eps);
      }
      out.at(y, xx) = acc * inv_c;
    }
  return make_node<T>(std::move(out), {x}, [x, inv_c, eps](Node<T>& n) {
    x->ensure_grad();
    int c = x->value.size(0), h = x->value.size(1), w = x->value.size(2);
    const int sx_k[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    const int sy_k[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T g = n.grad.at(y, xx);
        if (g == T(0)) continue;
        for (int ch = 0; ch < c; ++ch) {
          auto [gx, gy] = detail::sobel_response(x->value, ch, y, xx);
          T mag = std::sqrt(gx * gx + gy * gy + eps);
          T cx = g * inv_c * gx / mag;
          T cy = g * inv_c * gy / mag;
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              int yy = std::clamp(y + ky, 0, h - 1);
              int xc = std::clamp(xx + kx, 0, w - 1);
              x->grad.at(ch, yy, xc) +=
                  cx * T(sx_k[ky + 1][kx + 1]) + cy * T(sy_k[ky + 1][kx + 1]);
            }
        }
      }
  });
}

}  // namespace cspec
