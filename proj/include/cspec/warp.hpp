#pragma once

#include "cspec/image.hpp"
#include "cspec/ops.hpp"

namespace cspec {

// Warps the soft validity mask through the same interpolation as the image
// (out-of-bounds support contributes zero), then hard-zeros every output
// pixel whose interpolation support touches an invalid or out-of-bounds
// pixel with nonzero weight. The hard step makes loss masking exact: a pixel
// that survives carries no dependence whatsoever on invalid input data.
template <typename T>
Tensor<T> warp_valid_mask(const Tensor<T>& valid, const Tensor<T>& flow) {
  Tensor<T> as_image({1, valid.size(0), valid.size(1)});
  as_image.data = valid.data;
  Tensor<T> warped = detail::warp_kernel(as_image, flow);
  int h = valid.size(0), w = valid.size(1);
  Tensor<T> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T sx = T(x) + flow.at(0, y, x);
      T sy = T(y) + flow.at(1, y, x);
      int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      T wx = sx - T(x0), wy = sy - T(y0);
      bool clean = true;
      for (int cy = 0; cy <= 1 && clean; ++cy)
        for (int cx = 0; cx <= 1 && clean; ++cx) {
          T weight = (cx ? wx : T(1) - wx) * (cy ? wy : T(1) - wy);
          if (weight == T(0)) continue;
          int xx = x0 + cx, yy = y0 + cy;
          if (xx < 0 || xx >= w || yy < 0 || yy >= h || valid.at(yy, xx) < T(1))
            clean = false;
        }
      out.at(y, x) = clean ? warped.at(0, y, x) : T(0);
    }
  return out;
}

// The paper's warping operator applied to an image: out(p) = src(p + f(p)).
// Spectrum is preserved; validity propagates through the same sampler.
template <typename T>
ImageTensor<T> bilinear_warp(const ImageTensor<T>& src, const FlowField<T>& flow) {
  require(src.height() == flow.height() && src.width() == flow.width(),
          "bilinear_warp: src " + Tensor<T>::shape_str(src.data.shape) +
              " and flow " + Tensor<T>::shape_str(flow.data.shape) +
              " spatial dims mismatch");
  ImageTensor<T> out;
  out.data = detail::warp_kernel(src.data, flow.data);
  out.spectrum = src.spectrum;
  out.valid = warp_valid_mask(src.valid, flow.data);
  return out;
}

// Warps a flow field `inner` by `by`, treating `inner` as a 2-channel image.
template <typename T>
FlowField<T> warp_flow(const FlowField<T>& inner, const FlowField<T>& by) {
  require(inner.height() == by.height() && inner.width() == by.width(),
          "warp_flow: spatial dims mismatch");
  return FlowField<T>(detail::warp_kernel(inner.data, by.data));
}

// Autodiff variant of warp_flow on graph nodes (2HW each).
template <typename T>
Var<T> warp_flow_op(const Var<T>& inner, const Var<T>& by) {
  return bilinear_warp_op(inner, by);
}

}  // namespace cspec
