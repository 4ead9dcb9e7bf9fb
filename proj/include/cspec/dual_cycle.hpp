#pragma once

#include <string>

#include "cspec/flow_module.hpp"
#include "cspec/image.hpp"
#include "cspec/warp.hpp"

namespace cspec {

// A warped image inside the cycle graph: differentiable data plus the
// propagated (non-differentiable) validity mask and the source spectrum.
template <typename T>
struct WarpedImage {
  Var<T> data;
  Tensor<T> valid;
  std::string spectrum;
};

// All four flow fields and four warped images of one full forward pass.
template <typename T>
struct CycleOutputs {
  Var<T> f_ab;   // ^A f_B : warps I_A toward I_B
  Var<T> f_ba;   // ^B f_A
  Var<T> f_aba;  // ^AB f_A : undoes f_ab
  Var<T> f_bab;  // ^BA f_B
  WarpedImage<T> w_ab;   // ^A I_B : I_A's spectrum, aligned to I_B
  WarpedImage<T> w_ba;   // ^B I_A
  WarpedImage<T> w_aba;  // ^AB I_A : should reconstruct I_A
  WarpedImage<T> w_bab;  // ^BA I_B
};

// Full dual forward pass:
//   f_AB = sigma_B(I_A, I_B);  w_AB = I_A (x) f_AB   (and mirrored)
//   f_ABA = sigma_A(w_AB, w_BA); w_ABA = w_AB (x) f_ABA (and mirrored)
// Every sigma invocation encodes each input with the encoder selected by that
// input's spectrum tag. Validity masks propagate through both warps.
template <typename T>
CycleOutputs<T> forward_cycle(const ImageTensor<T>& img_a,
                              const ImageTensor<T>& img_b,
                              const SigmaModel<T>& model) {
  require(img_a.height() == img_b.height() && img_a.width() == img_b.width(),
          "forward_cycle: image dims mismatch");
  require(img_a.spectrum != img_b.spectrum,
          "forward_cycle: inputs must carry distinct spectrum tags");
  model.select_encoder(img_a.spectrum);
  model.select_encoder(img_b.spectrum);

  Var<T> ia = make_const(img_a.data);
  Var<T> ib = make_const(img_b.data);

  CycleOutputs<T> out;
  out.f_ab = model.sigma_forward_var(img_a.spectrum, ia, img_b.spectrum, ib);
  out.f_ba = model.sigma_forward_var(img_b.spectrum, ib, img_a.spectrum, ia);

  out.w_ab = {bilinear_warp_op(ia, out.f_ab),
              warp_valid_mask(img_a.valid, out.f_ab->value), img_a.spectrum};
  out.w_ba = {bilinear_warp_op(ib, out.f_ba),
              warp_valid_mask(img_b.valid, out.f_ba->value), img_b.spectrum};

  out.f_aba = model.sigma_forward_var(out.w_ab.spectrum, out.w_ab.data,
                                      out.w_ba.spectrum, out.w_ba.data);
  out.f_bab = model.sigma_forward_var(out.w_ba.spectrum, out.w_ba.data,
                                      out.w_ab.spectrum, out.w_ab.data);

  out.w_aba = {bilinear_warp_op(out.w_ab.data, out.f_aba),
               warp_valid_mask(out.w_ab.valid, out.f_aba->value), out.w_ab.spectrum};
  out.w_bab = {bilinear_warp_op(out.w_ba.data, out.f_bab),
               warp_valid_mask(out.w_ba.valid, out.f_bab->value), out.w_ba.spectrum};
  return out;
}

}  // namespace cspec
