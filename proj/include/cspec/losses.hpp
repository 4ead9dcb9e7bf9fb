#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "cspec/dual_cycle.hpp"
#include "cspec/image.hpp"
#include "cspec/ops.hpp"
#include "cspec/paramio.hpp"
#include "cspec/rng.hpp"

namespace cspec {

// ---------------------------------------------------------------------------
// weights of the combined loss, plus the disparity cap m for regularization
// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha = 3.4e-1;    // cycle-consistency
  double beta = 3.6e-4;     // bidirectional flow-field
  double gamma = 6.7e-1;    // feature
  double delta = 6.9e-2;    // regularization
  double epsilon = 2.7e-1;  // smoothing
  double m = 12.8;          // max expected disparity in pixels (10% of width)
};

template <typename T>
struct LossBreakdown {
  T l_c = 0, l_b = 0, l_f = 0, l_r = 0, l_s = 0, total = 0;
  Var<T> total_var;  // graph root for backprop
};

// ---------------------------------------------------------------------------
// mask helpers. Loss weighting uses hard masks: a pixel counts only if its
// whole interpolation support was valid, so mutating invalid input pixels
// cannot leak into any loss.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> binarize_mask(const Tensor<T>& m, T thresh = T(0.999)) {
  Tensor<T> out = m;
  for (auto& v : out.data) v = v >= thresh ? T(1) : T(0);
  return out;
}

template <typename T>
Tensor<T> mask_and(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "mask_and: shape mismatch");
  Tensor<T> out = a;
  for (size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

// 3x3 min erosion; out-of-image neighborhood treated as valid
template <typename T>
Tensor<T> erode3(const Tensor<T>& m) {
  int h = m.size(0), w = m.size(1);
  Tensor<T> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T mn = T(1);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          mn = std::min(mn, m.at(yy, xx));
        }
      out.at(y, x) = mn;
    }
  return out;
}

// mean over valid pixels, per element: sum(x * mask) / (C * sum(mask))
template <typename T>
Var<T> masked_mean_per_elem(const Var<T>& x, const Tensor<T>& mask) {
  T denom = mask.sum();
  if (denom <= T(0)) return make_const(Tensor<T>({1}));
  int c = x->value.rank() == 3 ? x->value.size(0) : 1;
  return mul_scalar(vsum(mul_const(x, mask)), T(1) / (T(c) * denom));
}

// mean over valid pixels of the per-pixel channel sum: sum(x*mask)/sum(mask)
template <typename T>
Var<T> masked_mean_chsum(const Var<T>& x, const Tensor<T>& mask) {
  T denom = mask.sum();
  if (denom <= T(0)) return make_const(Tensor<T>({1}));
  return mul_scalar(vsum(mul_const(x, mask)), T(1) / denom);
}

// ---------------------------------------------------------------------------
// pretrained perceptual feature extractor.
//
// VGG-style topology with three blocks and taps named after the layers the
// perceptual-loss literature uses (relu1_2 / relu2_2 / relu3_3). Convolutions
// carry no bias and the nonlinearity is a smooth |x|, which makes features
// invariant to intensity inversion around mid-gray: exactly the photometric
// breakage thermal-like spectra introduce. Weights are frozen; by default they
// are generated deterministically from the seed, and they can be cached or
// replaced via the CYCLESPECTRAL_CACHE directory.
// ---------------------------------------------------------------------------

struct FeatureExtractorConfig {
  std::array<int, 3> widths = {16, 32, 64};
  uint64_t seed = 77;
  double input_mean = 0.5;
  double input_std = 0.25;

  nlohmann::json to_json() const {
    return {{"widths", widths}, {"seed", seed}, {"input_mean", input_mean},
            {"input_std", input_std}};
  }
  std::string cache_key() const {
    return "phi_" +
           std::to_string(mix64(seed, hash_str(to_json().dump() + "|edge-v2"))) +
           ".bin";
  }
};

template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor() : FeatureExtractor(FeatureExtractorConfig{}) {}

  explicit FeatureExtractor(const FeatureExtractorConfig& cfg) : cfg_(cfg) {
    auto shapes = layer_shapes(cfg);
    bool loaded = false;
    if (const char* cache = std::getenv("CYCLESPECTRAL_CACHE")) {
      std::string path = std::string(cache) + "/" + cfg.cache_key();
      if (std::filesystem::exists(path)) {
        NamedTensors<T> nt = read_param_file<T>(path, nullptr);
        for (auto& [name, t] : nt.items) weights_.push_back(make_const(std::move(t)));
        loaded = weights_.size() == shapes.size();
      }
      if (!loaded) {
        init_weights(shapes);
        NamedTensors<T> nt;
        for (size_t i = 0; i < weights_.size(); ++i)
          nt.items.push_back({"conv" + std::to_string(i), weights_[i]->value});
        std::filesystem::create_directories(cache);
        write_param_file<T>(path, cfg.to_json(), nt);
        loaded = true;
      }
    }
    if (!loaded) init_weights(shapes);
  }

  // taps: relu1_2 (full res), relu2_2 (1/2), relu3_3 (1/4).
  // Tap outputs are L2-normalized per pixel so the downstream MSE compares
  // feature directions only. Without this, fractional warps can cut the loss
  // by blurring edge amplitude toward the target instead of aligning. The
  // sqrt(C) scale keeps the per-pixel squared distance O(1) per channel.
  Var<T> forward(const Var<T>& img, const std::string& tap) const {
    Var<T> x = structure(img);
    const T eps = T(1e-6);
    x = vabs_smooth(conv2d(x, weights_[0], Var<T>(), 1, 1), eps);
    x = vabs_smooth(conv2d(x, weights_[1], Var<T>(), 1, 1), eps);
    if (tap == "relu1_2") return tap_out(x, eps);
    x = pool(x);
    x = vabs_smooth(conv2d(x, weights_[2], Var<T>(), 1, 1), eps);
    x = vabs_smooth(conv2d(x, weights_[3], Var<T>(), 1, 1), eps);
    if (tap == "relu2_2") return tap_out(x, eps);
    x = pool(x);
    x = vabs_smooth(conv2d(x, weights_[4], Var<T>(), 1, 1), eps);
    x = vabs_smooth(conv2d(x, weights_[5], Var<T>(), 1, 1), eps);
    x = vabs_smooth(conv2d(x, weights_[6], Var<T>(), 1, 1), eps);
    if (tap == "relu3_3") return tap_out(x, eps);
    throw ConfigError("unknown feature tap '" + tap + "'");
  }

  const std::vector<Var<T>>& parameters() const { return weights_; }
  const FeatureExtractorConfig& config() const { return cfg_; }

 private:
  static Var<T> tap_out(const Var<T>& x, T eps) {
    T scale = std::sqrt(T(x->value.size(0)));
    return mul_scalar(pixel_l2_normalize(x, eps), scale);
  }

  static std::vector<std::vector<int>> layer_shapes(const FeatureExtractorConfig& c) {
    int w1 = c.widths[0], w2 = c.widths[1], w3 = c.widths[2];
    return {{w1, 3, 3, 3},  {w1, w1, 3, 3}, {w2, w1, 3, 3}, {w2, w2, 3, 3},
            {w3, w2, 3, 3}, {w3, w3, 3, 3}, {w3, w3, 3, 3}};
  }

  void init_weights(const std::vector<std::vector<int>>& shapes) {
    for (size_t i = 0; i < shapes.size(); ++i) {
      Rng rng(mix64(cfg_.seed, i + 1));
      Tensor<T> t(shapes[i]);
      int fan_in = shapes[i][1] * shapes[i][2] * shapes[i][3];
      double scale = std::sqrt(2.0 / double(fan_in));
      for (auto& v : t.data) v = T(rng.normal() * scale);
      weights_.push_back(make_const(std::move(t)));
    }
  }

  // Spectrum-agnostic front end: channel mean, binomial smoothing, then edge
  // energy. Gray conversion and blurring are linear, and the Sobel magnitude
  // of 1-x equals that of x, so the representation survives the photometric
  // breakage between bands (intensity inversion, channel mixing, mild blur)
  // while staying sharply sensitive to misalignment.
  Var<T> structure(const Var<T>& img) const {
    int c = img->value.size(0);
    require(c == 1 || c == 3, "feature extractor: expected 1 or 3 channels");
    Var<T> e = mul_scalar(structure_map(img), T(1.0 / cfg_.input_std));
    return concat_channels<T>({e, e, e});
  }

  static Var<T> pool(const Var<T>& x) {
    int h = x->value.size(1), w = x->value.size(2);
    return avg_pool2(replicate_pad(x, 0, h % 2, 0, w % 2));
  }

  FeatureExtractorConfig cfg_;
  std::vector<Var<T>> weights_;
};

// ---------------------------------------------------------------------------
// the five loss terms
// ---------------------------------------------------------------------------

// mean squared intensity difference over valid pixels (same spectrum only)
template <typename T>
Var<T> cycle_loss(const Var<T>& reconstructed, const std::string& recon_spectrum,
                  const ImageTensor<T>& original, const Tensor<T>& mask) {
  require(recon_spectrum == original.spectrum,
          "cycle_loss: spectrum mismatch (" + recon_spectrum + " vs " +
              original.spectrum + ")");
  require(reconstructed->value.same_shape(original.data),
          "cycle_loss: dims mismatch");
  Var<T> d = sub(reconstructed, make_const(original.data));
  return masked_mean_per_elem(vsquare(d), mask);
}

template <typename T>
T cycle_loss(const ImageTensor<T>& reconstructed, const ImageTensor<T>& original,
             const Tensor<T>& mask) {
  return cycle_loss(make_const(reconstructed.data), reconstructed.spectrum,
                    original, mask)->value[0];
}

// mean over valid pixels of |f_fwd + (f_bwd warped by f_fwd)|, L1 over (u,v)
template <typename T>
Var<T> bidirectional_loss(const Var<T>& f_fwd, const Var<T>& f_bwd,
                          const Tensor<T>& mask) {
  require(f_fwd->value.same_shape(f_bwd->value), "bidirectional_loss: dims mismatch");
  Var<T> s = add(f_fwd, warp_flow_op(f_bwd, f_fwd));
  return masked_mean_chsum(vabs(s), mask);
}

template <typename T>
T bidirectional_loss(const FlowField<T>& f_fwd, const FlowField<T>& f_bwd,
                     const Tensor<T>& mask) {
  return bidirectional_loss(make_const(f_fwd.data), make_const(f_bwd.data), mask)
      ->value[0];
}

// perceptual loss: (1/CHW) || phi(warped) - phi(target) ||^2 at the tap layer
template <typename T>
Var<T> feature_loss(const Var<T>& warped, const ImageTensor<T>& target,
                    const FeatureExtractor<T>& phi, const std::string& tap) {
  require(warped->value.size(1) == target.height() &&
              warped->value.size(2) == target.width(),
          "feature_loss: dims mismatch");
  Var<T> fw = phi.forward(warped, tap);
  Var<T> ft = phi.forward(make_const(target.data), tap);
  return vmean(vsquare(sub(fw, ft)));
}

template <typename T>
T feature_loss(const ImageTensor<T>& warped, const ImageTensor<T>& target,
               const FeatureExtractor<T>& phi, const std::string& tap) {
  return feature_loss(make_const(warped.data), target, phi, tap)->value[0];
}

// Huber on per-pixel flow magnitude above the disparity cap m, mean over pixels
template <typename T>
Var<T> regularization_loss(const Var<T>& flow, T m) {
  return vmean(flow_excess_huber(flow, m));
}

template <typename T>
T regularization_loss(const FlowField<T>& flow, T m) {
  return regularization_loss(make_const(flow.data), m)->value[0];
}

// reference scalar form of the Eq-style Huber-on-excess, for tests
template <typename T>
T huber_of_excess(T mag, T m) {
  T x = std::max(T(0), mag - m);
  return x < T(1) ? x * x / T(2) : x - T(0.5);
}

// Sobel gradient magnitude, channel-averaged, normalized to [0,1] by the
// per-input maximum (eps-guarded). Optional mask restricts both the response
// and the normalizer to (eroded) valid pixels.
template <typename T>
Var<T> sobel_magnitude(const Var<T>& x, const Tensor<T>* mask = nullptr) {
  Var<T> e = sobel_energy(x);
  if (mask) e = mul_const(e, *mask);
  return div_by_scalar_node(e, clamp_min(vmax(e), T(1e-8)));
}

template <typename T>
Tensor<T> sobel_magnitude(const Tensor<T>& x) {
  return sobel_magnitude(make_const(x))->value;
}

// Mean of | |grad flow| * (1 - h(guide)) | over (eroded) valid pixels. The
// guide edge response is max-normalized to [0,1]; the flow gradient keeps
// physical units (pixels of flow change per pixel, hence the 1/8 Sobel gain
// factor) so the penalty grows with actual field roughness instead of
// punishing every nonzero field equally.
template <typename T>
Var<T> smoothing_loss(const Var<T>& flow, const Var<T>& guide,
                      const Tensor<T>* mask = nullptr) {
  require(flow->value.size(1) == guide->value.size(1) &&
              flow->value.size(2) == guide->value.size(2),
          "smoothing_loss: dims mismatch");
  Tensor<T> eroded;
  const Tensor<T>* mp = nullptr;
  if (mask) {
    eroded = erode3(binarize_mask(*mask));
    mp = &eroded;
  }
  Var<T> hf = mul_scalar(sobel_energy(flow), T(1) / T(8));
  if (mp) hf = mul_const(hf, *mp);
  Var<T> hg = sobel_magnitude(guide, mp);
  Var<T> p = vabs(mul(hf, add_scalar(mul_scalar(hg, T(-1)), T(1))));
  if (mp) return masked_mean_chsum(p, *mp);
  return vmean(p);
}

template <typename T>
T smoothing_loss(const FlowField<T>& flow, const ImageTensor<T>& guide) {
  return smoothing_loss(make_const(flow.data), make_const(guide.data))->value[0];
}

// ---------------------------------------------------------------------------
// combined loss (weighted sum of all components over one cycle)
// ---------------------------------------------------------------------------

template <typename T>
LossBreakdown<T> total_loss(const CycleOutputs<T>& o, const ImageTensor<T>& img_a,
                            const ImageTensor<T>& img_b, const LossWeights& weights,
                            const FeatureExtractor<T>& phi,
                            const std::string& feature_tap = "relu3_3") {
  // hard masks: first stage intersects each frame's own validity with the
  // warped-in validity; the second stage reuses them compounded by the
  // second warp.
  Tensor<T> va = binarize_mask(img_a.valid);
  Tensor<T> vb = binarize_mask(img_b.valid);
  Tensor<T> m_b1 = mask_and(binarize_mask(o.w_ab.valid), vb);  // frame B
  Tensor<T> m_a1 = mask_and(binarize_mask(o.w_ba.valid), va);  // frame A
  Tensor<T> m_a2 = mask_and(binarize_mask(o.w_aba.valid), va);
  Tensor<T> m_b2 = mask_and(binarize_mask(o.w_bab.valid), vb);

  Var<T> lc1 = cycle_loss(o.w_aba.data, o.w_aba.spectrum, img_a, m_a2);
  Var<T> lc2 = cycle_loss(o.w_bab.data, o.w_bab.spectrum, img_b, m_b2);

  Var<T> lb1 = bidirectional_loss(o.f_ab, o.f_ba, m_b1);
  Var<T> lb2 = bidirectional_loss(o.f_ba, o.f_ab, m_a1);
  Var<T> lb3 = bidirectional_loss(o.f_aba, o.f_bab, m_a1);
  Var<T> lb4 = bidirectional_loss(o.f_bab, o.f_aba, m_b1);

  Var<T> lf1 = feature_loss(o.w_ab.data, img_b, phi, feature_tap);
  Var<T> lf2 = feature_loss(o.w_ba.data, img_a, phi, feature_tap);

  Var<T> lr1 = regularization_loss(o.f_ab, T(weights.m));
  Var<T> lr2 = regularization_loss(o.f_ba, T(weights.m));

  Var<T> ls1 = smoothing_loss(o.f_ab, make_const(img_a.data), &va);
  Var<T> ls2 = smoothing_loss(o.f_ba, make_const(img_b.data), &vb);
  Var<T> ls3 = smoothing_loss(o.f_aba, o.w_ab.data, &m_b1);
  Var<T> ls4 = smoothing_loss(o.f_bab, o.w_ba.data, &m_a1);

  Var<T> l_c = add(lc1, lc2);
  Var<T> l_b = add(add(lb1, lb2), add(lb3, lb4));
  Var<T> l_f = add(lf1, lf2);
  Var<T> l_r = add(lr1, lr2);
  Var<T> l_s = add(add(ls1, ls2), add(ls3, ls4));

  LossBreakdown<T> out;
  out.l_c = l_c->value[0];
  out.l_b = l_b->value[0];
  out.l_f = l_f->value[0];
  out.l_r = l_r->value[0];
  out.l_s = l_s->value[0];
  out.total_var = add(
      add(add(mul_scalar(l_c, T(weights.alpha)), mul_scalar(l_b, T(weights.beta))),
          add(mul_scalar(l_f, T(weights.gamma)), mul_scalar(l_r, T(weights.delta)))),
      mul_scalar(l_s, T(weights.epsilon)));
  out.total = out.total_var->value[0];
  return out;
}

}  // namespace cspec
