#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cspec/image.hpp"
#include "cspec/ops.hpp"
#include "cspec/rng.hpp"
#include "cspec/warp.hpp"

namespace cspec {

inline constexpr int kPyramidLevels = 6;

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> uniform_init(std::vector<int> shape, uint64_t seed, T bound) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = T(rng.uniform(-double(bound), double(bound)));
  return t;
}

template <typename T>
struct Conv2d {
  std::string name;
  Var<T> w, b;
  int stride = 1, pad = 1;

  Conv2d() = default;
  // fan-in-scaled uniform init; `gain` shrinks flow heads toward zero output
  Conv2d(std::string n, int cin, int cout, int k, int stride_, int pad_,
         uint64_t seed, T gain = T(1))
      : name(std::move(n)), stride(stride_), pad(pad_) {
    T bound = gain * T(std::sqrt(6.0 / double(cin * k * k)));
    w = make_param(uniform_init<T>({cout, cin, k, k}, mix64(seed, hash_str(name + ".w")), bound));
    b = make_param(Tensor<T>({cout}));
  }

  Var<T> forward(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }

  void collect(std::vector<std::pair<std::string, Var<T>>>& out) const {
    out.push_back({name + ".w", w});
    out.push_back({name + ".b", b});
  }
};

// Learned strided transpose-convolution upsampler (x2 spatial). Initialized to
// bilinear interpolation weights per channel, then trained freely.
template <typename T>
struct ConvTranspose2d {
  std::string name;
  Var<T> w, b;
  int stride = 2, pad = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::string n, int channels, uint64_t seed)
      : name(std::move(n)) {
    const int k = 4;
    Tensor<T> wt({channels, channels, k, k});
    const T taps[4] = {T(0.25), T(0.75), T(0.75), T(0.25)};
    Rng rng(mix64(seed, hash_str(name + ".w")));
    for (int ci = 0; ci < channels; ++ci)
      for (int co = 0; co < channels; ++co)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            T base = (ci == co) ? taps[ky] * taps[kx] : T(0);
            wt.data[((size_t(ci) * channels + co) * k + ky) * k + kx] =
                base + T(rng.uniform(-0.01, 0.01));
          }
    w = make_param(std::move(wt));
    b = make_param(Tensor<T>({channels}));
  }

  Var<T> forward(const Var<T>& x) const {
    return conv_transpose2d(x, w, b, stride, pad);
  }

  void collect(std::vector<std::pair<std::string, Var<T>>>& out) const {
    out.push_back({name + ".w", w});
    out.push_back({name + ".b", b});
  }
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct SigmaConfig {
  // spectrum tag -> input channel count; exactly two entries
  std::vector<std::pair<std::string, int>> spectra;
  std::array<int, kPyramidLevels> enc_widths = {16, 32, 64, 96, 128, 196};
  std::vector<int> est_widths = {128, 128, 96, 64, 32};
  int radius = 4;
  int levels = kPyramidLevels;
  uint64_t seed = 1;

  int channels_for(const std::string& tag) const {
    for (const auto& [t, c] : spectra)
      if (t == tag) return c;
    throw ConfigError("unknown spectrum tag '" + tag + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (const auto& [t, c] : spectra) j["spectra"][t] = c;
    j["enc_widths"] = enc_widths;
    j["est_widths"] = est_widths;
    j["radius"] = radius;
    j["levels"] = levels;
    j["seed"] = seed;
    return j;
  }

  static SigmaConfig from_json(const nlohmann::json& j) {
    SigmaConfig c;
    c.spectra.clear();
    for (auto it = j.at("spectra").begin(); it != j.at("spectra").end(); ++it)
      c.spectra.push_back({it.key(), it.value().get<int>()});
    auto ew = j.at("enc_widths").get<std::vector<int>>();
    for (int i = 0; i < kPyramidLevels; ++i) c.enc_widths[size_t(i)] = ew.at(size_t(i));
    c.est_widths = j.at("est_widths").get<std::vector<int>>();
    c.radius = j.at("radius").get<int>();
    c.levels = j.at("levels").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
  }
};

// ---------------------------------------------------------------------------
// feature pyramid encoder (one per spectrum; parameters never shared)
// ---------------------------------------------------------------------------

template <typename T>
struct FeaturePyramid {
  std::vector<Var<T>> levels;  // fine-to-coarse: levels[0] is 1/2 resolution
};

template <typename T>
struct SpectrumEncoder {
  std::string spectrum;
  int in_channels = 0;
  // 6 levels x 3 convolution layers; the first conv of each level strides by 2
  std::vector<std::vector<Conv2d<T>>> blocks;

  SpectrumEncoder() = default;
  // Both encoders draw their initial weights from tag-independent seeds, so
  // they start as the same function of the shared structure-map input and the
  // cross-spectral cost volume is informative before any training. They stay
  // separate parameters and diverge freely from the first update.
  SpectrumEncoder(const std::string& tag, int cin, const SigmaConfig& cfg)
      : spectrum(tag), in_channels(cin) {
    int prev = 1;  // encoders consume the single-channel structure map
    for (int l = 0; l < cfg.levels; ++l) {
      int width = cfg.enc_widths[size_t(l)];
      std::string base = "encoder." + tag + ".level" + std::to_string(l + 1);
      std::string alias = "encoder.level" + std::to_string(l + 1);
      std::vector<Conv2d<T>> lvl;
      lvl.emplace_back(alias + ".conv0", prev, width, 3, 2, 1, cfg.seed);
      lvl.emplace_back(alias + ".conv1", width, width, 3, 1, 1, cfg.seed);
      lvl.emplace_back(alias + ".conv2", width, width, 3, 1, 1, cfg.seed);
      for (size_t i = 0; i < lvl.size(); ++i)
        lvl[i].name = base + ".conv" + std::to_string(i);
      blocks.push_back(std::move(lvl));
      prev = width;
    }
  }

  // Each level halves spatial dims with a ceil rule: odd inputs are
  // replicate-padded to even before the strided convolution.
  FeaturePyramid<T> encode(const Var<T>& img) const {
    FeaturePyramid<T> pyr;
    Var<T> x = structure_map(img);
    const T slope = T(0.1);
    for (const auto& lvl : blocks) {
      int h = x->value.size(1), w = x->value.size(2);
      x = replicate_pad(x, 0, h % 2, 0, w % 2);
      x = leaky_relu(lvl[0].forward(x), slope);
      x = leaky_relu(lvl[1].forward(x), slope);
      x = leaky_relu(lvl[2].forward(x), slope);
      pyr.levels.push_back(x);
    }
    return pyr;
  }

  void collect(std::vector<std::pair<std::string, Var<T>>>& out) const {
    for (const auto& lvl : blocks)
      for (const auto& c : lvl) c.collect(out);
  }
};

// ---------------------------------------------------------------------------
// shared decoder: per level {warp, cost volume, flow estimator, upsampler}
// ---------------------------------------------------------------------------

template <typename T>
struct FlowEstimator {
  std::vector<Conv2d<T>> convs;  // densely connected
  Conv2d<T> head;

  FlowEstimator() = default;
  FlowEstimator(const std::string& base, int cin, const std::vector<int>& widths,
                uint64_t seed) {
    int cur = cin;
    for (size_t i = 0; i < widths.size(); ++i) {
      convs.emplace_back(base + ".est" + std::to_string(i), cur, widths[i], 3, 1,
                         1, seed);
      cur += widths[i];  // dense connection
    }
    head = Conv2d<T>(base + ".head", cur, 2, 3, 1, 1, seed, T(0.01));
  }

  Var<T> forward(const Var<T>& input) const {
    Var<T> x = input;
    const T slope = T(0.1);
    for (const auto& c : convs) {
      Var<T> h = leaky_relu(c.forward(x), slope);
      x = concat_channels<T>({h, x});
    }
    return head.forward(x);
  }

  void collect(std::vector<std::pair<std::string, Var<T>>>& out) const {
    for (const auto& c : convs) c.collect(out);
    head.collect(out);
  }
};

// Cost volume as a normalized inner product: features are L2-normalized per
// pixel before correlation, so matching features score 1 and self-correlation
// peaks at zero displacement.
template <typename T>
Var<T> cost_volume(const Var<T>& ref, const Var<T>& wrp, int radius) {
  return correlation(pixel_l2_normalize(ref), pixel_l2_normalize(wrp), radius);
}

// 2x average pooling with a replicate-padded ceil rule, channels independent
template <typename T>
Var<T> avg_pool2_ceil(const Var<T>& g) {
  int c = g->value.size(0), h = g->value.size(1), w = g->value.size(2);
  Var<T> x = replicate_pad(g, 0, h % 2, 0, w % 2);
  Tensor<T> k({c, c, 2, 2});
  for (int i = 0; i < c; ++i)
    for (int t = 0; t < 4; ++t) k.data[(size_t(i) * c + i) * 4 + t] = T(0.25);
  return conv2d(x, make_const(std::move(k)), Var<T>(), 2, 0);
}

// Zero-mean 5x5 patch descriptor of a single-channel map: 25 shifted copies
// per pixel minus their mean. Correlating two such descriptors after L2
// normalization computes patch-level ZNCC, a contrast- and offset-invariant
// similarity that is informative with no learned parameters at all.
template <typename T>
Var<T> patch_descriptor(const Var<T>& s) {
  Tensor<T> k({25, 1, 5, 5});
  for (int i = 0; i < 25; ++i) k.data[size_t(i) * 25 + size_t(i)] = T(1);
  Var<T> u = conv2d(replicate_pad(s, 2, 2, 2, 2), make_const(std::move(k)),
                    Var<T>(), 1, 0);
  Tensor<T> zm({25, 25, 1, 1});
  for (int o = 0; o < 25; ++o)
    for (int i = 0; i < 25; ++i)
      zm.data[size_t(o) * 25 + size_t(i)] = (o == i ? T(1) : T(0)) - T(1) / T(25);
  return conv2d(u, make_const(std::move(zm)), Var<T>(), 1, 0);
}

// Box aggregation: per channel, the mean over a (2r+1)^2 window clipped to
// the image bounds (integral-image implementation). Used as spatial cost
// aggregation so low-texture pixels inherit the matching consensus of their
// surroundings. The backward pass distributes each output gradient uniformly
// back over its clipped window.
template <typename T>
Var<T> box_filter(const Var<T>& x, int r) {
  int c = x->value.size(0), h = x->value.size(1), w = x->value.size(2);
  auto window_sums = [r, h, w](const T* in, T* out, bool mean) {
    std::vector<double> integral(size_t(h + 1) * (w + 1), 0.0);
    auto I = [&](int y, int xx) -> double& {
      return integral[size_t(y) * (w + 1) + xx];
    };
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        I(y + 1, xx + 1) = double(in[size_t(y) * w + xx]) + I(y, xx + 1) +
                           I(y + 1, xx) - I(y, xx);
    for (int y = 0; y < h; ++y) {
      int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
      for (int xx = 0; xx < w; ++xx) {
        int x0 = std::max(0, xx - r), x1 = std::min(w - 1, xx + r);
        double s = I(y1 + 1, x1 + 1) - I(y0, x1 + 1) - I(y1 + 1, x0) + I(y0, x0);
        out[size_t(y) * w + xx] =
            T(mean ? s / double((y1 - y0 + 1) * (x1 - x0 + 1)) : s);
      }
    }
  };
  Tensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    window_sums(x->value.data.data() + size_t(ch) * h * w,
                out.data.data() + size_t(ch) * h * w, true);
  return make_node<T>(std::move(out), {x}, [x, r, c, h, w, window_sums](Node<T>& n) {
    x->ensure_grad();
    std::vector<T> scaled(size_t(h) * w), acc(size_t(h) * w);
    for (int ch = 0; ch < c; ++ch) {
      const T* g = n.grad.data.data() + size_t(ch) * h * w;
      for (int y = 0; y < h; ++y) {
        int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
        for (int xx = 0; xx < w; ++xx) {
          int x0 = std::max(0, xx - r), x1 = std::min(w - 1, xx + r);
          scaled[size_t(y) * w + xx] =
              g[size_t(y) * w + xx] / T((y1 - y0 + 1) * (x1 - x0 + 1));
        }
      }
      window_sums(scaled.data(), acc.data(), false);
      T* gx = x->grad.data.data() + size_t(ch) * h * w;
      for (size_t i = 0; i < size_t(h) * w; ++i) gx[i] += acc[i];
    }
  });
}

// Structural descriptor pyramid for the finest decoder levels. Coarser levels
// are skipped on purpose: a 4x-downsampled structure map carries too little
// texture for patch matching and noisy coarse hints amplify when upsampled.
inline constexpr int kStructureLevels = 2;

template <typename T>
std::vector<Var<T>> structure_pyramid(const Var<T>& img) {
  std::vector<Var<T>> desc;
  Var<T> s = avg_pool2_ceil(structure_map(img));
  for (int l = 0; l < kStructureLevels; ++l) {
    desc.push_back(patch_descriptor(s));
    s = avg_pool2_ceil(s);
  }
  return desc;
}

// Differentiable displacement readout of a cost volume: per pixel, the
// softmax-weighted mean of the candidate offsets. Gives the flow estimator a
// direct matching signal and routes loss gradients straight into the
// correlation scores instead of only through the estimator convs.
template <typename T>
Var<T> soft_argmax_flow(const Var<T>& cv, int radius, T tau = T(0.1)) {
  int side = 2 * radius + 1, n = side * side;
  require(cv->value.size(0) == n, "soft_argmax_flow: channel count mismatch");
  int h = cv->value.size(1), w = cv->value.size(2);
  auto weights_at = [n, h, w, tau](const Tensor<T>& scores, int y, int x,
                                   std::vector<T>& p) {
    T m = scores.at(0, y, x);
    for (int k = 1; k < n; ++k) m = std::max(m, scores.at(k, y, x));
    T sum = 0;
    for (int k = 0; k < n; ++k) {
      p[size_t(k)] = std::exp((scores.at(k, y, x) - m) / tau);
      sum += p[size_t(k)];
    }
    for (int k = 0; k < n; ++k) p[size_t(k)] /= sum;
  };
  Tensor<T> out({2, h, w});
  std::vector<T> p(static_cast<size_t>(n), T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      weights_at(cv->value, y, x, p);
      T u = 0, v = 0;
      for (int k = 0; k < n; ++k) {
        u += p[size_t(k)] * T(k % side - radius);
        v += p[size_t(k)] * T(k / side - radius);
      }
      out.at(0, y, x) = u;
      out.at(1, y, x) = v;
    }
  return make_node<T>(std::move(out), {cv},
                      [cv, radius, side, n, h, w, tau, weights_at](Node<T>& nd) {
    cv->ensure_grad();
    std::vector<T> p(static_cast<size_t>(n), T(0));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        weights_at(cv->value, y, x, p);
        T g0 = nd.grad.at(0, y, x), g1 = nd.grad.at(1, y, x);
        T u = nd.value.at(0, y, x), v = nd.value.at(1, y, x);
        for (int k = 0; k < n; ++k)
          cv->grad.at(k, y, x) += p[size_t(k)] / tau *
                                  ((T(k % side - radius) - u) * g0 +
                                   (T(k / side - radius) - v) * g1);
      }
  });
}

template <typename T>
struct SharedDecoder {
  SigmaConfig cfg;
  std::vector<FlowEstimator<T>> estimators;      // index 0 = level 1 (finest)
  std::vector<ConvTranspose2d<T>> upsamplers;    // level l upsamples its own flow

  SharedDecoder() = default;
  explicit SharedDecoder(const SigmaConfig& c) : cfg(c) {
    int cv_ch = (2 * cfg.radius + 1) * (2 * cfg.radius + 1);
    for (int l = 0; l < cfg.levels; ++l) {
      std::string base = "decoder.level" + std::to_string(l + 1);
      // learned cost volume + target features + upsampled flow; the finest
      // levels additionally see the structural cost volume and its hint
      int cin = cv_ch + cfg.enc_widths[size_t(l)] + 2;
      if (l < kStructureLevels) cin += 25 + 2;
      estimators.emplace_back(base, cin, cfg.est_widths, cfg.seed);
      upsamplers.emplace_back(base + ".up", 2, cfg.seed);
    }
  }

  // Coarse-to-fine flow estimation over two pyramids; returns full-resolution
  // flow (2 x out_h x out_w). Flow values live in the pixel units of the level
  // they are estimated at and double at each upsampling. At the finest levels
  // a parameter-free structural matcher (patch ZNCC over the structure map,
  // spatially aggregated, read out by a sharp soft-argmax) contributes a
  // displacement hint, so the module aligns sensibly before any training and
  // the losses fine-tune from there instead of from a collapsed zero field.
  Var<T> decode(const FeaturePyramid<T>& src, const FeaturePyramid<T>& tgt,
                const std::vector<Var<T>>& desc_src,
                const std::vector<Var<T>>& desc_tgt,
                int out_h, int out_w) const {
    const T tau = T(0.01);
    const int agg_radius = 4;
    Var<T> flow;  // flow at current level
    for (int l = cfg.levels - 1; l >= 0; --l) {
      const Var<T>& ft = tgt.levels[size_t(l)];
      const Var<T>& fs = src.levels[size_t(l)];
      int h = ft->value.size(1), w = ft->value.size(2);
      Var<T> up;
      if (!flow) {
        up = make_const(Tensor<T>({2, h, w}));
      } else {
        up = mul_scalar(upsamplers[size_t(l) + 1].forward(flow), T(2));
        up = crop2d(up, h, w);
      }
      bool structural = l < int(desc_src.size());
      // the finest level refines twice with shared estimator weights
      int passes = (structural && l == 0) ? 2 : 1;
      for (int pass = 0; pass < passes; ++pass) {
        Var<T> warped_src = bilinear_warp_op(fs, up);
        Var<T> cv = cost_volume(ft, warped_src, cfg.radius);
        Var<T> inp, hint;
        if (structural) {
          // descriptors vanish on flat patches, so the normalizer needs a
          // real floor or its backward pass amplifies gradients unboundedly
          const T desc_eps = T(1e-4);
          Var<T> wd = bilinear_warp_op(desc_src[size_t(l)], up);
          Var<T> cvs = box_filter(
              correlation(pixel_l2_normalize(desc_tgt[size_t(l)], desc_eps),
                          pixel_l2_normalize(wd, desc_eps), 2),
              agg_radius);
          hint = soft_argmax_flow(cvs, 2, tau);
          inp = concat_channels<T>({cv, cvs, hint, ft, up});
        } else {
          inp = concat_channels<T>({cv, ft, up});
        }
        Var<T> residual = estimators[size_t(l)].forward(inp);
        up = hint ? add(up, add(hint, residual)) : add(up, residual);
      }
      flow = up;
    }
    Var<T> full = mul_scalar(upsamplers[0].forward(flow), T(2));
    return crop2d(full, out_h, out_w);
  }

  void collect(std::vector<std::pair<std::string, Var<T>>>& out) const {
    for (const auto& e : estimators) e.collect(out);
    for (const auto& u : upsamplers) u.collect(out);
  }
};

// ---------------------------------------------------------------------------
// SigmaModel: two spectrum-keyed encoders + one shared decoder
// ---------------------------------------------------------------------------

template <typename T>
class SigmaModel {
 public:
  SigmaModel() = default;
  explicit SigmaModel(const SigmaConfig& cfg) : cfg_(cfg), decoder_(cfg) {
    require(cfg.spectra.size() == 2, "SigmaModel: exactly two spectra required");
    for (const auto& [tag, cin] : cfg.spectra)
      encoders_.emplace(tag, SpectrumEncoder<T>(tag, cin, cfg));
  }

  const SigmaConfig& config() const { return cfg_; }

  const SpectrumEncoder<T>& select_encoder(const std::string& spectrum) const {
    auto it = encoders_.find(spectrum);
    if (it == encoders_.end()) {
      std::string known;
      for (const auto& [t, e] : encoders_) known += (known.empty() ? "" : ",") + t;
      throw ConfigError("spectrum tag '" + spectrum +
                        "' not registered in model (known: " + known + ")");
    }
    return it->second;
  }

  // Encoder selection is keyed by the image's spectrum tag, never by argument
  // position; each use is recorded for instrumentation.
  FeaturePyramid<T> encode(const ImageTensor<T>& img) const {
    return encode(img.spectrum, make_const(img.data));
  }
  FeaturePyramid<T> encode(const std::string& spectrum, const Var<T>& data) const {
    require(data->value.size(0) == cfg_.channels_for(spectrum),
            "encode: channel count does not match encoder for '" + spectrum + "'");
    const SpectrumEncoder<T>& enc = select_encoder(spectrum);
    encoder_trace_.push_back({spectrum, enc.spectrum});
    return enc.encode(data);
  }

  // One sigma pass: full-resolution flow warping src toward tgt.
  Var<T> sigma_forward_var(const std::string& src_spectrum, const Var<T>& src,
                           const std::string& tgt_spectrum, const Var<T>& tgt) const {
    require(src->value.size(1) == tgt->value.size(1) &&
                src->value.size(2) == tgt->value.size(2),
            "sigma_forward: src/tgt spatial dims mismatch");
    FeaturePyramid<T> ps = encode(src_spectrum, src);
    FeaturePyramid<T> pt = encode(tgt_spectrum, tgt);
    return decoder_.decode(ps, pt, structure_pyramid(src), structure_pyramid(tgt),
                           src->value.size(1), src->value.size(2));
  }

  FlowField<T> sigma_forward(const ImageTensor<T>& src, const ImageTensor<T>& tgt) const {
    Var<T> f = sigma_forward_var(src.spectrum, make_const(src.data), tgt.spectrum,
                                 make_const(tgt.data));
    return FlowField<T>(f->value);
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& [tag, enc] : encoders_) enc.collect(out);
    decoder_.collect(out);
    return out;
  }

  // instrumentation: (requested spectrum, encoder actually used)
  const std::vector<std::pair<std::string, std::string>>& encoder_trace() const {
    return encoder_trace_;
  }
  void clear_encoder_trace() const { encoder_trace_.clear(); }

 private:
  SigmaConfig cfg_;
  std::map<std::string, SpectrumEncoder<T>> encoders_;
  SharedDecoder<T> decoder_;
  mutable std::vector<std::pair<std::string, std::string>> encoder_trace_;
};

}  // namespace cspec
