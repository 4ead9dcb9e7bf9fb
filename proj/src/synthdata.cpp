#include "cspec/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "cspec/errors.hpp"

namespace cspec {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// spectral transforms
// ---------------------------------------------------------------------------

SpectralTransform::Kind SpectralTransform::kind_from_string(const std::string& s) {
  if (s == "identity") return Kind::Identity;
  if (s == "channel-mix") return Kind::ChannelMix;
  if (s == "grayscale-invert-blur" || s == "invert-blur") return Kind::GrayInvertBlur;
  throw ConfigError("unknown spectral transform '" + s + "'");
}

namespace {

// separable Gaussian blur, replicate borders
Tensorf gaussian_blur(const Tensorf& x, double sigma) {
  int c = x.size(0), h = x.size(1), w = x.size(2);
  int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<float> k(size_t(2 * radius + 1));
  double s = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = float(std::exp(-0.5 * i * i / (sigma * sigma)));
    s += k[size_t(i + radius)];
  }
  for (auto& v : k) v = float(v / s);
  Tensorf tmp({c, h, w}), out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[size_t(i + radius)] * x.at(ch, y, std::clamp(xx + i, 0, w - 1));
        tmp.at(ch, y, xx) = acc;
      }
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[size_t(i + radius)] * tmp.at(ch, std::clamp(y + i, 0, h - 1), xx);
        out.at(ch, y, xx) = acc;
      }
  return out;
}

}  // namespace

Imagef SpectralTransform::apply(const Imagef& img, uint64_t noise_seed) const {
  uint64_t nseed = noise_seed ? noise_seed : seed;
  Imagef out;
  out.valid = img.valid;
  out.spectrum = spectrum_out;
  switch (kind) {
    case Kind::Identity:
      out.data = img.data;
      break;
    case Kind::ChannelMix: {
      require(img.channels() == 3, "channel-mix transform expects 3 channels");
      Rng rng(mix64(seed, hash_str("mix-matrix")));
      float m[3][3];
      for (auto& row : m) {
        double rs = 0;
        for (auto& v : row) {
          v = float(rng.uniform(0.05, 1.0));
          rs += v;
        }
        for (auto& v : row) v = float(v / rs);  // row-stochastic keeps [0,1]
      }
      int h = img.height(), w = img.width();
      out.data = Tensorf({3, h, w});
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int co = 0; co < 3; ++co)
            out.data.at(co, y, x) = m[co][0] * img.data.at(0, y, x) +
                                    m[co][1] * img.data.at(1, y, x) +
                                    m[co][2] * img.data.at(2, y, x);
      break;
    }
    case Kind::GrayInvertBlur: {
      int h = img.height(), w = img.width(), c = img.channels();
      Tensorf gray({1, h, w});
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0;
          for (int ch = 0; ch < c; ++ch) acc += img.data.at(ch, y, x);
          gray.at(0, y, x) = 1.0f - acc / float(c);  // intensity inversion
        }
      Tensorf blurred = gaussian_blur(gray, blur_sigma);
      Rng rng(mix64(nseed, hash_str("fir-noise")));
      for (auto& v : blurred.data)
        v = std::clamp(v + float(rng.uniform(-noise_level, noise_level)), 0.0f, 1.0f);
      out.data = std::move(blurred);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// flow recipes
// ---------------------------------------------------------------------------

FlowSpec::Kind FlowSpec::kind_from_string(const std::string& s) {
  if (s == "translation" || s == "constant") return Kind::Constant;
  if (s == "homography" || s == "affine") return Kind::Homography;
  if (s == "smooth" || s == "smooth-noise") return Kind::SmoothNoise;
  throw ConfigError("unknown flow kind '" + s + "'");
}

namespace {

float max_magnitude(const Flowf& f) {
  float mx = 0;
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x)
      mx = std::max(mx, std::hypot(f.u(y, x), f.v(y, x)));
  return mx;
}

void scale_to_max(Flowf& f, double target) {
  float mx = max_magnitude(f);
  if (mx <= 0) return;
  float s = float(target) / mx;
  for (auto& v : f.data.data) v *= s;
}

}  // namespace

Flowf generate_flow(const FlowSpec& spec, int h, int w, uint64_t seed) {
  Flowf f = Flowf::zeros(h, w);
  Rng rng(mix64(seed, hash_str("flow")));
  switch (spec.kind) {
    case FlowSpec::Kind::Constant:
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          f.u(y, x) = float(spec.tx);
          f.v(y, x) = float(spec.ty);
        }
      break;
    case FlowSpec::Kind::Homography: {
      // small random affine map; f(p) = (A p + t) - p
      double a00 = 1 + rng.uniform(-0.02, 0.02), a01 = rng.uniform(-0.02, 0.02);
      double a10 = rng.uniform(-0.02, 0.02), a11 = 1 + rng.uniform(-0.02, 0.02);
      double tx = rng.uniform(-1.0, 1.0), ty = rng.uniform(-1.0, 1.0);
      double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double px = x - cx, py = y - cy;
          f.u(y, x) = float(a00 * px + a01 * py + tx - px);
          f.v(y, x) = float(a10 * px + a11 * py + ty - py);
        }
      scale_to_max(f, spec.max_mag);
      break;
    }
    case FlowSpec::Kind::SmoothNoise: {
      // bilinearly upsampled coarse noise grid
      int cells = std::max(2, spec.cells);
      std::vector<float> cu(size_t(cells * cells)), cv(size_t(cells * cells));
      for (auto& v : cu) v = float(rng.uniform(-1.0, 1.0));
      for (auto& v : cv) v = float(rng.uniform(-1.0, 1.0));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double gy = h > 1 ? double(y) / (h - 1) * (cells - 1) : 0;
          double gx = w > 1 ? double(x) / (w - 1) * (cells - 1) : 0;
          int y0 = std::min(int(gy), cells - 2), x0 = std::min(int(gx), cells - 2);
          double wy = gy - y0, wx = gx - x0;
          auto lerp = [&](const std::vector<float>& g) {
            double v00 = g[size_t(y0 * cells + x0)], v01 = g[size_t(y0 * cells + x0 + 1)];
            double v10 = g[size_t((y0 + 1) * cells + x0)],
                   v11 = g[size_t((y0 + 1) * cells + x0 + 1)];
            return float((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                         wy * ((1 - wx) * v10 + wx * v11));
          };
          f.u(y, x) = lerp(cu);
          f.v(y, x) = lerp(cv);
        }
      scale_to_max(f, spec.max_mag);
      break;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// base images
// ---------------------------------------------------------------------------

Imagef generate_base_image(int h, int w, uint64_t seed, const std::string& spectrum) {
  Rng rng(mix64(seed, hash_str("base-image")));
  Tensorf img({3, h, w});
  // smooth background from upsampled 4x4 noise
  const int g = 4;
  for (int ch = 0; ch < 3; ++ch) {
    std::vector<float> grid(g * g);
    for (auto& v : grid) v = float(rng.uniform(0.15, 0.85));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double gy = double(y) / std::max(1, h - 1) * (g - 1);
        double gx = double(x) / std::max(1, w - 1) * (g - 1);
        int y0 = std::min(int(gy), g - 2), x0 = std::min(int(gx), g - 2);
        double wy = gy - y0, wx = gx - x0;
        img.at(ch, y, x) = float((1 - wy) * ((1 - wx) * grid[size_t(y0 * g + x0)] +
                                             wx * grid[size_t(y0 * g + x0 + 1)]) +
                                 wy * ((1 - wx) * grid[size_t((y0 + 1) * g + x0)] +
                                       wx * grid[size_t((y0 + 1) * g + x0 + 1)]));
      }
  }
  // random solid shapes (rectangles and ellipses)
  int n_shapes = 6 + rng.uniform_int(5);
  for (int s = 0; s < n_shapes; ++s) {
    bool ellipse = rng.bernoulli(0.5);
    float col[3] = {float(rng.uniform()), float(rng.uniform()), float(rng.uniform())};
    int cx = rng.uniform_int(w), cy = rng.uniform_int(h);
    int rx = 2 + rng.uniform_int(std::max(2, w / 4));
    int ry = 2 + rng.uniform_int(std::max(2, h / 4));
    for (int y = std::max(0, cy - ry); y < std::min(h, cy + ry + 1); ++y)
      for (int x = std::max(0, cx - rx); x < std::min(w, cx + rx + 1); ++x) {
        if (ellipse) {
          double dx = double(x - cx) / rx, dy = double(y - cy) / ry;
          if (dx * dx + dy * dy > 1.0) continue;
        }
        for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = col[ch];
      }
  }
  // Band-limited texture octaves shared across channels. Flat shapes alone
  // leave dense correspondence ill-posed away from boundaries; mid-frequency
  // texture makes local matching informative everywhere while staying smooth
  // enough to survive the pseudo-spectral blur.
  for (int oct = 0; oct < 2; ++oct) {
    int cells = oct == 0 ? 16 : 32;
    float amp = oct == 0 ? 0.12f : 0.07f;
    std::vector<float> grid(size_t(cells) * cells);
    for (auto& v : grid) v = float(rng.uniform(-1.0, 1.0));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double gy = h > 1 ? double(y) / (h - 1) * (cells - 1) : 0;
        double gx = w > 1 ? double(x) / (w - 1) * (cells - 1) : 0;
        int y0 = std::min(int(gy), cells - 2), x0 = std::min(int(gx), cells - 2);
        double wy = gy - y0, wx = gx - x0;
        double v00 = grid[size_t(y0 * cells + x0)];
        double v01 = grid[size_t(y0 * cells + x0 + 1)];
        double v10 = grid[size_t((y0 + 1) * cells + x0)];
        double v11 = grid[size_t((y0 + 1) * cells + x0 + 1)];
        float t = amp * float((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                              wy * ((1 - wx) * v10 + wx * v11));
        for (int ch = 0; ch < 3; ++ch)
          img.at(ch, y, x) = std::clamp(img.at(ch, y, x) + t, 0.0f, 1.0f);
      }
  }
  return Imagef(std::move(img), spectrum);
}

// ---------------------------------------------------------------------------
// pair generation
// ---------------------------------------------------------------------------

PairSample generate_pair(const Imagef& base, const FlowSpec& flow_spec,
                         const SpectralTransform& transform, uint64_t seed) {
  int h = base.height(), w = base.width();
  Flowf gt = generate_flow(flow_spec, h, w, seed);
  float mx = max_magnitude(gt);
  double bound = 0.1 * w;
  if (mx >= bound)
    throw ConfigError("flow magnitude " + std::to_string(mx) +
                      " exceeds the 10%-of-width bound (" + std::to_string(bound) + ")");
  PairSample s;
  s.img_a = base;
  Imagef warped = bilinear_warp(base, gt);
  s.img_b = transform.apply(warped, mix64(seed, transform.seed));
  s.gt_flow = std::move(gt);
  s.pair_id = "synth_" + std::to_string(seed);
  return s;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

Imagef flip_h(const Imagef& img) {
  int c = img.channels(), h = img.height(), w = img.width();
  Imagef out = img;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.data.at(ch, y, x) = img.data.at(ch, y, w - 1 - x);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.valid.at(y, x) = img.valid.at(y, w - 1 - x);
  return out;
}

Tensorf flip_h_mask(const Tensorf& m) {
  int h = m.size(0), w = m.size(1);
  Tensorf out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y, w - 1 - x);
  return out;
}

Imagef crop_image(const Imagef& img, int oy, int ox, int ch_, int cw_) {
  int c = img.channels();
  Tensorf d({c, ch_, cw_}), v({ch_, cw_});
  for (int chn = 0; chn < c; ++chn)
    for (int y = 0; y < ch_; ++y)
      for (int x = 0; x < cw_; ++x) d.at(chn, y, x) = img.data.at(chn, y + oy, x + ox);
  for (int y = 0; y < ch_; ++y)
    for (int x = 0; x < cw_; ++x) v.at(y, x) = img.valid.at(y + oy, x + ox);
  return Imagef(std::move(d), img.spectrum, std::move(v));
}

Tensorf crop_mask(const Tensorf& m, int oy, int ox, int ch_, int cw_) {
  Tensorf out({ch_, cw_});
  for (int y = 0; y < ch_; ++y)
    for (int x = 0; x < cw_; ++x) out.at(y, x) = m.at(y + oy, x + ox);
  return out;
}

}  // namespace

PairSample augment(const PairSample& sample, const AugmentConfig& cfg, uint64_t seed) {
  Rng rng(mix64(seed, hash_str("augment")));
  PairSample out = sample;
  int h = out.img_a.height(), w = out.img_a.width();
  require(out.img_b.height() == h && out.img_b.width() == w,
          "augment: pair dims mismatch");

  // 1) pair-consistent horizontal flip
  bool flip = rng.bernoulli(cfg.flip_prob);
  if (flip) {
    out.img_a = flip_h(out.img_a);
    out.img_b = flip_h(out.img_b);
    if (out.mask_a) out.mask_a = flip_h_mask(*out.mask_a);
    if (out.mask_b) out.mask_b = flip_h_mask(*out.mask_b);
    if (out.gt_flow) {
      Flowf f = Flowf::zeros(h, w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          f.u(y, x) = -out.gt_flow->u(y, w - 1 - x);
          f.v(y, x) = out.gt_flow->v(y, w - 1 - x);
        }
      out.gt_flow = std::move(f);
    }
    for (auto& p : out.points) {
      p.xa = w - 1 - p.xa;
      p.xb = w - 1 - p.xb;
    }
  }

  // 2) independent random crops
  int ch_ = cfg.crop_h > 0 ? std::min(cfg.crop_h, h) : h;
  int cw_ = cfg.crop_w > 0 ? std::min(cfg.crop_w, w) : w;
  int max_oy = std::min(cfg.max_offset, h - ch_);
  int max_ox = std::min(cfg.max_offset, w - cw_);
  int oay = rng.uniform_int(max_oy + 1), oax = rng.uniform_int(max_ox + 1);
  int oby = rng.uniform_int(max_oy + 1), obx = rng.uniform_int(max_ox + 1);
  if (ch_ != h || cw_ != w || oay || oax || oby || obx) {
    out.img_a = crop_image(out.img_a, oay, oax, ch_, cw_);
    out.img_b = crop_image(out.img_b, oby, obx, ch_, cw_);
    if (out.mask_a) out.mask_a = crop_mask(*out.mask_a, oay, oax, ch_, cw_);
    if (out.mask_b) out.mask_b = crop_mask(*out.mask_b, oby, obx, ch_, cw_);
    if (out.gt_flow) {
      Flowf f = Flowf::zeros(ch_, cw_);
      for (int y = 0; y < ch_; ++y)
        for (int x = 0; x < cw_; ++x) {
          f.u(y, x) = out.gt_flow->u(y + oby, x + obx) + float(obx - oax);
          f.v(y, x) = out.gt_flow->v(y + oby, x + obx) + float(oby - oay);
        }
      out.gt_flow = std::move(f);
    }
    // unpaired bands from the offset difference are masked from the loss
    int dx = obx - oax, dy = oby - oay;
    for (int y = 0; y < ch_; ++y)
      for (int x = 0; x < cw_; ++x) {
        bool b_paired = (x + dx >= 0 && x + dx < cw_ && y + dy >= 0 && y + dy < ch_);
        bool a_paired = (x - dx >= 0 && x - dx < cw_ && y - dy >= 0 && y - dy < ch_);
        if (!b_paired) out.img_b.valid.at(y, x) = 0;
        if (!a_paired) out.img_a.valid.at(y, x) = 0;
      }
    for (auto& p : out.points) {
      p.xa -= oax;
      p.ya -= oay;
      p.xb -= obx;
      p.yb -= oby;
    }
  }

  // 3) channel jitter on the visible-spectrum image only
  if (cfg.jitter_frac > 0) {
    auto jitter = [&](Imagef& img) {
      for (int chn = 0; chn < img.channels(); ++chn) {
        float f = float(1.0 + rng.uniform(-cfg.jitter_frac, cfg.jitter_frac));
        for (int y = 0; y < img.height(); ++y)
          for (int x = 0; x < img.width(); ++x)
            img.data.at(chn, y, x) = std::clamp(img.data.at(chn, y, x) * f, 0.0f, 1.0f);
      }
    };
    if (out.img_a.spectrum == cfg.jitter_spectrum) jitter(out.img_a);
    if (out.img_b.spectrum == cfg.jitter_spectrum) jitter(out.img_b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string resolve(const std::string& base_dir, const std::string& p) {
  if (p.empty()) return p;
  fs::path fp(p);
  if (fp.is_absolute()) return p;
  return (fs::path(base_dir) / fp).string();
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError("manifest not found: " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) fields.push_back(trim(item));
    if (fields.size() < 5 || fields.size() > 9 || fields.size() == 7)
      throw IngestionError("manifest line " + std::to_string(line_no) +
                           ": expected 5, 6, 8 or 9 fields, got " +
                           std::to_string(fields.size()));
    auto opt = [&](size_t i) {
      return (i < fields.size() && fields[i] != "-") ? fields[i] : std::string();
    };
    ManifestEntry e;
    e.line_no = line_no;
    e.pair_id = fields[0];
    e.path_a = fields[1];
    e.spectrum_a = fields[2];
    e.path_b = fields[3];
    e.spectrum_b = fields[4];
    e.gt_flow_path = opt(5);
    e.mask_a_path = opt(6);
    e.mask_b_path = opt(7);
    e.points_path = opt(8);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest: " + path);
  f << "# pair_id,path_a,spectrum_a,path_b,spectrum_b,gt_flow,mask_a,mask_b,points\n";
  for (const auto& e : entries) {
    auto opt = [](const std::string& s) { return s.empty() ? "-" : s; };
    f << e.pair_id << ',' << e.path_a << ',' << e.spectrum_a << ',' << e.path_b
      << ',' << e.spectrum_b << ',' << opt(e.gt_flow_path) << ','
      << opt(e.mask_a_path) << ',' << opt(e.mask_b_path) << ','
      << opt(e.points_path) << '\n';
  }
}

PairSample Manifest::load(size_t i) const {
  const ManifestEntry& e = entries.at(i);
  auto where = [&](const std::string& what) {
    return what + " (manifest line " + std::to_string(e.line_no) + ", pair '" +
           e.pair_id + "')";
  };
  PairSample s;
  s.pair_id = e.pair_id;
  try {
    s.img_a = load_image(resolve(base_dir, e.path_a), e.spectrum_a);
    s.img_b = load_image(resolve(base_dir, e.path_b), e.spectrum_b);
    if (!e.gt_flow_path.empty()) s.gt_flow = read_flo(resolve(base_dir, e.gt_flow_path));
    if (!e.mask_a_path.empty()) s.mask_a = load_mask(resolve(base_dir, e.mask_a_path));
    if (!e.mask_b_path.empty()) s.mask_b = load_mask(resolve(base_dir, e.mask_b_path));
    if (!e.points_path.empty()) s.points = read_points(resolve(base_dir, e.points_path));
  } catch (const std::exception& ex) {
    throw IngestionError(where(ex.what()));
  }
  if (s.img_a.height() != s.img_b.height() || s.img_a.width() != s.img_b.width())
    throw IngestionError(where("pair image dims mismatch"));
  if (s.gt_flow && (s.gt_flow->height() != s.img_a.height() ||
                    s.gt_flow->width() != s.img_a.width()))
    throw IngestionError(where("ground-truth flow dims mismatch"));
  return s;
}

std::vector<size_t> Manifest::order(bool shuffle, uint64_t seed) const {
  std::vector<size_t> idx(entries.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (shuffle) {
    Rng rng(mix64(seed, hash_str("manifest-shuffle")));
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[size_t(rng.uniform_int(int(i)))]);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// image / flow / point files
// ---------------------------------------------------------------------------

Imagef load_image(const std::string& path, const std::string& spectrum) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IngestionError("cannot read image: " + path);
  double scale = 1.0;
  if (m.depth() == CV_8U) scale = 1.0 / 255.0;
  else if (m.depth() == CV_16U) scale = 1.0 / 65535.0;
  else throw IngestionError("unsupported bit depth in " + path);
  int c = m.channels() >= 3 ? 3 : 1;
  Tensorf t({c, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      if (m.channels() == 1) {
        double v = m.depth() == CV_8U ? m.at<uchar>(y, x) : m.at<uint16_t>(y, x);
        t.at(0, y, x) = float(v * scale);
      } else {
        // OpenCV stores BGR(A)
        for (int ch = 0; ch < 3; ++ch) {
          double v;
          if (m.depth() == CV_8U)
            v = m.channels() == 4 ? m.at<cv::Vec4b>(y, x)[2 - ch]
                                  : m.at<cv::Vec3b>(y, x)[2 - ch];
          else
            v = m.channels() == 4 ? m.at<cv::Vec4w>(y, x)[2 - ch]
                                  : m.at<cv::Vec3w>(y, x)[2 - ch];
          t.at(ch, y, x) = float(v * scale);
        }
      }
    }
  return Imagef(std::move(t), spectrum);
}

void save_image(const std::string& path, const Imagef& img) {
  int h = img.height(), w = img.width(), c = img.channels();
  require(c == 1 || c == 3, "save_image: 1 or 3 channels only");
  cv::Mat m(h, w, c == 1 ? CV_16UC1 : CV_16UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (c == 1) {
        m.at<uint16_t>(y, x) =
            uint16_t(std::clamp(img.data.at(0, y, x), 0.0f, 1.0f) * 65535.0f + 0.5f);
      } else {
        cv::Vec3w& px = m.at<cv::Vec3w>(y, x);
        for (int ch = 0; ch < 3; ++ch)
          px[2 - ch] =
              uint16_t(std::clamp(img.data.at(ch, y, x), 0.0f, 1.0f) * 65535.0f + 0.5f);
      }
    }
  if (!cv::imwrite(path, m)) throw IoError("cannot write image: " + path);
}

Tensorf load_mask(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IngestionError("cannot read mask: " + path);
  Tensorf t({m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) t.at(y, x) = m.at<uchar>(y, x) ? 1.0f : 0.0f;
  return t;
}

static constexpr float kFloMagic = 202021.25f;

Flowf read_flo(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestionError("cannot read flow file: " + path);
  float magic = 0;
  int32_t w = 0, h = 0;
  f.read(reinterpret_cast<char*>(&magic), 4);
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  if (!f || magic != kFloMagic || w <= 0 || h <= 0)
    throw IngestionError("bad flow file header: " + path);
  Flowf out = Flowf::zeros(h, w);
  std::vector<float> row(size_t(w) * 2);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * 4));
    for (int x = 0; x < w; ++x) {
      out.u(y, x) = row[size_t(x) * 2];
      out.v(y, x) = row[size_t(x) * 2 + 1];
    }
  }
  if (!f) throw IngestionError("truncated flow file: " + path);
  return out;
}

void write_flo(const std::string& path, const Flowf& flow) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write flow file: " + path);
  float magic = kFloMagic;
  int32_t w = flow.width(), h = flow.height();
  f.write(reinterpret_cast<const char*>(&magic), 4);
  f.write(reinterpret_cast<const char*>(&w), 4);
  f.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> row(size_t(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      row[size_t(x) * 2] = flow.u(y, x);
      row[size_t(x) * 2 + 1] = flow.v(y, x);
    }
    f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * 4));
  }
  if (!f) throw IoError("write failed: " + path);
}

std::vector<PointCorrespondence> read_points(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError("cannot read points file: " + path);
  std::vector<PointCorrespondence> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ss(t);
    PointCorrespondence p;
    if (!(ss >> p.xa >> p.ya >> p.xb >> p.yb >> p.category))
      throw IngestionError("bad points line " + std::to_string(line_no) + " in " + path);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cspec
