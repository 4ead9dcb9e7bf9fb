#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cspec/image.hpp"
#include "cspec/rng.hpp"
#include "cspec/warp.hpp"

namespace cspec {

// ---------------------------------------------------------------------------
// samples and annotations
// ---------------------------------------------------------------------------

struct PointCorrespondence {
  double xa = 0, ya = 0, xb = 0, yb = 0;
  std::string category;
};

struct PairSample {
  Imagef img_a, img_b;
  std::optional<Flowf> gt_flow;               // ground truth ^A f_B (synthetic)
  std::optional<Tensorf> mask_a, mask_b;      // segmentation masks (evaluation)
  std::vector<PointCorrespondence> points;    // sparse correspondences
  std::string pair_id;
};

// ---------------------------------------------------------------------------
// geometry-preserving pseudo-spectral transforms
// ---------------------------------------------------------------------------

struct SpectralTransform {
  enum class Kind { Identity, ChannelMix, GrayInvertBlur };
  Kind kind = Kind::Identity;
  std::string spectrum_out = "synthB";
  double blur_sigma = 1.5;   // GrayInvertBlur
  double noise_level = 0.01; // GrayInvertBlur
  uint64_t seed = 9;         // mixing matrix / noise stream

  // noise_seed = 0 uses the transform's own seed
  Imagef apply(const Imagef& img, uint64_t noise_seed = 0) const;

  static Kind kind_from_string(const std::string& s);
};

// ---------------------------------------------------------------------------
// ground-truth flow recipes
// ---------------------------------------------------------------------------

struct FlowSpec {
  enum class Kind { Constant, Homography, SmoothNoise };
  Kind kind = Kind::SmoothNoise;
  double tx = 0, ty = 0;      // Constant
  double max_mag = 6.0;       // Homography / SmoothNoise magnitude bound
  int cells = 4;              // SmoothNoise coarse grid resolution

  static Kind kind_from_string(const std::string& s);
};

// Dense flow realizing the spec; deterministic given seed.
Flowf generate_flow(const FlowSpec& spec, int h, int w, uint64_t seed);

// Procedural structured base image (3-channel): smooth background plus
// random shapes, so feature and smoothing losses have real gradients to work
// against.
Imagef generate_base_image(int h, int w, uint64_t seed,
                           const std::string& spectrum = "rgb");

// img_a = base; img_b = transform(base warped by gt_flow); gt_flow aligns
// img_a to img_b exactly. Rejects flows whose magnitude exceeds 10% of width.
PairSample generate_pair(const Imagef& base, const FlowSpec& flow_spec,
                         const SpectralTransform& transform, uint64_t seed);

// ---------------------------------------------------------------------------
// augmentation (flip pair-consistent, crops pair-independent, channel jitter)
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double flip_prob = 0.5;
  int crop_h = 0, crop_w = 0;   // 0 disables cropping
  int max_offset = 0;           // max independent crop offset per image
  double jitter_frac = 0.03;    // channel jitter on the visible image
  std::string jitter_spectrum = "rgb";
};

PairSample augment(const PairSample& sample, const AugmentConfig& cfg, uint64_t seed);

// ---------------------------------------------------------------------------
// dataset manifests
//   line format: pair_id,path_a,spectrum_a,path_b,spectrum_b[,gt][,mask_a,mask_b][,points]
//   '-' marks an absent optional field; '#' lines are comments/header.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string pair_id, path_a, spectrum_a, path_b, spectrum_b;
  std::string gt_flow_path, mask_a_path, mask_b_path, points_path;  // "" = absent
  int line_no = 0;
};

struct Manifest {
  std::string base_dir;
  std::vector<ManifestEntry> entries;

  size_t size() const { return entries.size(); }
  PairSample load(size_t i) const;
  std::vector<size_t> order(bool shuffle, uint64_t seed) const;
};

Manifest load_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

// ---------------------------------------------------------------------------
// file I/O
// ---------------------------------------------------------------------------

// 8/16-bit PNG or TIFF, 1 or 3 channels, normalized to [0,1]
Imagef load_image(const std::string& path, const std::string& spectrum);
// writes 16-bit PNG (1 or 3 channels)
void save_image(const std::string& path, const Imagef& img);
// single-channel mask PNG; nonzero = foreground
Tensorf load_mask(const std::string& path);

// optical-flow interchange format: float magic 202021.25, int32 w, int32 h,
// interleaved float32 (u,v) row-major
Flowf read_flo(const std::string& path);
void write_flo(const std::string& path, const Flowf& flow);

std::vector<PointCorrespondence> read_points(const std::string& path);

}  // namespace cspec
