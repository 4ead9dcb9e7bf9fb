#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cspec/image.hpp"
#include "cspec/synthdata.hpp"

namespace cspec {

// ---------------------------------------------------------------------------
// dense flow metrics. All take an optional validity mask (HW, nonzero = use).
// ---------------------------------------------------------------------------

// mean endpoint error over counted pixels; absent when nothing is counted
std::optional<double> average_endpoint_error(const Flowf& flow, const Flowf& gt,
                                             const Tensorf* mask = nullptr);

// fraction of counted pixels whose endpoint error is both >= abs_thresh px
// and >= rel_thresh of the true displacement magnitude; absent when nothing
// is counted
std::optional<double> flow_error_rate(const Flowf& flow, const Flowf& gt,
                                      const Tensorf* mask = nullptr,
                                      double abs_thresh = 3.0, double rel_thresh = 0.05);

// ---------------------------------------------------------------------------
// segmentation transfer: warp src_mask with the flow (backward sampling, so
// the result lives in the flow's frame), binarize at 0.5, score against the
// target mask. Precision is absent when nothing was predicted, recall when
// the target is empty.
// ---------------------------------------------------------------------------

struct MaskTransferScore {
  std::optional<double> precision, recall, f1;
};

MaskTransferScore mask_transfer_prf(const Tensorf& src_mask, const Tensorf& target_mask,
                                    const Flowf& flow);

// ---------------------------------------------------------------------------
// sparse point correspondences: the flow sampled bilinearly at (xa, ya) is
// compared against the displacement (xb - xa, yb - ya). Points sampling the
// flow out of bounds are skipped and counted.
// ---------------------------------------------------------------------------

struct PointScore {
  std::map<std::string, double> rmse_2d;      // per category
  std::map<std::string, double> rmse_u_only;  // horizontal component only
  int used = 0, out_of_bounds = 0;
};

PointScore point_rmse(const std::vector<PointCorrespondence>& points, const Flowf& flow);

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct PairMetrics {
  std::string pair_id;
  std::optional<double> aee, error_rate, zero_flow_aee;
  MaskTransferScore mask_score;
  PointScore points;
};

// Scores one pair's predicted A-to-B flow against whatever annotations the
// sample carries.
PairMetrics evaluate_pair(const PairSample& sample, const Flowf& flow_ab);

// Writes per_pair.csv and aggregate.csv, plus a flow color rendering and,
// when ground truth exists, an endpoint-error heatmap per pair.
void emit_report(const std::string& out_dir, const std::vector<PairMetrics>& metrics,
                 const std::vector<std::pair<std::string, Flowf>>& flows,
                 const std::vector<std::optional<Flowf>>& gts);

// ---------------------------------------------------------------------------
// visualization
// ---------------------------------------------------------------------------

// standard optical-flow color wheel; max_mag <= 0 normalizes per image
Imagef flow_to_color(const Flowf& flow, double max_mag = 0);
// blue-to-red endpoint-error rendering, saturating at max_err
Imagef error_heatmap(const Flowf& flow, const Flowf& gt, double max_err = 5.0);

}  // namespace cspec
