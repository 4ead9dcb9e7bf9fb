#include "cspec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cspec/errors.hpp"
#include "cspec/warp.hpp"

namespace cspec {

namespace fs = std::filesystem;

namespace {

bool counted(const Tensorf* mask, int y, int x) {
  return !mask || mask->at(y, x) != 0.0f;
}

double epe_at(const Flowf& flow, const Flowf& gt, int y, int x) {
  double du = double(flow.u(y, x)) - gt.u(y, x);
  double dv = double(flow.v(y, x)) - gt.v(y, x);
  return std::sqrt(du * du + dv * dv);
}

}  // namespace

std::optional<double> average_endpoint_error(const Flowf& flow, const Flowf& gt,
                                             const Tensorf* mask) {
  require(flow.height() == gt.height() && flow.width() == gt.width(),
          "endpoint error: dims mismatch");
  double sum = 0;
  long n = 0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x)
      if (counted(mask, y, x)) {
        sum += epe_at(flow, gt, y, x);
        ++n;
      }
  if (!n) return std::nullopt;
  return sum / double(n);
}

std::optional<double> flow_error_rate(const Flowf& flow, const Flowf& gt,
                                      const Tensorf* mask, double abs_thresh,
                                      double rel_thresh) {
  require(flow.height() == gt.height() && flow.width() == gt.width(),
          "error rate: dims mismatch");
  long bad = 0, n = 0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x)
      if (counted(mask, y, x)) {
        double e = epe_at(flow, gt, y, x);
        double mag = std::hypot(double(gt.u(y, x)), double(gt.v(y, x)));
        if (e >= abs_thresh && e >= rel_thresh * mag) ++bad;
        ++n;
      }
  if (!n) return std::nullopt;
  return double(bad) / double(n);
}

MaskTransferScore mask_transfer_prf(const Tensorf& src_mask, const Tensorf& target_mask,
                                    const Flowf& flow) {
  require(flow.height() == target_mask.size(0) && flow.width() == target_mask.size(1),
          "mask transfer: target/flow dims mismatch");
  Imagef src(Tensorf({1, src_mask.size(0), src_mask.size(1)}), "mask");
  for (int y = 0; y < src_mask.size(0); ++y)
    for (int x = 0; x < src_mask.size(1); ++x)
      src.data.at(0, y, x) = src_mask.at(y, x) != 0.0f ? 1.0f : 0.0f;
  Imagef warped = bilinear_warp(src, flow);

  long tp = 0, fp = 0, fn = 0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      bool pred = warped.data.at(0, y, x) >= 0.5f;
      bool truth = target_mask.at(y, x) != 0.0f;
      if (pred && truth) ++tp;
      else if (pred) ++fp;
      else if (truth) ++fn;
    }
  MaskTransferScore s;
  if (tp + fp > 0) s.precision = double(tp) / double(tp + fp);
  if (tp + fn > 0) s.recall = double(tp) / double(tp + fn);
  if (s.precision && s.recall && (*s.precision + *s.recall) > 0)
    s.f1 = 2.0 * *s.precision * *s.recall / (*s.precision + *s.recall);
  return s;
}

PointScore point_rmse(const std::vector<PointCorrespondence>& points, const Flowf& flow) {
  PointScore s;
  std::map<std::string, std::pair<double, long>> sq2d, squ;
  int h = flow.height(), w = flow.width();
  for (const auto& p : points) {
    if (p.xa < 0 || p.xa > w - 1 || p.ya < 0 || p.ya > h - 1) {
      ++s.out_of_bounds;
      continue;
    }
    int x0 = std::min(int(p.xa), w - 2 < 0 ? 0 : w - 2);
    int y0 = std::min(int(p.ya), h - 2 < 0 ? 0 : h - 2);
    double wx = p.xa - x0, wy = p.ya - y0;
    auto sample = [&](auto comp) {
      double v00 = comp(y0, x0), v01 = comp(y0, std::min(x0 + 1, w - 1));
      double v10 = comp(std::min(y0 + 1, h - 1), x0);
      double v11 = comp(std::min(y0 + 1, h - 1), std::min(x0 + 1, w - 1));
      return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
    };
    double fu = sample([&](int y, int x) { return double(flow.u(y, x)); });
    double fv = sample([&](int y, int x) { return double(flow.v(y, x)); });
    double ex = fu - (p.xb - p.xa);
    double ey = fv - (p.yb - p.ya);
    auto& a2 = sq2d[p.category];
    a2.first += ex * ex + ey * ey;
    ++a2.second;
    auto& au = squ[p.category];
    au.first += ex * ex;
    ++au.second;
    ++s.used;
  }
  for (const auto& [cat, acc] : sq2d)
    s.rmse_2d[cat] = std::sqrt(acc.first / double(acc.second));
  for (const auto& [cat, acc] : squ)
    s.rmse_u_only[cat] = std::sqrt(acc.first / double(acc.second));
  return s;
}

PairMetrics evaluate_pair(const PairSample& sample, const Flowf& flow_ab) {
  PairMetrics m;
  m.pair_id = sample.pair_id;
  if (sample.gt_flow) {
    const Tensorf* mask = sample.mask_b ? &*sample.mask_b : nullptr;
    m.aee = average_endpoint_error(flow_ab, *sample.gt_flow, mask);
    m.error_rate = flow_error_rate(flow_ab, *sample.gt_flow, mask);
    Flowf zero = Flowf::zeros(flow_ab.height(), flow_ab.width());
    m.zero_flow_aee = average_endpoint_error(zero, *sample.gt_flow, mask);
  }
  if (sample.mask_a && sample.mask_b)
    m.mask_score = mask_transfer_prf(*sample.mask_a, *sample.mask_b, flow_ab);
  if (!sample.points.empty()) m.points = point_rmse(sample.points, flow_ab);
  return m;
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", *v);
  return buf;
}

void accumulate(std::optional<double>& mean, long& n, const std::optional<double>& v) {
  if (!v) return;
  mean = mean.value_or(0.0) + *v;
  ++n;
}

}  // namespace

void emit_report(const std::string& out_dir, const std::vector<PairMetrics>& metrics,
                 const std::vector<std::pair<std::string, Flowf>>& flows,
                 const std::vector<std::optional<Flowf>>& gts) {
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "vis");

  {
    std::ofstream f(fs::path(out_dir) / "per_pair.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write per_pair.csv in " + out_dir);
    f << "# schema v1\n";
    f << "pair_id,aee,error_rate,zero_flow_aee,mask_precision,mask_recall,mask_f1,"
         "points_used,points_oob,point_rmse_2d,point_rmse_u\n";
    for (const auto& m : metrics) {
      auto cat_join = [&](const std::map<std::string, double>& per_cat) {
        std::string out;
        for (const auto& [cat, v] : per_cat) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "%s:%.9g", cat.c_str(), v);
          out += (out.empty() ? "" : ";") + std::string(buf);
        }
        return out.empty() ? "-" : out;
      };
      f << m.pair_id << ',' << fmt(m.aee) << ',' << fmt(m.error_rate) << ','
        << fmt(m.zero_flow_aee) << ',' << fmt(m.mask_score.precision) << ','
        << fmt(m.mask_score.recall) << ',' << fmt(m.mask_score.f1) << ','
        << m.points.used << ',' << m.points.out_of_bounds << ','
        << cat_join(m.points.rmse_2d) << ',' << cat_join(m.points.rmse_u_only) << '\n';
    }
  }

  {
    std::optional<double> aee, err, zero, prec, rec, f1;
    long na = 0, ne = 0, nz = 0, np = 0, nr = 0, nf = 0;
    for (const auto& m : metrics) {
      accumulate(aee, na, m.aee);
      accumulate(err, ne, m.error_rate);
      accumulate(zero, nz, m.zero_flow_aee);
      accumulate(prec, np, m.mask_score.precision);
      accumulate(rec, nr, m.mask_score.recall);
      accumulate(f1, nf, m.mask_score.f1);
    }
    auto div = [](std::optional<double>& v, long n) {
      if (v) v = *v / double(n);
    };
    div(aee, na), div(err, ne), div(zero, nz), div(prec, np), div(rec, nr), div(f1, nf);
    std::ofstream f(fs::path(out_dir) / "aggregate.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write aggregate.csv in " + out_dir);
    f << "# schema v1\n";
    f << "pairs,aee,error_rate,zero_flow_aee,mask_precision,mask_recall,mask_f1\n";
    f << metrics.size() << ',' << fmt(aee) << ',' << fmt(err) << ',' << fmt(zero) << ','
      << fmt(prec) << ',' << fmt(rec) << ',' << fmt(f1) << '\n';
  }

  for (size_t i = 0; i < flows.size(); ++i) {
    const auto& [pair_id, flow] = flows[i];
    save_image((fs::path(out_dir) / "vis" / (pair_id + "_flow.png")).string(),
               flow_to_color(flow));
    if (i < gts.size() && gts[i])
      save_image((fs::path(out_dir) / "vis" / (pair_id + "_err.png")).string(),
                 error_heatmap(flow, *gts[i]));
  }
}

// ---------------------------------------------------------------------------
// visualization
// ---------------------------------------------------------------------------

namespace {

// 55-entry optical-flow color wheel (RY/YG/GC/CB/BM/MR segments)
struct ColorWheel {
  std::vector<std::array<float, 3>> cols;
  ColorWheel() {
    const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    auto seg = [&](int n, int c0, int c1, bool up) {
      for (int i = 0; i < n; ++i) {
        std::array<float, 3> c = {0, 0, 0};
        float t = float(i) / n;
        c[size_t(c0)] = up ? 1.0f : 1.0f - t;
        c[size_t(c1)] = up ? t : 1.0f;
        cols.push_back(c);
      }
    };
    seg(RY, 0, 1, true);
    seg(YG, 1, 0, false);
    seg(GC, 1, 2, true);
    seg(CB, 2, 1, false);
    seg(BM, 2, 0, true);
    seg(MR, 0, 2, false);
  }
};

}  // namespace

Imagef flow_to_color(const Flowf& flow, double max_mag) {
  static const ColorWheel wheel;
  int h = flow.height(), w = flow.width();
  if (max_mag <= 0) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        max_mag = std::max(max_mag, std::hypot(double(flow.u(y, x)),
                                               double(flow.v(y, x))));
    if (max_mag <= 0) max_mag = 1.0;
  }
  int n = int(wheel.cols.size());
  Tensorf img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double u = flow.u(y, x) / max_mag, v = flow.v(y, x) / max_mag;
      double rad = std::min(1.0, std::hypot(u, v));
      double a = std::atan2(-v, -u) / M_PI;          // [-1,1]
      double fk = (a + 1.0) / 2.0 * (n - 1);
      int k0 = int(fk) % n, k1 = (k0 + 1) % n;
      double f = fk - int(fk);
      for (int ch = 0; ch < 3; ++ch) {
        double col = (1 - f) * wheel.cols[size_t(k0)][size_t(ch)] +
                     f * wheel.cols[size_t(k1)][size_t(ch)];
        col = 1.0 - rad * (1.0 - col);  // desaturate toward white at zero motion
        img.at(ch, y, x) = float(col);
      }
    }
  return Imagef(std::move(img), "vis");
}

Imagef error_heatmap(const Flowf& flow, const Flowf& gt, double max_err) {
  require(flow.height() == gt.height() && flow.width() == gt.width(),
          "error heatmap: dims mismatch");
  int h = flow.height(), w = flow.width();
  Tensorf img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double t = std::min(1.0, epe_at(flow, gt, y, x) / max_err);
      // blue -> cyan -> yellow -> red ramp
      float r, g, b;
      if (t < 1.0 / 3) {
        r = 0;
        g = float(3 * t);
        b = 1;
      } else if (t < 2.0 / 3) {
        r = float(3 * t - 1);
        g = 1;
        b = float(2 - 3 * t);
      } else {
        r = 1;
        g = float(3 - 3 * t);
        b = 0;
      }
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  return Imagef(std::move(img), "vis");
}

}  // namespace cspec
