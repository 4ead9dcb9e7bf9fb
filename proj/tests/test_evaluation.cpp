#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cspec/evaluation.hpp"
#include "cspec/synthdata.hpp"
#include "testutil.hpp"

using namespace cspec;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() /
                   ("cspec_eval_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& name = "") const {
    return name.empty() ? path.string() : (path / name).string();
  }
  static inline int counter = 0;
};

Flowf const_flow(int h, int w, float u, float v) {
  Flowf f;
  f.data = Tensorf::zeros({2, size_t(h), size_t(w)});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.u(y, x) = u;
      f.v(y, x) = v;
    }
  return f;
}

Flowf random_flow(int h, int w, uint64_t seed, double lo, double hi) {
  Flowf f;
  f.data = Tensorf(
      testutil::random_tensor({2, size_t(h), size_t(w)}, seed, lo, hi).cast<float>());
  return f;
}

}  // namespace

TEST_CASE("endpoint error: exact match is zero, a 3-4-5 offset is five") {
  Flowf gt = random_flow(8, 8, 1, -2, 2);
  CHECK(*average_endpoint_error(gt, gt) == doctest::Approx(0.0));

  Flowf off = gt;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      off.u(y, x) += 3.0f;
      off.v(y, x) += 4.0f;
    }
  CHECK(*average_endpoint_error(off, gt) == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("endpoint error matches a brute-force loop to 1e-9") {
  Flowf est = random_flow(16, 13, 2, -3, 3);
  Flowf gt = random_flow(16, 13, 3, -3, 3);
  Tensorf mask = Tensorf::zeros({16, 13});
  Rng rng(4);
  for (auto& m : mask.data) m = rng.bernoulli(0.7) ? 1.0f : 0.0f;

  double sum = 0;
  int n = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 13; ++x) {
      if (mask.at(y, x) == 0.0f) continue;
      double du = double(est.u(y, x)) - double(gt.u(y, x));
      double dv = double(est.v(y, x)) - double(gt.v(y, x));
      sum += std::sqrt(du * du + dv * dv);
      ++n;
    }
  CHECK(*average_endpoint_error(est, gt, &mask) ==
        doctest::Approx(sum / n).epsilon(1e-9));
}

TEST_CASE("endpoint error is symmetric and absent on an empty mask") {
  Flowf a = random_flow(6, 6, 5, -1, 1);
  Flowf b = random_flow(6, 6, 6, -1, 1);
  CHECK(*average_endpoint_error(a, b) == *average_endpoint_error(b, a));
  Tensorf empty = Tensorf::zeros({6, 6});
  CHECK(!average_endpoint_error(a, b, &empty).has_value());
}

TEST_CASE("error rate needs both a 3px absolute and a 5% relative miss") {
  // zero ground truth: any 4px estimate violates both clauses
  Flowf gt0 = const_flow(8, 8, 0, 0);
  Flowf est4 = const_flow(8, 8, 4, 0);
  CHECK(*flow_error_rate(est4, gt0) == doctest::Approx(1.0));

  // huge ground truth: 4px absolute error is under 5% of 100px, so not an error
  Flowf gt100 = const_flow(8, 8, 100, 0);
  Flowf est96 = const_flow(8, 8, 96, 0);
  CHECK(*flow_error_rate(est96, gt100) == doctest::Approx(0.0));

  CHECK(*flow_error_rate(gt0, gt0) == doctest::Approx(0.0));
}

TEST_CASE("error rate grows monotonically as residuals inflate") {
  Flowf gt = random_flow(12, 12, 7, -2, 2);
  double prev = 0.0;
  for (double scale : {0.5, 2.0, 4.0, 8.0}) {
    Flowf est = gt;
    for (size_t i = 0; i < est.data.numel(); ++i)
      est.data.data[i] += float(scale) * (i % 2 ? 0.5f : -0.5f);
    double rate = *flow_error_rate(est, gt);
    CHECK(rate >= prev);
    prev = rate;
  }
  CHECK(prev > 0.0);
}

TEST_CASE("error rate matches a brute-force loop to 1e-9") {
  Flowf est = random_flow(16, 16, 8, -6, 6);
  Flowf gt = random_flow(16, 16, 9, -6, 6);
  int bad = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      double du = double(est.u(y, x)) - double(gt.u(y, x));
      double dv = double(est.v(y, x)) - double(gt.v(y, x));
      double err = std::sqrt(du * du + dv * dv);
      double mag = std::sqrt(double(gt.u(y, x)) * gt.u(y, x) +
                             double(gt.v(y, x)) * gt.v(y, x));
      if (err >= 3.0 && err >= 0.05 * mag) ++bad;
    }
  CHECK(*flow_error_rate(est, gt) == doctest::Approx(bad / 256.0).epsilon(1e-9));
}

TEST_CASE("mask transfer: perfect, disjoint, and hand-counted cases") {
  Tensorf m = Tensorf::zeros({8, 8});
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x) m.at(y, x) = 1.0f;
  Flowf zero = const_flow(8, 8, 0, 0);

  MaskTransferScore s = mask_transfer_prf(m, m, zero);
  CHECK(*s.precision == doctest::Approx(1.0));
  CHECK(*s.recall == doctest::Approx(1.0));
  CHECK(*s.f1 == doctest::Approx(1.0));

  Tensorf disjoint = Tensorf::zeros({8, 8});
  disjoint.at(0, 0) = 1.0f;
  MaskTransferScore d = mask_transfer_prf(m, disjoint, zero);
  CHECK(*d.precision == doctest::Approx(0.0));
  CHECK(*d.recall == doctest::Approx(0.0));

  // tp=2 fp=1 fn=1 by hand
  Tensorf src = Tensorf::zeros({4, 4});
  src.at(0, 0) = src.at(0, 1) = src.at(1, 0) = 1.0f;
  Tensorf tgt = Tensorf::zeros({4, 4});
  tgt.at(0, 0) = tgt.at(0, 1) = tgt.at(1, 1) = 1.0f;
  Flowf z4 = const_flow(4, 4, 0, 0);
  MaskTransferScore h = mask_transfer_prf(src, tgt, z4);
  CHECK(*h.precision == doctest::Approx(2.0 / 3.0));
  CHECK(*h.recall == doctest::Approx(2.0 / 3.0));
  CHECK(*h.f1 == doctest::Approx(2.0 / 3.0));

  // swapping the masks under zero flow swaps precision and recall
  MaskTransferScore g = mask_transfer_prf(tgt, src, z4);
  CHECK(*g.precision == doctest::Approx(*h.recall));
  CHECK(*g.recall == doctest::Approx(*h.precision));
}

TEST_CASE("mask transfer: empty target leaves recall absent") {
  Tensorf src = Tensorf::zeros({4, 4});
  src.at(1, 1) = 1.0f;
  Tensorf empty = Tensorf::zeros({4, 4});
  Flowf zero = const_flow(4, 4, 0, 0);
  MaskTransferScore s = mask_transfer_prf(src, empty, zero);
  CHECK(!s.recall.has_value());
  CHECK(!s.f1.has_value());

  // no predictions at all: precision absent
  MaskTransferScore p = mask_transfer_prf(empty, src, zero);
  CHECK(!p.precision.has_value());
}

TEST_CASE("point rmse: consistent points score zero, known residuals add up") {
  Flowf flow = const_flow(10, 10, 2, -1);
  std::vector<PointCorrespondence> pts = {
      {1, 1, 3, 0, "wall"}, {4.5, 5, 6.5, 4, "wall"}};
  PointScore s = point_rmse(pts, flow);
  CHECK(s.used == 2);
  CHECK(s.out_of_bounds == 0);
  CHECK(s.rmse_2d.at("wall") == doctest::Approx(0.0));
  CHECK(s.rmse_u_only.at("wall") == doctest::Approx(0.0));

  // one point whose horizontal displacement is off by exactly 2
  std::vector<PointCorrespondence> off = {{1, 1, 5, 0, "car"}};
  PointScore t = point_rmse(off, flow);
  CHECK(t.rmse_2d.at("car") == doctest::Approx(2.0));
  CHECK(t.rmse_u_only.at("car") == doctest::Approx(2.0));
}

TEST_CASE("point rmse: mixed categories against hand computation") {
  Flowf flow = const_flow(10, 10, 1, 0);
  std::vector<PointCorrespondence> pts = {
      {2, 2, 3, 2, "a"},   // exact
      {3, 3, 5, 3, "a"},   // u off by 1
      {4, 4, 5, 7, "b"},   // v off by 3
  };
  PointScore s = point_rmse(pts, flow);
  CHECK(s.rmse_2d.at("a") == doctest::Approx(std::sqrt(0.5)));
  CHECK(s.rmse_u_only.at("a") == doctest::Approx(std::sqrt(0.5)));
  CHECK(s.rmse_2d.at("b") == doctest::Approx(3.0));
  CHECK(s.rmse_u_only.at("b") == doctest::Approx(0.0));
}

TEST_CASE("point rmse: out-of-bounds anchors are skipped and counted") {
  Flowf flow = const_flow(6, 6, 0, 0);
  std::vector<PointCorrespondence> pts = {
      {2, 2, 2, 2, "in"}, {-1, 2, 0, 2, "out"}, {2, 9, 2, 9, "out"}};
  PointScore s = point_rmse(pts, flow);
  CHECK(s.used == 1);
  CHECK(s.out_of_bounds == 2);
  CHECK(s.rmse_2d.count("out") == 0);
}

TEST_CASE("evaluate_pair wires annotations through to the right metrics") {
  Imagef base = generate_base_image(24, 24, 10);
  FlowSpec fspec;
  fspec.kind = FlowSpec::Kind::Constant;
  fspec.tx = 2.0;
  SpectralTransform tr;
  PairSample s = generate_pair(base, fspec, tr, 11);
  PairMetrics m = evaluate_pair(s, *s.gt_flow);
  CHECK(*m.aee == doctest::Approx(0.0));
  CHECK(*m.error_rate == doctest::Approx(0.0));
  CHECK(*m.zero_flow_aee == doctest::Approx(2.0));

  Flowf zero = const_flow(24, 24, 0, 0);
  PairMetrics mz = evaluate_pair(s, zero);
  CHECK(*mz.aee == doctest::Approx(2.0));
}

TEST_CASE("emit_report writes csvs and renderings for each pair") {
  TempDir tmp;
  Flowf f = const_flow(8, 8, 1, 1);
  Flowf gt = const_flow(8, 8, 1, 0);
  PairMetrics m;
  m.pair_id = "p1";
  m.aee = 1.0;
  m.error_rate = 0.0;
  emit_report(tmp.str(), {m}, {{"p1", f}}, {gt});
  CHECK(fs::exists(tmp.path / "per_pair.csv"));
  CHECK(fs::exists(tmp.path / "aggregate.csv"));
  CHECK(fs::exists(tmp.path / "vis" / "p1_flow.png"));
  CHECK(fs::exists(tmp.path / "vis" / "p1_err.png"));
}

TEST_CASE("zero motion renders as near-white, large errors as the hottest pixels") {
  Flowf zero = const_flow(8, 8, 0, 0);
  Imagef img = flow_to_color(zero, 4.0);
  for (size_t i = 0; i < img.data.numel(); ++i)
    CHECK(img.data.data[i] ==
          doctest::Approx(1.0).epsilon(0.05));

  Flowf est = const_flow(8, 8, 0, 0);
  Flowf gt = const_flow(8, 8, 0, 0);
  est.u(3, 4) = 10.0f;  // one large endpoint error
  Imagef heat = error_heatmap(est, gt, 5.0);
  // the hottest pixel (strongest red, weakest blue) must be the injected one
  double best = -1;
  int by = -1, bx = -1;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double score = heat.data.at(0, y, x) - heat.data.at(2, y, x);
      if (score > best) {
        best = score;
        by = y;
        bx = x;
      }
    }
  CHECK(by == 3);
  CHECK(bx == 4);
}
