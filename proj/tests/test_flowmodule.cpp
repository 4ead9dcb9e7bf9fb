#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "cspec/flow_module.hpp"
#include "testutil.hpp"

using namespace cspec;

namespace {

SigmaConfig tiny_config(uint64_t seed = 3) {
  SigmaConfig cfg;
  cfg.spectra = {{"rgb", 3}, {"fir", 1}};
  cfg.enc_widths = {4, 6, 8, 8, 8, 8};
  cfg.est_widths = {8, 8, 6};
  cfg.radius = 2;
  cfg.seed = seed;
  return cfg;
}

ImageTensor<double> random_image(int c, int h, int w, const std::string& spectrum,
                                 uint64_t seed) {
  return ImageTensor<double>(testutil::random_tensor({c, h, w}, seed, 0, 1), spectrum);
}

}  // namespace

TEST_CASE("encoder produces 6 pyramid levels halving each time") {
  SigmaConfig cfg = tiny_config();
  SigmaModel<double> model(cfg);
  auto pyr = model.encode("rgb", make_const(random_image(3, 128, 128, "rgb", 1).data));
  REQUIRE(pyr.levels.size() == 6);
  int expect[6] = {64, 32, 16, 8, 4, 2};
  for (int i = 0; i < 6; ++i) {
    CHECK(pyr.levels[size_t(i)]->value.size(1) == expect[i]);
    CHECK(pyr.levels[size_t(i)]->value.size(2) == expect[i]);
    CHECK(pyr.levels[size_t(i)]->value.size(0) == cfg.enc_widths[size_t(i)]);
  }
}

TEST_CASE("non-power-of-two inputs follow the ceil-halving rule") {
  SigmaModel<double> model(tiny_config());
  auto pyr = model.encode("rgb", make_const(random_image(3, 100, 75, "rgb", 2).data));
  int hs[6] = {50, 25, 13, 7, 4, 2};
  int ws[6] = {38, 19, 10, 5, 3, 2};
  for (int i = 0; i < 6; ++i) {
    CHECK(pyr.levels[size_t(i)]->value.size(1) == hs[i]);
    CHECK(pyr.levels[size_t(i)]->value.size(2) == ws[i]);
  }
}

TEST_CASE("two encoders hold independent parameters") {
  SigmaConfig cfg = tiny_config();
  cfg.spectra = {{"s1", 3}, {"s2", 3}};
  SigmaModel<double> model(cfg);
  Tensord img = testutil::random_tensor({3, 64, 64}, 4, 0, 1);

  // Both encoders start from the same initialization, so identical inputs
  // map to identical pyramids until training moves them apart.
  auto p1 = model.encode("s1", make_const(img));
  auto p2 = model.encode("s2", make_const(img));
  double diff0 = 0;
  for (size_t i = 0; i < p1.levels[0]->value.numel(); ++i)
    diff0 += std::abs(p1.levels[0]->value.data[i] - p2.levels[0]->value.data[i]);
  CHECK(diff0 == doctest::Approx(0.0));

  // Perturbing one encoder's parameters must not affect the other.
  for (auto& [name, p] : model.named_parameters())
    if (name.rfind("encoder.s1.", 0) == 0)
      for (auto& v : p->value.data) v += 0.05;
  auto q1 = model.encode("s1", make_const(img));
  auto q2 = model.encode("s2", make_const(img));
  double d1 = 0, d2 = 0;
  for (size_t i = 0; i < q1.levels[0]->value.numel(); ++i) {
    d1 += std::abs(q1.levels[0]->value.data[i] - p1.levels[0]->value.data[i]);
    d2 += std::abs(q2.levels[0]->value.data[i] - p2.levels[0]->value.data[i]);
  }
  CHECK(d1 > 1e-6);
  CHECK(d2 == doctest::Approx(0.0));
}

TEST_CASE("self-correlation peaks at zero displacement in the interior") {
  Tensord f = testutil::random_tensor({4, 8, 8}, 5, -1, 1);
  Var<double> cv = cost_volume(make_const(f), make_const(f), 2);
  int n = 5;  // 2r+1
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x) {
      int best = 0;
      double best_v = -1e30;
      for (int d = 0; d < n * n; ++d)
        if (cv->value.at(d, y, x) > best_v) {
          best_v = cv->value.at(d, y, x);
          best = d;
        }
      CHECK(best == (n * n) / 2);  // center displacement (0,0)
    }
}

TEST_CASE("correlation of shifted features peaks at the shift") {
  // content shifted one pixel to the right: wrp(y,x) = ref(y,x-1), so the
  // matching displacement is (dx=1, dy=0)
  Tensord ref = testutil::random_tensor({3, 10, 10}, 6, -1, 1);
  Tensord wrp = Tensord::zeros({3, 10, 10});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 10; ++y)
      for (int x = 1; x < 10; ++x) wrp.at(c, y, x) = ref.at(c, y, x - 1);
  Var<double> cv = cost_volume(make_const(ref), make_const(wrp), 2);
  // brute-force oracle at an interior pixel
  int y = 5, x = 5, n = 5, best = 0;
  double best_v = -1e30;
  for (int d = 0; d < n * n; ++d)
    if (cv->value.at(d, y, x) > best_v) {
      best_v = cv->value.at(d, y, x);
      best = d;
    }
  int dy = best / n - 2, dx = best % n - 2;
  CHECK(dy == 0);
  CHECK(dx == 1);
  // value oracle: cosine similarity of the two feature vectors, scaled by the
  // correlation op's channel mean
  double dot = 0, na = 0, nb = 0;
  for (int c = 0; c < 3; ++c) {
    dot += ref.at(c, y, x) * wrp.at(c, y, x + 1);
    na += ref.at(c, y, x) * ref.at(c, y, x);
    nb += wrp.at(c, y, x + 1) * wrp.at(c, y, x + 1);
  }
  double direct = dot / std::sqrt(na * nb) / 3.0;
  CHECK(cv->value.at(2 * n + 3, y, x) == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("forward pass returns finite flow at the exact input resolution") {
  SigmaModel<double> model(tiny_config());
  for (auto [h, w] : {std::pair{128, 128}, std::pair{100, 75}, std::pair{65, 97}}) {
    auto a = random_image(3, h, w, "rgb", 7);
    auto b = random_image(1, h, w, "fir", 8);
    FlowField<double> f = model.sigma_forward(a, b);
    CHECK(f.data.shape == std::vector<int>{2, h, w});
    CHECK(f.data.all_finite());
  }
}

TEST_CASE("parameters partition into the two encoders plus the decoder") {
  SigmaModel<double> model(tiny_config());
  auto params = model.named_parameters();
  std::set<std::string> names;
  size_t enc_rgb = 0, enc_fir = 0, dec = 0;
  for (const auto& [name, p] : params) {
    CHECK(names.insert(name).second);  // no duplicates
    if (name.rfind("encoder.rgb.", 0) == 0) ++enc_rgb;
    else if (name.rfind("encoder.fir.", 0) == 0) ++enc_fir;
    else if (name.rfind("decoder.", 0) == 0) ++dec;
    else FAIL("parameter outside the three groups: " << name);
  }
  CHECK(enc_rgb > 0);
  CHECK(enc_fir > 0);
  CHECK(dec > 0);
  CHECK(enc_rgb + enc_fir + dec == params.size());
}

TEST_CASE("unknown spectrum tag raises a configuration error") {
  SigmaModel<double> model(tiny_config());
  auto a = random_image(3, 64, 64, "rgb", 9);
  auto b = random_image(1, 64, 64, "nir", 10);
  CHECK_THROWS_AS(model.sigma_forward(a, b), ConfigError);
}

TEST_CASE("mutating transpose-conv upsampler parameters changes the output") {
  SigmaModel<double> model(tiny_config());
  auto a = random_image(3, 64, 64, "rgb", 11);
  auto b = random_image(1, 64, 64, "fir", 12);
  FlowField<double> before = model.sigma_forward(a, b);
  for (auto& [name, p] : model.named_parameters())
    if (name.find(".up.") != std::string::npos && name.back() == 'w')
      for (auto& v : p->value.data) v += 0.05;
  FlowField<double> after = model.sigma_forward(a, b);
  double diff = 0;
  for (size_t i = 0; i < before.data.numel(); ++i)
    diff += std::abs(before.data.data[i] - after.data.data[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("forward passes are deterministic") {
  SigmaModel<double> m1(tiny_config(42)), m2(tiny_config(42));
  auto a = random_image(3, 70, 66, "rgb", 13);
  auto b = random_image(1, 70, 66, "fir", 14);
  FlowField<double> f1 = m1.sigma_forward(a, b);
  FlowField<double> f2 = m2.sigma_forward(a, b);
  for (size_t i = 0; i < f1.data.numel(); ++i)
    CHECK(f1.data.data[i] == f2.data.data[i]);
}

TEST_CASE("config round-trips through json") {
  SigmaConfig cfg = tiny_config(99);
  SigmaConfig back = SigmaConfig::from_json(cfg.to_json());
  CHECK(back.enc_widths == cfg.enc_widths);
  CHECK(back.est_widths == cfg.est_widths);
  CHECK(back.radius == cfg.radius);
  CHECK(back.seed == cfg.seed);
  CHECK(back.spectra.size() == 2);
}
