#include <algorithm>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "mao/legrad.hpp"
#include "mao/synthbench.hpp"

using namespace mao;
using doctest::Approx;

TEST_CASE("layer relevance examples") {
  const Tensor g({1, 2, 2}, {1, -1, 3, 0});
  const auto r = layer_relevance(g);
  REQUIRE(r.size() == 2);
  CHECK(r[0] == Approx(2.0));
  CHECK(r[1] == Approx(0.0));

  Tensor neg({2, 3, 3}, -1.0);
  for (double v : layer_relevance(neg)) CHECK(v == 0.0);

  Tensor doubled = g;
  for (auto& v : doubled.data) v *= 2.0;
  const auto r2 = layer_relevance(doubled);
  CHECK(r2[0] == Approx(2.0 * r[0]));
  CHECK_THROWS_AS(layer_relevance(Tensor({2, 3})), Error);
}

TEST_CASE("relevance to patch map drops the CLS entry") {
  const std::vector<double> rel{100.0, 1.0, 2.0, 3.0, 5.0};
  const auto map = relevance_to_patch_map(rel, 2, "x");
  CHECK(map.rows == 2);
  CHECK(map.crop_id == "x");
  CHECK(map.at(0, 0) == Approx(0.0));
  CHECK(map.at(0, 1) == Approx(0.25));
  CHECK(map.at(1, 1) == Approx(1.0));
  CHECK_THROWS_AS(relevance_to_patch_map(rel, 3), Error);
}

TEST_CASE("explainability map shape and scale invariance") {
  const auto w = init_encoder({});
  const auto crop = testing::random_image(1, 32);
  Rng rng(5);
  const Vector ref = testing::random_vector(rng, 64);
  const auto a = explainability_map(w, crop, ref);
  CHECK(a.rows == 4);
  CHECK(a.cols == 4);
  for (double s : {1e-3, 7.0, 1e4}) {
    const auto b = explainability_map(w, crop, Vector(ref * s));
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(std::abs(a.values[i] - b.values[i]) <= 1e-9);
  }
  const double lo = *std::min_element(a.values.begin(), a.values.end());
  const double hi = *std::max_element(a.values.begin(), a.values.end());
  CHECK(lo == 0.0);
  CHECK(hi == Approx(1.0));
}

TEST_CASE("reference with no positive attention gradient gives a zero map") {
  // A reference parallel to the crop's own descriptor: every Jacobian column
  // is orthogonal to the unit descriptor, so all attention gradients vanish
  // up to rounding and the ReLU sum is (numerically) flat.
  const auto w = init_encoder({});
  const auto crop = testing::random_image(2, 32);
  const auto r = encode(w, crop);
  const auto grads = attention_gradient(w, r.trace, r.descriptor);
  double worst = 0.0;
  for (const auto& g : grads)
    for (double v : g.data) worst = std::max(worst, std::abs(v));
  CHECK(worst < 1e-12);

  // Negated gradients everywhere: an exactly zero relevance vector.
  std::vector<double> zero(17, 0.0);
  for (double v : relevance_to_patch_map(zero, 4).values) CHECK(v == 0.0);
}

TEST_CASE("explainability peaks on a bright object") {
  // One bright sprite on black in a corner of the crop. The reference is the
  // descriptor of the same sprite filling a whole crop: the crop's own
  // descriptor would give a zero gradient (see above).
  int inside = 0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    EncoderConfig c;
    c.seed = static_cast<std::uint64_t>(t);
    const auto w = init_encoder(c);
    const int id = 100 + 37 * t;
    ImageGrid crop(32, 32, 3, 0.0);
    const auto sprite = render_sprite(id, 16);
    const int ox = (t % 2) * 16, oy = ((t / 2) % 2) * 16;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int ch = 0; ch < 3; ++ch) crop.at(ox + x, oy + y, ch) = sprite.at(x, y, ch);
    const Vector ref = encode(w, render_sprite(id, 32)).descriptor;
    const auto map = explainability_map(w, crop, ref);
    const auto best = static_cast<int>(std::max_element(map.values.begin(), map.values.end()) - map.values.begin());
    const int r = best / 4, col = best % 4;
    if (r >= oy / 8 && r < oy / 8 + 2 && col >= ox / 8 && col < ox / 8 + 2) ++inside;
  }
  MESSAGE("argmax inside the object footprint on " << inside << "/" << trials << " random encoders");
  // Chance level is 4/16 of the cells.
  CHECK(inside >= trials / 2);
}

TEST_CASE("patch map text dump") {
  PatchMap m;
  m.rows = 1;
  m.cols = 2;
  m.values = {0.5, 1.0};
  std::ostringstream out;
  write_patch_map(out, m);
  CHECK(out.str() == "1 2\n0.5 1\n");
}
