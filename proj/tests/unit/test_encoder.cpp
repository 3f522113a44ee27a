#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "mao/encoder.hpp"

using namespace mao;
using doctest::Approx;
namespace fs = std::filesystem;

TEST_CASE("default configuration sizes") {
  EncoderConfig c;
  CHECK(c.tokens() == 17);
  CHECK(c.head_dim() == 32);
  CHECK(c.grid_side() == 4);
  EncoderConfig bad;
  bad.embed_dim = 63;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.image_side = 30;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("init is deterministic per seed") {
  EncoderConfig c;
  c.seed = 7;
  const auto a = init_encoder(c);
  const auto b = init_encoder(c);
  CHECK(serialize_weights(a) == serialize_weights(b));
  c.seed = 8;
  CHECK(serialize_weights(init_encoder(c)) != serialize_weights(a));
  CHECK(a.get("cls_token").size() == 64);
  CHECK_THROWS_AS(a.get("nope"), Error);
}

TEST_CASE("descriptor is unit norm, deterministic and input sensitive") {
  const auto w = init_encoder({});
  const Encoder enc(w);
  auto img = testing::random_image(3, 32);
  const auto r1 = enc.encode(img);
  const auto r2 = enc.encode(img);
  CHECK(r1.descriptor.norm() == Approx(1.0).epsilon(1e-12));
  CHECK(r1.descriptor == r2.descriptor);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) img.at(x, y, 0) = 1.0 - img.at(x, y, 0);
  CHECK((enc.encode(img).descriptor - r1.descriptor).norm() > 0.0);
  CHECK(encode(w, testing::random_image(3, 32)).descriptor == r1.descriptor);
}

TEST_CASE("wrong crop size is rejected") {
  const auto w = init_encoder({});
  CHECK_THROWS_AS(encode(w, testing::random_image(1, 31)), Error);
}

TEST_CASE("attention rows sum to one") {
  const auto w = init_encoder({});
  const auto r = encode(w, testing::random_image(4, 32));
  for (int l = 0; l < 2; ++l) {
    const Tensor a = r.trace.attention_map(l);
    REQUIRE(a.shape == std::vector<std::size_t>{2, 17, 17});
    for (std::size_t row = 0; row < 2 * 17; ++row) {
      double s = 0.0;
      for (std::size_t j = 0; j < 17; ++j) {
        const double v = a[row * 17 + j];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(s == Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto w = init_encoder(testing::small_config(seed));
    const Encoder enc(w);
    const auto crop = testing::random_image(seed + 50, 16);
    const auto r = enc.encode(crop);
    Rng rng(seed);
    const Vector dir = testing::random_vector(rng, 16, 2.5);
    const auto grads = attention_gradient(w, r.trace, dir);
    REQUIRE(grads.size() == 2);
    for (int l = 0; l < 2; ++l) {
      const auto fd = testing::fd_attention_gradient(enc, crop, r.trace, l, dir);
      CHECK(relative_error(grads[static_cast<std::size_t>(l)].values(), fd) < 1e-4);
    }
  }
}

TEST_CASE("attention gradient is linear in the unit direction") {
  const auto w = init_encoder(testing::small_config(1));
  const auto r = encode(w, testing::random_image(9, 16));
  Rng rng(2);
  const Vector a = testing::random_vector(rng, 16);
  const Vector b = testing::random_vector(rng, 16);
  const Vector mix = 0.3 * a + 0.7 * b;
  const auto ga = attention_gradient(w, r.trace, a);
  const auto gb = attention_gradient(w, r.trace, b);
  // Direction scale is normalized away; the gradient of <u, v> is linear in u.
  const auto gm = attention_gradient(w, r.trace, mix * 4.0);
  const double scale = 1.0 / mix.norm();
  for (std::size_t l = 0; l < ga.size(); ++l) {
    for (std::size_t i = 0; i < ga[l].size(); ++i) {
      CHECK(gm[l][i] == Approx(scale * (0.3 * ga[l][i] + 0.7 * gb[l][i])).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(attention_gradient(w, r.trace, Vector::Zero(16)), Error);
}

TEST_CASE("jacobian shape and factorization") {
  EncoderConfig c;
  c.image_side = 16;
  c.patch_side = 8;
  c.layers = 1;
  c.heads = 1;
  c.embed_dim = 8;
  const auto w = init_encoder(c);
  const auto r = encode(w, testing::random_image(5, 16));
  const auto jac = attention_jacobian(w, r.trace);
  REQUIRE(jac.size() == 1);
  CHECK(jac[0].rows() == 8);
  CHECK(jac[0].cols() == 25);

  const auto w2 = init_encoder({});
  const auto r2 = encode(w2, testing::random_image(6, 32));
  const auto j2 = attention_jacobian(w2, r2.trace);
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const Vector u = testing::random_vector(rng, 64);
    const auto direct = attention_gradient(w2, r2.trace, u);
    for (std::size_t l = 0; l < j2.size(); ++l) {
      const Vector uj = j2[l].transpose() * u;
      double dev = 0.0;
      for (std::size_t i = 0; i < direct[l].size(); ++i) dev = std::max(dev, std::abs(uj[static_cast<Eigen::Index>(i)] - direct[l][i]));
      CHECK(dev < 1e-10);
    }
  }
}

TEST_CASE("jacobian columns are orthogonal to the descriptor") {
  const auto w = init_encoder({});
  const auto r = encode(w, testing::random_image(8, 32));
  for (const auto& j : attention_jacobian(w, r.trace)) {
    CHECK((j.transpose() * r.descriptor).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("parameter gradients match finite differences") {
  auto w = init_encoder(testing::small_config(3));
  add_adapters(w, 2, 3);
  // Non-zero B so that the A factors receive gradient too.
  Rng rng(11);
  for (auto& [name, t] : w.tensors)
    if (name.find("lora_b") != std::string::npos)
      for (auto& v : t.data) v = 0.1 * rng.normal();
  const auto crop = testing::random_image(12, 16);
  const Vector dir = testing::random_vector(rng, 16);
  const Matrix seeds = dir.transpose();
  const Encoder enc(w);
  const auto back = enc.backward(enc.encode(crop).trace, seeds, false, true);
  for (const auto& name : trainable_tensor_names(w)) {
    const auto& analytic = back.params.at(name);
    auto f = [&](std::span<const double> x) {
      WeightStore p = w;
      p.get(name).data.assign(x.begin(), x.end());
      return dir.dot(Encoder(p).encode(crop).descriptor);
    };
    const auto fd = finite_difference_gradient(f, w.get(name).values(), 1e-6);
    CHECK_MESSAGE(relative_error(analytic.values(), fd) < 1e-5, name);
  }
}

TEST_CASE("full fine-tune gradients cover every tensor") {
  const auto w = init_encoder(testing::small_config(5));
  const auto names = trainable_tensor_names(w);
  CHECK(names.size() == w.tensors.size());
  const Encoder enc(w);
  Rng rng(1);
  const auto crop = testing::random_image(13, 16);
  const Vector dir = testing::random_vector(rng, 16);
  const auto back = enc.backward(enc.encode(crop).trace, dir.transpose(), false, true);
  for (const char* name : {"patch_embed.weight", "blocks.0.mlp.fc1.weight", "blocks.1.attn.q.weight", "norm.weight", "pos_embed", "cls_token"}) {
    REQUIRE(w.has(name));
    const auto& analytic = back.params.at(name);
    auto f = [&](std::span<const double> x) {
      WeightStore p = w;
      p.get(name).data.assign(x.begin(), x.end());
      return dir.dot(Encoder(p).encode(crop).descriptor);
    };
    CHECK_MESSAGE(relative_error(analytic.values(), finite_difference_gradient(f, w.get(name).values(), 1e-6)) < 1e-5,
                  name);
  }
}

TEST_CASE("zero-initialized adapters keep the base function") {
  const auto base = init_encoder({});
  auto adapted = base;
  add_adapters(adapted, 4, 1);
  CHECK(adapted.has_adapters());
  const auto names = trainable_tensor_names(adapted);
  CHECK(names.size() == 2 * 4 * 2);
  const auto img = testing::random_image(2, 32);
  CHECK(encode(base, img).descriptor == encode(adapted, img).descriptor);
  CHECK_THROWS_AS(add_adapters(adapted, 4, 1), Error);
}

TEST_CASE("weights file round trips byte-identically") {
  auto w = init_encoder({});
  add_adapters(w, 4, 2);
  const auto dir = fs::temp_directory_path() / "mao_test_weights";
  fs::create_directories(dir);
  persist_weights(w, dir / "a.maow");
  const auto loaded = load_weights(dir / "a.maow");
  CHECK(loaded == w);
  persist_weights(loaded, dir / "b.maow");
  std::ifstream a(dir / "a.maow", std::ios::binary), b(dir / "b.maow", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(loaded.adapter_rank == 4);
}

TEST_CASE("truncated weights are rejected") {
  const auto bytes = serialize_weights(init_encoder({}));
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(deserialize_weights(part), Error);
  }
}
