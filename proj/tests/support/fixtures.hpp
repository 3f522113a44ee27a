#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "mao/pipeline.hpp"

namespace mao::testing {

inline ImageGrid random_image(std::uint64_t seed, int side, int channels = 3) {
  Rng rng(seed);
  ImageGrid img(side, side, channels);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

inline Vector random_vector(Rng& rng, int d, double scale = 1.0) {
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  return v / v.norm() * scale;
}

inline std::vector<double> as_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline EncoderConfig small_config(std::uint64_t seed) {
  EncoderConfig c;
  c.image_side = 16;
  c.patch_side = 8;
  c.layers = 2;
  c.heads = 2;
  c.embed_dim = 16;
  c.seed = seed;
  return c;
}

// Binary patch map with one random axis-aligned rectangle switched on.
inline PatchMap random_rect_mask(Rng& rng, int grid) {
  PatchMap m;
  m.rows = m.cols = grid;
  m.values.assign(static_cast<std::size_t>(grid * grid), 0.0);
  const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid)));
  const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(grid)));
  const int r1 = r0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(grid - r0)));
  const int c1 = c0 + static_cast<int>(rng.below(static_cast<std::uint64_t>(grid - c0)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) m.values[static_cast<std::size_t>(r * grid + c)] = 1.0;
  return m;
}

// Encoder plus a bundle of random crops with rectangular masks. The weights
// live on the heap because Encoder keeps a pointer to them.
struct BundleFixture {
  std::unique_ptr<WeightStore> weights;
  std::unique_ptr<Encoder> encoder;
  CropBundle bundle;
  Vector init;
};

inline BundleFixture make_bundle_fixture(std::uint64_t seed, int crops, const EncoderConfig& base = {}) {
  BundleFixture f;
  EncoderConfig config = base;
  config.seed = seed;
  f.weights = std::make_unique<WeightStore>(init_encoder(config));
  f.encoder = std::make_unique<Encoder>(*f.weights);
  Rng rng(derive_seed(seed, 99));
  std::vector<CropEntry> entries;
  f.init = Vector::Zero(config.embed_dim);
  for (int i = 0; i < crops; ++i) {
    const auto encoded = f.encoder->encode(random_image(derive_seed(seed, static_cast<std::uint64_t>(i)),
                                                        config.image_side, config.channels));
    entries.push_back(prepare_crop(*f.encoder, encoded, random_rect_mask(rng, config.grid_side()),
                                   "obj" + std::to_string(i)));
    f.init += encoded.trace.cls_out;
  }
  f.init /= crops;
  f.bundle = make_bundle(config, std::move(entries));
  return f;
}

// A single synthetic scene with ground-truth crops, as the pipeline sees it.
struct SceneFixture {
  std::unique_ptr<WeightStore> weights;
  std::unique_ptr<Encoder> encoder;
  Scene scene;
  std::vector<SelectedCrop> selected;
  MaoInput input;
};

inline SceneFixture make_scene_fixture(std::uint64_t seed, int objects, double ratio, int resolution = 128) {
  SceneFixture f;
  EncoderConfig config;
  config.seed = derive_seed(seed, 1);
  f.weights = std::make_unique<WeightStore>(init_encoder(config));
  f.encoder = std::make_unique<Encoder>(*f.weights);
  SceneSpec spec;
  spec.resolution = resolution;
  for (int i = 0; i < objects; ++i) spec.instances.push_back(static_cast<int>(derive_seed(seed, 10 + i) % 4000));
  spec.target_ratio = ratio;
  spec.seed = derive_seed(seed, 2);
  spec.background_seed = derive_seed(seed, 3);
  f.scene = generate_scene(spec);
  f.selected = select_and_crop(f.scene.image, f.scene.objects, 0.2, config.image_side);
  f.input = prepare_mao_input(*f.encoder, f.selected);
  return f;
}

// Central differences of cosine(direction, v) with respect to every entry of
// A^layer, re-running the forward pass from the perturbed attention maps.
inline std::vector<double> fd_attention_gradient(const Encoder& encoder, const ImageGrid& crop,
                                                 const AttentionTrace& trace, int layer,
                                                 const Vector& direction, double h = 1e-6) {
  const Tensor base = trace.attention_map(layer);
  auto f = [&](std::span<const double> x) {
    AttentionOverride o{layer, Tensor(base.shape, std::vector<double>(x.begin(), x.end()))};
    return cosine_similarity(direction, encoder.encode(crop, o).descriptor);
  };
  return finite_difference_gradient(f, base.values(), h);
}

// Same, restricted to the listed flat entries of A^layer.
inline std::vector<double> fd_attention_entries(const Encoder& encoder, const ImageGrid& crop,
                                                const AttentionTrace& trace, int layer,
                                                const Vector& direction,
                                                const std::vector<std::size_t>& entries, double h = 1e-6) {
  const Tensor base = trace.attention_map(layer);
  std::vector<double> out;
  for (std::size_t k : entries) {
    auto eval = [&](double delta) {
      AttentionOverride o{layer, base};
      o.maps.data[k] += delta;
      return cosine_similarity(direction, encoder.encode(crop, o).descriptor);
    };
    out.push_back((eval(h) - eval(-h)) / (2.0 * h));
  }
  return out;
}

}  // namespace mao::testing
