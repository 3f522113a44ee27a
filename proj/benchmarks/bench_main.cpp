#include <benchmark/benchmark.h>

#include "mao/pipeline.hpp"

using namespace mao;

namespace {

Vector unit_vector(Rng& rng, int d) {
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.normal();
  return v / v.norm();
}

ImageGrid noise_image(std::uint64_t seed, int side) {
  Rng rng(seed);
  ImageGrid img(side, side, 3);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

Index random_index(int n, int d, Rng& rng) {
  std::vector<GalleryRecord> records;
  for (int i = 0; i < n; ++i) records.push_back({"g" + std::to_string(100000 + i), unit_vector(rng, d), {}});
  return build_index(std::move(records));
}

// Shared scene: one 256px gallery image with eight objects and the
// refinement problem built from its ground-truth regions.
struct SceneSetup {
  WeightStore weights = init_encoder({});
  Encoder encoder{weights};
  Scene scene;
  MaoInput input;

  SceneSetup() {
    SceneSpec spec;
    for (int i = 0; i < 8; ++i) spec.instances.push_back(50 + 7 * i);
    spec.seed = 3;
    spec.background_seed = 4;
    scene = generate_scene(spec);
    input = prepare_mao_input(encoder, select_and_crop(scene.image, scene.objects, 0.2, 32));
  }
};

const SceneSetup& scene_setup() {
  static const SceneSetup s;
  return s;
}

}  // namespace

static void BM_SearchBatch(benchmark::State& state) {
  Rng rng(1);
  const auto index = random_index(1581, 64, rng);
  Matrix queries(state.range(0), 64);
  for (Eigen::Index q = 0; q < queries.rows(); ++q) queries.row(q) = unit_vector(rng, 64).transpose();
  for (auto _ : state) benchmark::DoNotOptimize(index.search_batch(queries));
  state.SetItemsProcessed(state.iterations() * queries.rows());
}
BENCHMARK(BM_SearchBatch)->Arg(2000)->Unit(benchmark::kMillisecond);

static void BM_SearchTopK(benchmark::State& state) {
  Rng rng(2);
  const auto index = random_index(1581, 64, rng);
  const Vector q = unit_vector(rng, 64);
  for (auto _ : state) benchmark::DoNotOptimize(index.search(q, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_SearchTopK)->Arg(10)->Arg(0);

static void BM_Encode(benchmark::State& state) {
  const auto weights = init_encoder({});
  const Encoder enc(weights);
  const auto crop = noise_image(5, 32);
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(crop));
}
BENCHMARK(BM_Encode);

static void BM_AttentionGradient(benchmark::State& state) {
  const auto weights = init_encoder({});
  const auto trace = encode(weights, noise_image(6, 32)).trace;
  Rng rng(7);
  const Vector ref = unit_vector(rng, 64);
  for (auto _ : state) benchmark::DoNotOptimize(attention_gradient(weights, trace, ref));
}
BENCHMARK(BM_AttentionGradient);

static void BM_AttentionJacobian(benchmark::State& state) {
  const auto weights = init_encoder({});
  const auto trace = encode(weights, noise_image(8, 32)).trace;
  for (auto _ : state) benchmark::DoNotOptimize(attention_jacobian(weights, trace));
}
BENCHMARK(BM_AttentionJacobian)->Unit(benchmark::kMicrosecond);

static void BM_RefinementObjective(benchmark::State& state) {
  const auto& s = scene_setup();
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_objective(s.input.init, s.input.bundle, 0.03, true));
}
BENCHMARK(BM_RefinementObjective)->Unit(benchmark::kMicrosecond);

static void BM_Refine80(benchmark::State& state) {
  const auto& s = scene_setup();
  for (auto _ : state) benchmark::DoNotOptimize(refine_descriptor(s.input.bundle, s.input.init, {}));
}
BENCHMARK(BM_Refine80)->Unit(benchmark::kMillisecond);

static void BM_DescribeMao(benchmark::State& state) {
  const auto& s = scene_setup();
  ManifestRecord rec;
  rec.image = "scene";
  rec.objects = s.scene.objects;
  PipelineConfig pc;
  pc.regions = RegionSource::Manifest;
  for (auto _ : state) benchmark::DoNotOptimize(describe_image(s.encoder, s.scene.image, rec, pc));
}
BENCHMARK(BM_DescribeMao)->Unit(benchmark::kMillisecond);

static void BM_ProposeRegions(benchmark::State& state) {
  const auto& s = scene_setup();
  for (auto _ : state) benchmark::DoNotOptimize(propose_regions(s.scene.image));
}
BENCHMARK(BM_ProposeRegions)->Unit(benchmark::kMicrosecond);

static void BM_InfoNce(benchmark::State& state) {
  const auto b = static_cast<Eigen::Index>(state.range(0));
  Rng rng(9);
  Matrix sim(b, b);
  for (Eigen::Index i = 0; i < sim.size(); ++i) sim.data()[i] = 2.0 * rng.uniform() - 1.0;
  for (auto _ : state) benchmark::DoNotOptimize(info_nce_with_gradient(sim, 0.07));
}
BENCHMARK(BM_InfoNce)->Arg(16)->Arg(128);
BENCHMARK_MAIN();
