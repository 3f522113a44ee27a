#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "mao/pipeline.hpp"

using namespace mao;
using doctest::Approx;

namespace {

BenchmarkParams tiny_params(std::uint64_t seed) {
  BenchmarkParams p;
  p.n_instances = 4;
  p.gallery_size = 8;
  p.queries_per_instance = 1;
  p.n_train_instances = 3;
  p.train_gallery_size = 6;
  p.distractor_pool = 20;
  p.resolution = 128;
  p.min_objects = 3;
  p.max_objects = 4;
  p.seed = seed;
  return p;
}

PipelineConfig with_mode(DescriptorMode m) {
  PipelineConfig c;
  c.mode = m;
  c.regions = RegionSource::Manifest;
  return c;
}

RecordDescriptor described(const std::string& id, Vector d) {
  RecordDescriptor r;
  r.id = id;
  r.descriptor = std::move(d);
  return r;
}

// Expected AP of a uniformly random ranking of n items with r relevant.
double random_ap(int n, int r) {
  double h = 0.0;
  for (int k = 1; k <= n; ++k) h += 1.0 / k;
  if (n == 1) return 1.0;
  return (h + (r - 1.0) / (n - 1.0) * (n - h)) / n;
}

}  // namespace

TEST_CASE("mode names") {
  for (auto m : kAllModes) CHECK(parse_mode(mode_name(m)) == m);
  CHECK(mode_name(DescriptorMode::StageAAvg) == "stage-a-avg");
  CHECK_THROWS_AS(parse_mode("nope"), Error);
}

TEST_CASE("whole-image and averaged descriptors") {
  const auto bench = generate_benchmark(tiny_params(1));
  const auto weights = init_encoder({});
  const Encoder enc(weights);
  const auto& rec = *bench.test.manifest.gallery()[0];
  const auto image = bench.test.render(rec.image);

  const auto whole = describe_image(enc, image, rec, with_mode(DescriptorMode::WholeImage));
  CHECK(whole.descriptor == enc.encode(resize_area(image, 32, 32)).descriptor);

  const auto avg = describe_image(enc, image, rec, with_mode(DescriptorMode::StageAAvg));
  const auto selected = select_and_crop(image, rec.objects, 0.2, 32);
  std::vector<Descriptor> ds;
  for (const auto& s : selected) ds.push_back(enc.encode(s.crop).descriptor);
  CHECK(avg.crops == static_cast<int>(rec.objects.size()));
  CHECK(avg.descriptor == average_pool_objects(ds));
  CHECK(describe_image(enc, image, rec, with_mode(DescriptorMode::Gem)).descriptor == gem_pool(ds, 3.0));
}

TEST_CASE("refined descriptors differ from the average") {
  int differ = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = testing::make_scene_fixture(seed, 3, 0.01);
    const auto r = refine_descriptor(f.input.bundle, f.input.init, {});
    std::vector<Descriptor> ds;
    for (const auto& e : f.input.bundle.entries) ds.push_back(e.descriptor);
    const Descriptor avg = average_pool_objects(ds);
    ++total;
    if ((r.descriptor - avg).norm() > 1e-9) ++differ;
  }
  CHECK(differ * 100 >= 95 * total);
}

TEST_CASE("mao input holds masks and the raw-feature init") {
  const auto f = testing::make_scene_fixture(4, 3, 0.01);
  REQUIRE(f.input.bundle.entries.size() == f.selected.size());
  Vector mean = Vector::Zero(64);
  for (const auto& s : f.selected) mean += f.encoder->encode(s.crop).trace.cls_out;
  mean /= static_cast<double>(f.selected.size());
  CHECK((f.input.init - mean).norm() < 1e-12);
  for (const auto& e : f.input.bundle.entries) {
    double s = 0.0;
    for (double v : e.mask.values) s += v;
    CHECK(s > 0.0);
  }
}

TEST_CASE("blank images fall back to the whole image") {
  const auto weights = init_encoder({});
  const Encoder enc(weights);
  ManifestRecord rec;
  rec.image = "blank";
  const ImageGrid blank(64, 64, 3, 0.4);
  const auto d = describe_image(enc, blank, rec, {});
  CHECK(d.whole_image_fallback);
  CHECK(d.descriptor == enc.encode(resize_area(blank, 32, 32)).descriptor);
}

TEST_CASE("descriptors do not depend on the worker count") {
  const auto bench = generate_benchmark(tiny_params(2));
  const auto weights = init_encoder({});
  const Encoder enc(weights);
  auto cfg = with_mode(DescriptorMode::Mao);
  cfg.refine.iterations = 5;
  const auto records = bench.test.manifest.gallery();
  const auto a = describe_records(enc, records, generated_images(bench.test), cfg);
  cfg.workers = 3;
  const auto b = describe_records(enc, records, generated_images(bench.test), cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].ok());
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].descriptor == b[i].descriptor);
  }
}

TEST_CASE("descriptor store round trips") {
  Rng rng(1);
  std::vector<RecordDescriptor> recs(3);
  for (int i = 0; i < 3; ++i) {
    recs[static_cast<std::size_t>(i)].id = "r" + std::to_string(i);
    recs[static_cast<std::size_t>(i)].descriptor = testing::random_vector(rng, 64);
  }
  const auto path = std::filesystem::temp_directory_path() / "mao_test_store" / "d.json";
  save_descriptor_store(path, DescriptorMode::Gem, recs);
  DescriptorMode mode{};
  const auto back = load_descriptor_store(path, &mode);
  CHECK(mode == DescriptorMode::Gem);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == recs[i].id);
    CHECK(back[i].descriptor == recs[i].descriptor);
  }
}

TEST_CASE("one-hot oracle descriptors reach mAP 1") {
  const auto bench = generate_benchmark(tiny_params(3));
  const auto& m = bench.test.manifest;
  auto one_hot = [](int k) {
    Vector v = Vector::Zero(64);
    v[k % 64] = 1.0;
    return v;
  };
  std::vector<RecordDescriptor> gallery, queries;
  for (const auto* g : m.gallery())
    gallery.push_back(described(g->image, one_hot(*parse_instance_name(*g->objects[0].instance_id))));
  for (const auto* q : m.queries())
    queries.push_back(described(q->image, one_hot(*parse_instance_name(*q->objects[0].instance_id))));
  const auto index = build_gallery_index(gallery, m);
  const auto rep = evaluate_queries(index, queries, m);
  CHECK(rep.map == 1.0);
  CHECK(rep.rows.size() == m.queries().size());
  for (const auto& row : rep.rows) {
    CHECK(row.size_ratio > 0.0);
    CHECK(row.resolution == 128);
  }
}

TEST_CASE("random descriptors score at chance") {
  const auto bench = generate_benchmark(tiny_params(4));
  const auto& m = bench.test.manifest;
  const int n = static_cast<int>(m.gallery().size());
  double expected = 0.0;
  for (const auto* q : m.queries()) expected += random_ap(n, static_cast<int>(q->relevant.size()));
  expected /= static_cast<double>(m.queries().size());

  Rng rng(11);
  const int trials = 400;
  double sum = 0.0, sum2 = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::vector<RecordDescriptor> gallery, queries;
    for (const auto* g : m.gallery()) gallery.push_back(described(g->image, testing::random_vector(rng, 16)));
    for (const auto* q : m.queries()) queries.push_back(described(q->image, testing::random_vector(rng, 16)));
    const double map = evaluate_queries(build_gallery_index(gallery, m), queries, m).map;
    sum += map;
    sum2 += map * map;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum2 / trials - mean * mean) / trials);
  MESSAGE("random mAP " << mean << " vs expected " << expected << " (se " << se << ")");
  CHECK(std::abs(mean - expected) < 4.0 * se);
}

TEST_CASE("end-to-end evaluation on a generated split") {
  const auto bench = generate_benchmark(tiny_params(5));
  const auto weights = init_encoder({});
  const Encoder enc(weights);
  const auto run = evaluate(enc, bench.test.manifest, generated_images(bench.test), with_mode(DescriptorMode::StageAAvg));
  CHECK(run.failures == 0);
  CHECK(run.gallery.size() == 8);
  CHECK(run.report.rows.size() == 4);
  CHECK(run.report.map > 0.0);
  CHECK(run.report.map <= 1.0);
}

TEST_CASE("training pairs") {
  const auto bench = generate_benchmark(tiny_params(6));
  const auto& m = bench.train.manifest;
  const auto images = generated_images(bench.train);
  const auto pairs = build_train_pairs(m, images, with_mode(DescriptorMode::StageAAvg), 32);
  std::size_t links = 0;
  for (const auto* q : m.queries()) links += q->relevant.size();
  CHECK(pairs.size() == links);
  for (const auto& p : pairs) {
    CHECK(p.query.width == 32);
    CHECK_FALSE(p.gallery_objects.empty());
  }
  CHECK(build_train_pairs(m, images, with_mode(DescriptorMode::StageAAvg), 32, 2).size() == 2);

  ObjectPairParams op;
  op.seed = 1;
  const auto objs = build_object_pairs(m, images, op);
  std::size_t gt = 0;
  for (const auto* g : m.gallery()) gt += g->objects.size();
  CHECK(objs.size() == gt);
  for (const auto& p : objs) {
    CHECK(p.gallery_objects.size() == 1);
    CHECK(parse_instance_name(p.instance_id).has_value());
  }
  const auto again = build_object_pairs(m, images, op);
  CHECK(again[0].query == objs[0].query);
}
