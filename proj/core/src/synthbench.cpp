#include "mao/synthbench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include "json.hpp"

namespace mao {
namespace {

constexpr int kSecondaryOffsets = kSpriteHues - 1;
constexpr int kLibrarySize = kSpriteShapes * kSpriteHues * kSecondaryOffsets * kSpriteTextures;
// Multiplier coprime to the library size (2^7 * 3 * 11).
constexpr long long kScrambleMul = 2531;
constexpr long long kScrambleAdd = 1777;

constexpr std::uint64_t kTestSplit = 1;
constexpr std::uint64_t kTrainSplit = 2;

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

bool shape_inside(int shape, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  const double r2 = du * du + dv * dv;
  switch (shape) {
    case 0: return true;
    case 1: return r2 <= 0.25;
    case 2: return std::abs(du) + std::abs(dv) <= 0.5;
    case 3: return std::abs(du) <= v / 2.0;
    case 4: return std::abs(du) <= 0.18 || std::abs(dv) <= 0.18;
    case 5: return r2 <= 0.25 && r2 >= 0.0484;
    case 6: return std::abs(dv) <= 0.433 && std::abs(du) + std::abs(dv) * 0.577 <= 0.5;
    default: return u <= 0.45 || v >= 0.55;
  }
}

bool second_tone(int texture, double u, double v) {
  switch (texture) {
    case 0: return static_cast<int>(std::floor(u * 4.0)) % 2 == 1;
    case 1: return static_cast<int>(std::floor(v * 4.0)) % 2 == 1;
    case 2: return (static_cast<int>(std::floor(u * 3.0)) + static_cast<int>(std::floor(v * 3.0))) % 2 == 1;
    default: return std::min({u, 1.0 - u, v, 1.0 - v}) < 0.15;
  }
}

Rgb sprite_color(const SpriteSignature& sig, double u, double v) {
  if (second_tone(sig.texture, u, v)) return hsv(sig.secondary / double(kSpriteHues), 0.85, 0.65);
  return hsv(sig.hue / double(kSpriteHues), 0.85, 0.9);
}

struct Background {
  Rgb base{};
  double amp[3]{}, fx[3]{}, fy[3]{}, phase[3]{};

  explicit Background(std::uint64_t seed) {
    Rng rng(seed);
    const double gray = rng.uniform(0.40, 0.50);
    base = {gray + rng.uniform(-0.03, 0.03), gray + rng.uniform(-0.03, 0.03),
            gray + rng.uniform(-0.03, 0.03)};
    for (int k = 0; k < 3; ++k) {
      amp[k] = rng.uniform(0.005, 0.015);
      fx[k] = rng.uniform(2.0, 12.0);
      fy[k] = rng.uniform(2.0, 12.0);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }

  double noise(double u, double v) const {
    double n = 0.0;
    for (int k = 0; k < 3; ++k) {
      n += amp[k] * std::sin(2.0 * std::numbers::pi * (fx[k] * u + fy[k] * v) + phase[k]);
    }
    return n;
  }
};

BinaryMask rasterize(int shape, int w, int h) {
  BinaryMask mask(w, h);
  for (int j = 0; j < h; ++j) {
    for (int i = 0; i < w; ++i) {
      mask.at(i, j) = shape_inside(shape, (i + 0.5) / w, (j + 0.5) / h) ? 1 : 0;
    }
  }
  return mask;
}

// Object geometry on the lattice.
struct Placed {
  int instance = 0;
  int gx = 0, gy = 0, gw = 0, gh = 0;  // full sprite box
  BinaryMask mask;                     // gw x gh
};

std::vector<Placed> layout_scene(const SceneSpec& spec) {
  spec.validate();
  const int g = spec.lattice();
  const double g2 = static_cast<double>(g) * g;
  const int gap = g >= 64 ? 2 : 1;
  const int margin = 1;
  Rng rng(spec.seed);
  std::vector<Placed> placed;
  for (std::size_t i = 0; i < spec.instances.size(); ++i) {
    const int instance = spec.instances[i];
    const int shape = sprite_signature(instance).shape;
    const double want = spec.target_ratio * rng.uniform(0.9, 1.1) * g2;

    Placed best;
    double best_err = std::numeric_limits<double>::infinity();
    for (int s = 1; s + 1 <= g - 2 * margin; ++s) {
      const int sizes[3][2] = {{s, s}, {s + 1, s}, {s, s + 1}};
      bool beyond = false;
      for (const auto& wh : sizes) {
        BinaryMask m = rasterize(shape, wh[0], wh[1]);
        const double area = static_cast<double>(m.area());
        const double err = std::abs(area - want);
        if (err < best_err) {
          best_err = err;
          best.gw = wh[0];
          best.gh = wh[1];
          best.mask = std::move(m);
        }
        if (wh[0] == s && wh[1] == s && area > 1.5 * want) beyond = true;
      }
      if (beyond) break;
    }
    const double ratio = static_cast<double>(best.mask.area()) / g2;
    if (best.mask.area() == 0 || std::abs(ratio - spec.target_ratio) > 0.2 * spec.target_ratio) {
      throw Error("generate_scene: object ratio " + std::to_string(ratio) + " misses target " +
                  std::to_string(spec.target_ratio) + " by more than 20% at lattice " +
                  std::to_string(g) + "; raise the resolution or target_ratio");
    }
    best.instance = instance;

    const int span_x = g - 2 * margin - best.gw + 1;
    const int span_y = g - 2 * margin - best.gh + 1;
    bool ok = false;
    for (int attempt = 0; attempt < 2000 && !ok && span_x > 0 && span_y > 0; ++attempt) {
      best.gx = margin + static_cast<int>(rng.below(static_cast<std::uint64_t>(span_x)));
      best.gy = margin + static_cast<int>(rng.below(static_cast<std::uint64_t>(span_y)));
      ok = std::none_of(placed.begin(), placed.end(), [&](const Placed& p) {
        return best.gx < p.gx + p.gw + gap && p.gx < best.gx + best.gw + gap &&
               best.gy < p.gy + p.gh + gap && p.gy < best.gy + best.gh + gap;
      });
    }
    if (!ok) {
      throw Error("generate_scene: could not place object " + std::to_string(i + 1) + " of " +
                  std::to_string(spec.instances.size()) + " without overlap; lower n_objects or target_ratio");
    }
    placed.push_back(std::move(best));
  }
  return placed;
}

ObjectRegion region_for(const Placed& p, int k, int resolution) {
  int x0 = p.gw, y0 = p.gh, x1 = -1, y1 = -1;
  for (int j = 0; j < p.gh; ++j) {
    for (int i = 0; i < p.gw; ++i) {
      if (!p.mask.at(i, j)) continue;
      x0 = std::min(x0, i);
      y0 = std::min(y0, j);
      x1 = std::max(x1, i);
      y1 = std::max(y1, j);
    }
  }
  ObjectRegion r;
  r.bbox = {(p.gx + x0) * k, (p.gy + y0) * k, (x1 - x0 + 1) * k, (y1 - y0 + 1) * k};
  BinaryMask mask(r.bbox.w, r.bbox.h);
  for (int y = 0; y < r.bbox.h; ++y) {
    for (int x = 0; x < r.bbox.w; ++x) mask.at(x, y) = p.mask.at(x0 + x / k, y0 + y / k);
  }
  r.mask = std::move(mask);
  r.confidence = 1.0;
  r.instance_id = instance_name(p.instance);
  r.size_ratio = static_cast<double>(r.mask->area()) / (static_cast<double>(resolution) * resolution);
  return r;
}

std::string padded(int value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

enum class SplitKind { Test, Train };

struct SplitLayout {
  std::vector<int> targets;
  std::vector<int> pool;
  int gallery_size = 0;
  std::uint64_t tag = 0;
};

SplitLayout split_layout(const BenchmarkParams& p, SplitKind kind) {
  SplitLayout s;
  const int test_end = p.n_instances;
  const int train_end = test_end + p.n_train_instances;
  const int test_pool_end = train_end + p.distractor_pool;
  const int train_pool_end = test_pool_end + p.distractor_pool;
  if (train_end + 2 * p.distractor_pool > kLibrarySize) {
    throw Error("generate_benchmark: " + std::to_string(train_pool_end) +
                " instances exceed the sprite library (" + std::to_string(kLibrarySize) + ")");
  }
  auto range = [](int lo, int hi) {
    std::vector<int> v;
    for (int i = lo; i < hi; ++i) v.push_back(i);
    return v;
  };
  if (kind == SplitKind::Test) {
    s.targets = range(0, test_end);
    s.pool = range(train_end, test_pool_end);
    s.gallery_size = p.gallery_size;
    s.tag = kTestSplit;
  } else {
    s.targets = range(test_end, train_end);
    s.pool = range(test_pool_end, train_pool_end);
    s.gallery_size = p.train_gallery_size;
    s.tag = kTrainSplit;
  }
  return s;
}

ManifestRecord record_for(const std::string& image, Split split, const SceneSpec& spec,
                          const std::string& mask_stem) {
  ManifestRecord rec;
  rec.image = image;
  rec.split = split;
  rec.size = {spec.resolution, spec.resolution};
  const auto placed = layout_scene(spec);
  const int k = spec.resolution / spec.lattice();
  for (std::size_t i = 0; i < placed.size(); ++i) {
    ObjectRegion r = region_for(placed[i], k, spec.resolution);
    r.mask_path = mask_stem + "_o" + std::to_string(i) + ".pbm";
    rec.objects.push_back(std::move(r));
  }
  compute_size_ratios(rec);
  return rec;
}

GeneratedSplit plan_split(const BenchmarkParams& p, SplitKind kind) {
  p.validate();
  const SplitLayout layout = split_layout(p, kind);
  const std::uint64_t split_seed = derive_seed(p.seed, layout.tag);
  const int n = static_cast<int>(layout.targets.size());
  if (n == 0) return {};
  if (layout.gallery_size < n) {
    throw Error("generate_benchmark: gallery of " + std::to_string(layout.gallery_size) +
                " scenes cannot hold " + std::to_string(n) + " target instances");
  }
  const int slots = p.distractor_slots > 0 ? p.distractor_slots : p.max_objects - 1;
  if (slots < p.max_objects - 1 || slots > static_cast<int>(layout.pool.size())) {
    throw Error("generate_benchmark: distractor pool of " + std::to_string(layout.pool.size()) +
                " cannot supply " + std::to_string(slots) + " distractors per scene");
  }

  GeneratedSplit out;
  Rng plan(derive_seed(split_seed, 0));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  plan.shuffle(order);

  std::vector<std::vector<std::string>> relevant(static_cast<std::size_t>(n));
  std::vector<ManifestRecord> gallery;
  for (int s = 0; s < layout.gallery_size; ++s) {
    const int t = order[static_cast<std::size_t>(s % n)];
    Rng pick(derive_seed(split_seed, 3ULL * static_cast<std::uint64_t>(s) + 1));
    const int n_objects =
        p.min_objects + static_cast<int>(pick.below(static_cast<std::uint64_t>(p.max_objects - p.min_objects + 1)));
    std::vector<int> pool = layout.pool;
    for (int i = 0; i < slots; ++i) {
      const auto j = static_cast<std::size_t>(i) + pick.below(pool.size() - static_cast<std::size_t>(i));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    SceneSpec spec;
    spec.resolution = p.resolution;
    spec.geometry_side = p.geometry_side;
    spec.instances.push_back(layout.targets[static_cast<std::size_t>(t)]);
    for (int i = 0; i + 1 < n_objects; ++i) spec.instances.push_back(pool[static_cast<std::size_t>(i)]);
    spec.target_ratio = p.ratio_choices[static_cast<std::size_t>(t) % p.ratio_choices.size()];
    spec.seed = derive_seed(split_seed, 3ULL * static_cast<std::uint64_t>(s) + 2);
    spec.background_seed = derive_seed(split_seed, 3ULL * static_cast<std::uint64_t>(s) + 3);

    const std::string stem = "scene_" + padded(s, 4);
    const std::string image = "gallery/" + stem + ".ppm";
    gallery.push_back(record_for(image, Split::Gallery, spec, "masks/" + stem));
    relevant[static_cast<std::size_t>(t)].push_back(image);
    out.scenes.emplace(image, std::move(spec));
  }

  const std::uint64_t query_seed = derive_seed(split_seed, 1ULL << 40);
  for (int t = 0; t < n; ++t) {
    const int instance = layout.targets[static_cast<std::size_t>(t)];
    for (int q = 0; q < p.queries_per_instance; ++q) {
      const auto stream = 2ULL * static_cast<std::uint64_t>(t * p.queries_per_instance + q);
      SceneSpec spec;
      spec.resolution = p.query_side;
      spec.instances = {instance};
      spec.target_ratio = p.query_ratio;
      spec.seed = derive_seed(query_seed, stream);
      spec.background_seed = derive_seed(query_seed, stream + 1);
      const std::string stem = instance_name(instance) + "_q" + std::to_string(q);
      const std::string image = "queries/" + stem + ".ppm";
      ManifestRecord rec = record_for(image, Split::Query, spec, "masks/" + stem);
      rec.relevant = relevant[static_cast<std::size_t>(t)];
      std::sort(rec.relevant.begin(), rec.relevant.end());
      out.manifest.records.push_back(std::move(rec));
      out.scenes.emplace(image, std::move(spec));
    }
  }
  for (auto& rec : gallery) out.manifest.records.push_back(std::move(rec));
  return out;
}

void write_split(const GeneratedSplit& split, const std::filesystem::path& dir, int workers) {
  std::filesystem::create_directories(dir);
  const auto& records = split.manifest.records;
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::string first_error;
  auto work = [&]() {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      try {
        const auto& rec = records[i];
        const Scene scene = generate_scene(split.scenes.at(rec.image));
        std::filesystem::create_directories((dir / rec.image).parent_path());
        write_ppm(dir / rec.image, scene.image);
        for (const auto& obj : rec.objects) {
          if (!obj.mask_path || !obj.mask) continue;
          std::filesystem::create_directories((dir / *obj.mask_path).parent_path());
          write_pbm(dir / *obj.mask_path, *obj.mask);
        }
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mutex);
        if (first_error.empty()) first_error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (!first_error.empty()) throw Error(first_error);
  Manifest m = split.manifest;
  m.base_dir = dir;
  save_manifest(m, dir / "manifest.jsonl");
}

}  // namespace

int sprite_library_size() { return kLibrarySize; }

SpriteSignature sprite_signature(int instance) {
  if (instance < 0 || instance >= kLibrarySize) {
    throw Error("sprite instance " + std::to_string(instance) + " outside the library [0, " +
                std::to_string(kLibrarySize) + ")");
  }
  long long s = (instance * kScrambleMul + kScrambleAdd) % kLibrarySize;
  SpriteSignature sig;
  sig.shape = static_cast<int>(s % kSpriteShapes);
  s /= kSpriteShapes;
  sig.hue = static_cast<int>(s % kSpriteHues);
  s /= kSpriteHues;
  sig.secondary = (sig.hue + 1 + static_cast<int>(s % kSecondaryOffsets)) % kSpriteHues;
  s /= kSecondaryOffsets;
  sig.texture = static_cast<int>(s);
  return sig;
}

std::string instance_name(int instance) { return "inst_" + padded(instance, 4); }

std::optional<int> parse_instance_name(std::string_view name) {
  constexpr std::string_view prefix = "inst_";
  if (!name.starts_with(prefix) || name.size() == prefix.size()) return std::nullopt;
  int value = 0;
  const char* first = name.data() + prefix.size();
  const char* last = name.data() + name.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || value < 0) return std::nullopt;
  return value;
}

ImageGrid render_instance_view(int instance, int side, double ratio, std::uint64_t seed) {
  SceneSpec spec;
  spec.resolution = side;
  spec.instances = {instance};
  spec.target_ratio = ratio;
  spec.seed = derive_seed(seed, 0);
  spec.background_seed = derive_seed(seed, 1);
  return generate_scene(spec).image;
}

ImageGrid render_sprite(int instance, int side) {
  const SpriteSignature sig = sprite_signature(instance);
  ImageGrid img(side, side, 3, 0.0);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double u = (x + 0.5) / side, v = (y + 0.5) / side;
      if (!shape_inside(sig.shape, u, v)) continue;
      const Rgb c = sprite_color(sig, u, v);
      img.at(x, y, 0) = c.r;
      img.at(x, y, 1) = c.g;
      img.at(x, y, 2) = c.b;
    }
  }
  quantize_8bit(img);
  return img;
}

void SceneSpec::validate() const {
  if (resolution <= 0) throw Error("scene spec: resolution must be positive");
  if (geometry_side < 0 || lattice() > resolution || resolution % lattice() != 0) {
    throw Error("scene spec: geometry_side must divide resolution");
  }
  if (instances.empty()) throw Error("scene spec: n_objects must be >= 1");
  if (!(target_ratio > 0.0 && target_ratio < 0.5)) throw Error("scene spec: target_ratio must lie in (0, 0.5)");
  for (int id : instances) sprite_signature(id);
}

Scene generate_scene(const SceneSpec& spec) {
  const auto placed = layout_scene(spec);
  const int r = spec.resolution;
  const int k = r / spec.lattice();
  Scene scene;
  scene.image = ImageGrid(r, r, 3);
  const Background bg(spec.background_seed);
  for (int y = 0; y < r; ++y) {
    for (int x = 0; x < r; ++x) {
      const double n = bg.noise((x + 0.5) / r, (y + 0.5) / r);
      scene.image.at(x, y, 0) = bg.base.r + n;
      scene.image.at(x, y, 1) = bg.base.g + n;
      scene.image.at(x, y, 2) = bg.base.b + n;
    }
  }
  for (const auto& p : placed) {
    const SpriteSignature sig = sprite_signature(p.instance);
    const int x0 = p.gx * k, y0 = p.gy * k, w = p.gw * k, h = p.gh * k;
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        if (!p.mask.at((x - x0) / k, (y - y0) / k)) continue;
        const Rgb c = sprite_color(sig, (x - x0 + 0.5) / w, (y - y0 + 0.5) / h);
        scene.image.at(x, y, 0) = c.r;
        scene.image.at(x, y, 1) = c.g;
        scene.image.at(x, y, 2) = c.b;
      }
    }
    scene.objects.push_back(region_for(p, k, r));
  }
  quantize_8bit(scene.image);
  return scene;
}

void BenchmarkParams::validate() const {
  if (n_instances < 0 || n_train_instances < 0 || gallery_size < 0 || train_gallery_size < 0) {
    throw Error("benchmark params: counts must be non-negative");
  }
  if (queries_per_instance < 1) throw Error("benchmark params: queries_per_instance must be >= 1");
  if (min_objects < 1 || max_objects < min_objects) throw Error("benchmark params: need 1 <= min_objects <= max_objects");
  if (ratio_choices.empty()) throw Error("benchmark params: ratio_choices is empty");
  if (query_side <= 0 || resolution <= 0) throw Error("benchmark params: sizes must be positive");
}

ImageGrid GeneratedSplit::render(const std::string& image_id) const {
  const auto it = scenes.find(image_id);
  if (it == scenes.end()) throw Error("no generated scene for '" + image_id + "'");
  return generate_scene(it->second).image;
}

GeneratedBenchmark generate_benchmark(const BenchmarkParams& params) {
  GeneratedBenchmark bench;
  bench.test = plan_split(params, SplitKind::Test);
  bench.train = plan_split(params, SplitKind::Train);
  return bench;
}

Manifest write_benchmark(const GeneratedBenchmark& bench, const BenchmarkParams& params,
                         const std::filesystem::path& out_dir, int workers) {
  write_split(bench.test, out_dir, workers);
  if (!bench.train.manifest.records.empty()) write_split(bench.train, out_dir / "train", workers);
  nlohmann::ordered_json j;
  j["n_instances"] = params.n_instances;
  j["gallery_size"] = params.gallery_size;
  j["queries_per_instance"] = params.queries_per_instance;
  j["n_train_instances"] = params.n_train_instances;
  j["train_gallery_size"] = params.train_gallery_size;
  j["distractor_pool"] = params.distractor_pool;
  j["resolution"] = params.resolution;
  j["geometry_side"] = params.geometry_side;
  j["min_objects"] = params.min_objects;
  j["max_objects"] = params.max_objects;
  j["distractor_slots"] = params.distractor_slots;
  j["ratio_choices"] = params.ratio_choices;
  j["query_side"] = params.query_side;
  j["query_ratio"] = params.query_ratio;
  j["seed"] = params.seed;
  std::ofstream out(out_dir / "params.json");
  out << j.dump(2) << '\n';
  Manifest m = bench.test.manifest;
  m.base_dir = out_dir;
  return m;
}

Manifest size_filter_subset(const Manifest& manifest, double max_ratio) {
  std::set<std::string> query_instances;
  for (const auto& rec : manifest.records) {
    if (rec.split != Split::Query) continue;
    for (const auto& obj : rec.objects) {
      if (obj.instance_id) query_instances.insert(*obj.instance_id);
    }
  }
  Manifest out;
  out.base_dir = manifest.base_dir;
  std::set<std::string> kept;
  for (const auto& rec : manifest.records) {
    if (rec.split != Split::Gallery) continue;
    const bool keep = std::all_of(rec.objects.begin(), rec.objects.end(), [&](const ObjectRegion& o) {
      return !o.instance_id || !query_instances.count(*o.instance_id) || o.size_ratio <= max_ratio;
    });
    if (keep) kept.insert(rec.image);
  }
  for (const auto& rec : manifest.records) {
    if (rec.split == Split::Gallery) {
      if (kept.count(rec.image)) out.records.push_back(rec);
      continue;
    }
    ManifestRecord q = rec;
    q.relevant.clear();
    for (const auto& id : rec.relevant) {
      if (kept.count(id)) q.relevant.push_back(id);
    }
    if (!q.relevant.empty()) out.records.push_back(std::move(q));
  }
  return out;
}

GeneratedSplit size_filter_subset(const GeneratedSplit& split, double max_ratio) {
  GeneratedSplit out;
  out.manifest = size_filter_subset(split.manifest, max_ratio);
  for (const auto& rec : out.manifest.records) out.scenes.emplace(rec.image, split.scenes.at(rec.image));
  return out;
}

std::vector<GeneratedSplit> clutter_series(const BenchmarkParams& base, int max_distractors) {
  if (max_distractors < 0) throw Error("clutter_series: max_distractors must be >= 0");
  std::vector<GeneratedSplit> series;
  for (int j = 0; j <= max_distractors; ++j) {
    BenchmarkParams p = base;
    p.min_objects = p.max_objects = 1 + j;
    p.distractor_slots = std::max(1, max_distractors);
    series.push_back(plan_split(p, SplitKind::Test));
  }
  return series;
}

std::vector<GeneratedSplit> resolution_series(const BenchmarkParams& base,
                                              const std::vector<int>& resolutions) {
  if (resolutions.empty()) throw Error("resolution_series: no resolutions");
  const int lattice = *std::min_element(resolutions.begin(), resolutions.end());
  std::vector<GeneratedSplit> series;
  for (int r : resolutions) {
    if (r % lattice != 0) {
      throw Error("resolution_series: " + std::to_string(r) + " is not a multiple of " + std::to_string(lattice));
    }
    BenchmarkParams p = base;
    p.resolution = r;
    p.geometry_side = lattice;
    series.push_back(plan_split(p, SplitKind::Test));
  }
  return series;
}

}  // namespace mao
