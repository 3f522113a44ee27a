#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mao/image.hpp"
#include "mao/object_source.hpp"

namespace mao {

// Procedural sprite identity: shape x primary hue x secondary hue offset x
// two-tone texture. Instance ids map onto signatures through a bijective
// scramble, so neighbouring ids differ in several attributes.
struct SpriteSignature {
  int shape = 0;
  int hue = 0;
  int secondary = 0;  // hue index of the second tone, never equal to hue
  int texture = 0;
  bool operator==(const SpriteSignature&) const = default;
};

inline constexpr int kSpriteShapes = 8;
inline constexpr int kSpriteHues = 12;
inline constexpr int kSpriteTextures = 4;

int sprite_library_size();
SpriteSignature sprite_signature(int instance);
std::string instance_name(int instance);  // "inst_0042"
// Inverse of instance_name; nullopt for other strings.
std::optional<int> parse_instance_name(std::string_view name);

// Canonical side x side render of a sprite on a black background.
ImageGrid render_sprite(int instance, int side);

struct SceneSpec {
  int resolution = 256;
  // Side of the lattice on which object geometry is rasterized. Must divide
  // resolution; 0 means resolution. Re-rendering with a larger resolution and
  // the same lattice keeps every mask-area ratio bit-identical.
  int geometry_side = 0;
  std::vector<int> instances;  // instances[0] is the target
  double target_ratio = 0.01;
  std::uint64_t background_seed = 0;
  std::uint64_t seed = 0;

  int lattice() const { return geometry_side > 0 ? geometry_side : resolution; }
  void validate() const;
};

struct Scene {
  ImageGrid image;  // quantized to 8 bits
  std::vector<ObjectRegion> objects;  // exact masks, instance ids, conf 1
};

// Clean single-object view of an instance, as used for queries.
ImageGrid render_instance_view(int instance, int side, double ratio, std::uint64_t seed);

// Every object lands within +-20% of target_ratio; placement is rejection
// sampled on the lattice with a gap between boxes. Objects are sized and
// placed in order, so a spec whose instance list is a prefix of another's
// reproduces the same first objects.
Scene generate_scene(const SceneSpec& spec);

struct BenchmarkParams {
  int n_instances = 50;  // test target instances
  int gallery_size = 200;
  int queries_per_instance = 2;
  int n_train_instances = 50;
  int train_gallery_size = 200;
  int distractor_pool = 300;  // per split
  int resolution = 256;
  int geometry_side = 0;
  int min_objects = 7;
  int max_objects = 9;
  // Distractors drawn per scene before truncating to n_objects - 1. 0 means
  // max_objects - 1. A fixed value keeps distractor lists nested across
  // clutter levels.
  int distractor_slots = 0;
  // Test instance i uses ratio_choices[i % size] in all its scenes.
  std::vector<double> ratio_choices{0.005, 0.01, 0.02};
  int query_side = 32;
  double query_ratio = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GeneratedSplit {
  Manifest manifest;
  std::map<std::string, SceneSpec> scenes;  // by image id

  // Re-renders one record's image from its spec.
  ImageGrid render(const std::string& image_id) const;
};

struct GeneratedBenchmark {
  GeneratedSplit test;
  GeneratedSplit train;
};

// Plans both splits. Queries are clean single-object renders of the target
// instances; every gallery scene holds one target plus distractors from a
// split-private pool, so train/test instance sets are disjoint. Relevance of
// a query is the set of gallery scenes containing its instance.
GeneratedBenchmark generate_benchmark(const BenchmarkParams& params);

// Renders every image and mask and writes manifest.jsonl, train/manifest.jsonl
// and params.json under `out_dir`. Returns the test manifest as written.
Manifest write_benchmark(const GeneratedBenchmark& bench, const BenchmarkParams& params,
                         const std::filesystem::path& out_dir, int workers = 1);

// Keeps gallery scenes whose query-instance objects all have ratio <=
// max_ratio (scenes without query instances are kept) and queries that
// still have a relevant scene; relevance lists shrink accordingly.
Manifest size_filter_subset(const Manifest& manifest, double max_ratio);
GeneratedSplit size_filter_subset(const GeneratedSplit& split, double max_ratio);

// m_j holds scenes with the target plus exactly j distractors, j = 0..max.
// Placement and distractor draws are shared, so m_j's objects are a prefix
// of m_{j+1}'s.
std::vector<GeneratedSplit> clutter_series(const BenchmarkParams& base, int max_distractors);

// Same scenes re-rendered at each resolution on a common geometry lattice
// (the smallest resolution, which must divide all others). Image ids align.
std::vector<GeneratedSplit> resolution_series(const BenchmarkParams& base,
                                              const std::vector<int>& resolutions);

}  // namespace mao
