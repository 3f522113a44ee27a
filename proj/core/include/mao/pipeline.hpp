#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mao/encoder.hpp"
#include "mao/object_source.hpp"
#include "mao/refine.hpp"
#include "mao/retrieval.hpp"
#include "mao/stage_a.hpp"
#include "mao/synthbench.hpp"

namespace mao {

// Descriptor strategies, one per ablation row:
//   whole-image  encode the full image resized to the encoder input
//   stage-a-avg  average of the object-crop descriptors
//   gem          generalized-mean (p = 3) pooling of the crop descriptors
//   mao          object-crop average refined against the object masks
enum class DescriptorMode { WholeImage, StageAAvg, Gem, Mao };

std::string_view mode_name(DescriptorMode mode);
DescriptorMode parse_mode(std::string_view name);
inline constexpr DescriptorMode kAllModes[] = {DescriptorMode::WholeImage, DescriptorMode::StageAAvg,
                                               DescriptorMode::Gem, DescriptorMode::Mao};

enum class RegionSource { Proposals, Manifest };

struct PipelineConfig {
  DescriptorMode mode = DescriptorMode::Mao;
  RefineConfig refine;
  double threshold = 0.2;  // proposal confidence cut
  RegionSource regions = RegionSource::Proposals;
  ProposalParams proposals;
  double gem_p = 3.0;
  int workers = 1;
};

using ImageProvider = std::function<ImageGrid(const ManifestRecord&)>;

// Reads record images from disk relative to the manifest directory.
ImageProvider disk_images(const Manifest& manifest);
// Re-renders records of a generated split in memory.
ImageProvider generated_images(const GeneratedSplit& split);

struct RecordDescriptor {
  std::string id;
  Descriptor descriptor;
  double encode_ms = 0.0;  // forward passes
  double refine_ms = 0.0;  // attention Jacobians and the ascent loop (mao only)
  int crops = 0;
  bool whole_image_fallback = false;  // no region passed the threshold
  bool empty_mask_warning = false;
  std::string error;  // non-empty when the record failed

  bool ok() const { return error.empty(); }
};

// Object regions of one image under the configured source.
std::vector<ObjectRegion> image_regions(const ImageGrid& image, const ManifestRecord& record,
                                        const PipelineConfig& config);

// Refinement problem of one image in mao mode: the crop bundle (masks from
// the selected regions) and the init, the mean of the unnormalized object
// features.
struct MaoInput {
  CropBundle bundle;
  Vector init;
};
MaoInput prepare_mao_input(const Encoder& encoder, const std::vector<SelectedCrop>& selected,
                           const std::vector<EncodeResult>& encoded);
MaoInput prepare_mao_input(const Encoder& encoder, const std::vector<SelectedCrop>& selected);

RecordDescriptor describe_image(const Encoder& encoder, const ImageGrid& image,
                                const ManifestRecord& record, const PipelineConfig& config);

// Runs `fn(i)` for i in [0, n) on `workers` threads. Results are written by
// index, so output does not depend on scheduling.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// One descriptor per record, in input order. Failures are captured per
// record rather than thrown.
std::vector<RecordDescriptor> describe_records(const Encoder& encoder,
                                               const std::vector<const ManifestRecord*>& records,
                                               const ImageProvider& images,
                                               const PipelineConfig& config);

GalleryMetadata gallery_metadata(const ManifestRecord& record);
// Index over the successful gallery descriptors.
Index build_gallery_index(const std::vector<RecordDescriptor>& gallery, const Manifest& manifest);

// Size ratio / clutter / resolution of a query, taken from its relevant
// gallery scenes.
QueryResult query_metadata(const ManifestRecord& query, const Manifest& manifest);

EvalReport evaluate_queries(const Index& index, const std::vector<RecordDescriptor>& queries,
                            const Manifest& manifest, const BucketSpec& buckets = {});

struct EvalRun {
  std::vector<RecordDescriptor> gallery;
  std::vector<RecordDescriptor> queries;
  EvalReport report;
  std::size_t failures = 0;
};

// Encodes the gallery, encodes the queries, searches and scores.
EvalRun evaluate(const Encoder& encoder, const Manifest& manifest, const ImageProvider& images,
                 const PipelineConfig& config, const BucketSpec& buckets = {});

// Descriptor store: JSON with the mode, dimension and one entry per record.
void save_descriptor_store(const std::filesystem::path& path, DescriptorMode mode,
                           const std::vector<RecordDescriptor>& records);
std::vector<RecordDescriptor> load_descriptor_store(const std::filesystem::path& path,
                                                    DescriptorMode* mode = nullptr);

// (query, gallery-object crops) pairs for every (query, relevant scene) of a
// training manifest. Pairs are ordered relevant-rank-major, so a prefix
// covers as many instances as possible; max_pairs = 0 keeps all.
std::vector<TrainPair> build_train_pairs(const Manifest& manifest, const ImageProvider& images,
                                         const PipelineConfig& config, int crop_side,
                                         std::size_t max_pairs = 0);

// Object-level pairs: every ground-truth object with a parseable instance id
// in the gallery scenes, paired with a fresh single-object view of that
// instance. Covers distractor identities too, which the query-level pairs
// never see.
struct ObjectPairParams {
  int crop_side = 32;
  int view_side = 32;
  double view_ratio = 0.3;
  std::uint64_t seed = 0;
  std::size_t max_pairs = 0;  // 0 keeps all
};
std::vector<TrainPair> build_object_pairs(const Manifest& manifest, const ImageProvider& images,
                                          const ObjectPairParams& params);

}  // namespace mao
