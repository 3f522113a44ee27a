#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mao/image.hpp"
#include "mao/refine.hpp"

namespace mao {

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  long long area() const { return static_cast<long long>(w) * h; }
  bool operator==(const BBox&) const = default;
};

double bbox_iou(const BBox& a, const BBox& b);

struct ObjectRegion {
  BBox bbox;
  std::optional<BinaryMask> mask;  // in bbox coordinates, w x h
  double confidence = 1.0;
  std::optional<std::string> instance_id;

  // Manifest bookkeeping.
  std::optional<std::string> mask_path;
  double size_ratio = 0.0;       // mask area (or bbox area) / image area
  bool ratio_from_bbox = false;  // no mask available
};

enum class Split { Query, Gallery };

std::string_view split_name(Split split);

struct ManifestRecord {
  std::string image;  // path relative to the manifest directory; doubles as image id
  Split split = Split::Gallery;
  std::vector<ObjectRegion> objects;
  std::vector<std::string> relevant;  // gallery image ids (query records only)
  ImageSize size;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& relative) const { return base_dir / relative; }
  const ManifestRecord* find(const std::string& image_id) const;
  std::vector<const ManifestRecord*> queries() const;
  std::vector<const ManifestRecord*> gallery() const;
};

// JSON Lines, one record per image:
// {"image":..., "split":"query"|"gallery", "objects":[{"bbox":[x,y,w,h],
//  "mask":path|null, "conf":float, "id":string|null}], "relevant":[ids]}
// "relevant" is written for query records only. Referenced images and masks
// must exist; errors carry the 1-based line number.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                        bool load_files = true);
std::string serialize_manifest(const Manifest& manifest);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Recomputes size_ratio / ratio_from_bbox of every object from its mask and
// the record's image size.
void compute_size_ratios(ManifestRecord& record);

struct ProposalParams {
  double deviation_threshold = 0.2;  // max-channel distance from background
  int min_area = 4;
  double merge_iou = 0.5;
};

// Class-agnostic proposals for quasi-uniform backgrounds: background estimated
// as the per-channel median, pixels deviating by more than the threshold are
// grouped into 8-connected components, overlapping components (bbox IoU above
// merge_iou) are merged. Confidence is the component's mean deviation divided
// by the strongest component's.
std::vector<ObjectRegion> propose_regions(const ImageGrid& image,
                                          const ProposalParams& params = {});

struct SelectedCrop {
  ImageGrid crop;
  ObjectRegion region;
  CropWindow window;
};

// Keeps regions with confidence above `threshold`. Boxes that fit inside
// crop_side get a crop_side window centered on the box (shifted to stay
// inside the image, never resized); larger boxes are expanded to a centered
// square and area-downscaled to crop_side.
std::vector<SelectedCrop> select_and_crop(const ImageGrid& image,
                                          const std::vector<ObjectRegion>& regions,
                                          double threshold, int crop_side);

CropWindow crop_window_for(const BBox& box, int image_width, int image_height, int crop_side);

// Patch-level mask of a selected region inside its crop; falls back to the
// full bounding box when the region has no mask.
MaskGrid region_patch_mask(const ObjectRegion& region, const CropWindow& window, int patch_side);

}  // namespace mao
