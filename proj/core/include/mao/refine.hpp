#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mao/encoder.hpp"
#include "mao/legrad.hpp"

namespace mao {

struct RefineConfig {
  double alpha = 0.03;
  int iterations = 80;
  double step_size = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// One object crop prepared for refinement: its descriptor, the per-layer
// attention Jacobians dv/dA^l (computed once, reused every step) and the
// object mask at patch resolution.
struct CropEntry {
  std::string object_id;
  Descriptor descriptor;
  std::vector<Matrix> jacobians;
  Vector jacobian_column_norms;  // |J[:, c]| over all layers, concatenated
  PatchMap mask;
  bool mask_empty = false;
};

struct CropBundle {
  int layers = 0;
  int heads = 0;
  int tokens = 0;
  int grid_side = 0;
  std::vector<CropEntry> entries;

  // Entry indices in ascending object_id order; every sum over objects runs
  // in this order so the result does not depend on insertion order.
  std::vector<std::size_t> summation_order() const;
  Vector descriptor_sum() const;
};

CropEntry prepare_crop(const Encoder& encoder, const ImageGrid& crop, PatchMap mask,
                       std::string object_id);
// Same, reusing a forward pass the caller already ran.
CropEntry prepare_crop(const Encoder& encoder, const EncodeResult& encoded, PatchMap mask,
                       std::string object_id);
CropBundle make_bundle(const EncoderConfig& config, std::vector<CropEntry> entries);

struct MaskGrid {
  PatchMap map;
  bool empty = false;
};

// Fraction of each patch cell covered by `mask`, where the mask's top-left
// pixel sits at (mask_x, mask_y) in image coordinates and `window` maps image
// coordinates onto the crop. Exact area overlap, so resampled windows give
// fractional coverage.
MaskGrid mask_to_patch_grid(const BinaryMask& mask, int mask_x, int mask_y,
                            const CropWindow& window, int patch_side);

// sum(e*m) / (sum(e) + sum(m) - sum(e*m)); 0/0 is defined as 0.
double soft_iou(const PatchMap& e, const PatchMap& m);

struct ObjectiveEvaluation {
  double value = 0.0;
  double iou_sum = 0.0;
  double regularizer = 0.0;  // cosine(v, sum_i v_i), before alpha
  Vector gradient;
  // Lower bound on the distance, in unit-direction space, to the nearest
  // point where the objective is not smooth (ReLU sign flip or a change of the
  // min-max arg extremum).
  double kink_margin = 0.0;
};

// sum_i soft_iou(E(v . v_i), m_i) + alpha * cosine(v, sum_i v_i).
double refinement_objective(const Descriptor& v, const CropBundle& bundle, double alpha);
ObjectiveEvaluation evaluate_objective(const Descriptor& v, const CropBundle& bundle,
                                       double alpha, bool with_gradient = true);

// Explainability map of one prepared crop for reference direction v, formed
// from the cached Jacobians.
PatchMap crop_explainability(const Descriptor& v, const CropBundle& bundle, std::size_t entry);

struct RefineResult {
  Descriptor descriptor;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double initial_iou_sum = 0.0;
  double final_iou_sum = 0.0;
  bool empty_mask_warning = false;
};

// Gradient ascent on the refinement objective from `init`; returns the
// L2-normalized final iterate. Throws if the objective becomes non-finite.
RefineResult refine_descriptor(const CropBundle& bundle, const Descriptor& init,
                               const RefineConfig& config);

// Single-object refinement of a query crop, initialized at its own
// descriptor. An all-zero mask returns the initial descriptor with a warning.
RefineResult refine_query(const ImageGrid& crop, const PatchMap& mask, const WeightStore& weights,
                          const RefineConfig& config);
RefineResult refine_query(const ImageGrid& crop, const PatchMap& mask, const Encoder& encoder,
                          const RefineConfig& config);

}  // namespace mao
