#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mao/encoder.hpp"

namespace mao {

// Real-valued map at patch resolution, row-major.
struct PatchMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  std::string crop_id;

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  bool operator==(const PatchMap&) const = default;
};

// Per-target-token relevance of one layer: mean over heads and source tokens
// of ReLU(grad[head, i, j]). `grad` is h x n x n; result has length n.
std::vector<double> layer_relevance(const Tensor& grad);

// Drops the CLS entry of a length-n relevance vector, reshapes the patch part
// to grid_side x grid_side and min-max normalizes it.
PatchMap relevance_to_patch_map(const std::vector<double>& relevance, int grid_side,
                                std::string crop_id = {});

// Explainability map of cosine(v_ref, encode(crop)): layer relevances of the
// attention gradients averaged over all layers, then reshaped and normalized.
PatchMap explainability_map(const WeightStore& weights, const ImageGrid& crop,
                            const Descriptor& v_ref, std::string crop_id = {});
PatchMap explainability_map(const WeightStore& weights, const AttentionTrace& trace,
                            const Descriptor& v_ref, std::string crop_id = {});

// Text dump: "rows cols" line, then one row of values per line.
void write_patch_map(std::ostream& out, const PatchMap& map);

}  // namespace mao
