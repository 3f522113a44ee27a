#include "mao/legrad.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

namespace mao {

std::vector<double> layer_relevance(const Tensor& grad) {
  if (grad.rank() != 3 || grad.dim(1) != grad.dim(2)) {
    throw Error("layer_relevance: expected h x n x n, got " + shape_string(grad.shape));
  }
  const std::size_t heads = grad.dim(0);
  const std::size_t n = grad.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = grad.data.data() + (h * n + i) * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += std::max(row[j], 0.0);
    }
  }
  const double norm = 1.0 / static_cast<double>(heads * n);
  for (double& v : out) v *= norm;
  return out;
}

PatchMap relevance_to_patch_map(const std::vector<double>& relevance, int grid_side,
                                std::string crop_id) {
  const auto patches = static_cast<std::size_t>(grid_side) * grid_side;
  if (relevance.size() != patches + 1) {
    throw Error("relevance_to_patch_map: expected " + std::to_string(patches + 1) +
                " token scores, got " + std::to_string(relevance.size()));
  }
  PatchMap map;
  map.rows = grid_side;
  map.cols = grid_side;
  map.crop_id = std::move(crop_id);
  map.values = min_max_normalize(std::span<const double>(relevance).subspan(1));
  return map;
}

PatchMap explainability_map(const WeightStore& weights, const AttentionTrace& trace,
                            const Descriptor& v_ref, std::string crop_id) {
  const auto grads = attention_gradient(weights, trace, v_ref);
  std::vector<double> mean(static_cast<std::size_t>(trace.config.tokens()), 0.0);
  for (const auto& g : grads) {
    const auto rel = layer_relevance(g);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += rel[j];
  }
  for (double& v : mean) v /= static_cast<double>(grads.size());
  return relevance_to_patch_map(mean, trace.config.grid_side(), std::move(crop_id));
}

PatchMap explainability_map(const WeightStore& weights, const ImageGrid& crop,
                            const Descriptor& v_ref, std::string crop_id) {
  const auto encoded = encode(weights, crop);
  return explainability_map(weights, encoded.trace, v_ref, std::move(crop_id));
}

void write_patch_map(std::ostream& out, const PatchMap& map) {
  out << map.rows << ' ' << map.cols << '\n' << std::setprecision(17);
  for (int r = 0; r < map.rows; ++r) {
    for (int c = 0; c < map.cols; ++c) {
      if (c) out << ' ';
      out << map.at(r, c);
    }
    out << '\n';
  }
}

}  // namespace mao
