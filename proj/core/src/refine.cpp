#include "mao/refine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mao {

void RefineConfig::validate() const {
  if (iterations < 0) throw Error("refine config: iterations must be >= 0");
  if (!(step_size > 0.0)) throw Error("refine config: step_size must be > 0");
  if (!(alpha >= 0.0)) throw Error("refine config: alpha must be >= 0");
}

std::vector<std::size_t> CropBundle::summation_order() const {
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return entries[a].object_id < entries[b].object_id;
  });
  return order;
}

Vector CropBundle::descriptor_sum() const {
  if (entries.empty()) throw Error("crop bundle is empty");
  Vector sum = Vector::Zero(entries.front().descriptor.size());
  for (std::size_t i : summation_order()) sum += entries[i].descriptor;
  return sum;
}

CropEntry prepare_crop(const Encoder& encoder, const ImageGrid& crop, PatchMap mask,
                       std::string object_id) {
  return prepare_crop(encoder, encoder.encode(crop), std::move(mask), std::move(object_id));
}

CropEntry prepare_crop(const Encoder& encoder, const EncodeResult& encoded, PatchMap mask,
                       std::string object_id) {
  const auto& cfg = encoder.config();
  if (mask.rows != cfg.grid_side() || mask.cols != cfg.grid_side()) {
    throw Error("prepare_crop: mask grid does not match encoder patch grid");
  }
  CropEntry entry;
  entry.object_id = std::move(object_id);
  entry.descriptor = encoded.descriptor;
  entry.jacobians = attention_jacobian(encoder, encoded.trace);
  const Eigen::Index cols = entry.jacobians.front().cols();
  entry.jacobian_column_norms.resize(cols * static_cast<Eigen::Index>(entry.jacobians.size()));
  for (std::size_t l = 0; l < entry.jacobians.size(); ++l) {
    entry.jacobian_column_norms.segment(static_cast<Eigen::Index>(l) * cols, cols) =
        entry.jacobians[l].colwise().norm().transpose();
  }
  entry.mask_empty = std::all_of(mask.values.begin(), mask.values.end(),
                                 [](double v) { return v == 0.0; });
  mask.crop_id = entry.object_id;
  entry.mask = std::move(mask);
  return entry;
}

CropBundle make_bundle(const EncoderConfig& config, std::vector<CropEntry> entries) {
  if (entries.empty()) throw Error("make_bundle: need at least one crop");
  CropBundle bundle;
  bundle.layers = config.layers;
  bundle.heads = config.heads;
  bundle.tokens = config.tokens();
  bundle.grid_side = config.grid_side();
  const auto cols = static_cast<Eigen::Index>(config.heads) * config.tokens() * config.tokens();
  for (const auto& e : entries) {
    if (e.jacobians.size() != static_cast<std::size_t>(config.layers) ||
        e.jacobians.front().cols() != cols || e.descriptor.size() != config.embed_dim) {
      throw Error("make_bundle: crop '" + e.object_id + "' does not match encoder config");
    }
    if (std::abs(e.descriptor.norm() - 1.0) > 1e-6) {
      throw Error("make_bundle: crop '" + e.object_id + "' descriptor is not unit norm");
    }
  }
  bundle.entries = std::move(entries);
  return bundle;
}

MaskGrid mask_to_patch_grid(const BinaryMask& mask, int mask_x, int mask_y,
                            const CropWindow& window, int patch_side) {
  if (window.out_side <= 0 || window.side <= 0 || patch_side <= 0 ||
      window.out_side % patch_side != 0) {
    throw Error("mask_to_patch_grid: crop side must be a positive multiple of patch side");
  }
  const int grid = window.out_side / patch_side;
  MaskGrid result;
  result.map.rows = grid;
  result.map.cols = grid;
  result.map.values.assign(static_cast<std::size_t>(grid) * grid, 0.0);
  const double inv_scale = 1.0 / window.scale();
  const double cell_area = static_cast<double>(patch_side) * patch_side;

  for (int my = 0; my < mask.height; ++my) {
    const double y0 = (mask_y + my - window.y) * inv_scale;
    const double y1 = (mask_y + my + 1 - window.y) * inv_scale;
    for (int mx = 0; mx < mask.width; ++mx) {
      if (!mask.at(mx, my)) continue;
      const double x0 = (mask_x + mx - window.x) * inv_scale;
      const double x1 = (mask_x + mx + 1 - window.x) * inv_scale;
      const int r0 = std::max(0, static_cast<int>(std::floor(y0 / patch_side)));
      const int r1 = std::min(grid - 1, static_cast<int>(std::floor(y1 / patch_side)));
      const int c0 = std::max(0, static_cast<int>(std::floor(x0 / patch_side)));
      const int c1 = std::min(grid - 1, static_cast<int>(std::floor(x1 / patch_side)));
      for (int r = r0; r <= r1; ++r) {
        const double oy = std::min(y1, (r + 1.0) * patch_side) - std::max(y0, r * 1.0 * patch_side);
        if (oy <= 0.0) continue;
        for (int c = c0; c <= c1; ++c) {
          const double ox =
              std::min(x1, (c + 1.0) * patch_side) - std::max(x0, c * 1.0 * patch_side);
          if (ox <= 0.0) continue;
          result.map.values[static_cast<std::size_t>(r) * grid + c] += ox * oy / cell_area;
        }
      }
    }
  }
  bool any = false;
  for (double& v : result.map.values) {
    v = std::clamp(v, 0.0, 1.0);
    any = any || v > 0.0;
  }
  result.empty = !any;
  return result;
}

double soft_iou(const PatchMap& e, const PatchMap& m) {
  if (e.rows != m.rows || e.cols != m.cols || e.values.size() != m.values.size()) {
    throw Error("soft_iou: shape mismatch");
  }
  double inter = 0.0, se = 0.0, sm = 0.0;
  for (std::size_t k = 0; k < e.values.size(); ++k) {
    inter += e.values[k] * m.values[k];
    se += e.values[k];
    sm += m.values[k];
  }
  const double uni = se + sm - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

constexpr double kFlatRelevance = 1e-9;

struct CropTerm {
  double iou = 0.0;
  Vector grad_u;  // d iou / d u
  double margin = std::numeric_limits<double>::infinity();
};

// Patch relevance of one crop for unit direction u, optionally with the
// gradient of soft_iou(E, mask) with respect to u.
CropTerm crop_term(const Vector& u, const CropBundle& bundle, const CropEntry& entry,
                   bool with_gradient, PatchMap* map_out) {
  const int n = bundle.tokens;
  const int heads = bundle.heads;
  const int layers = bundle.layers;
  const int patches = n - 1;
  const Eigen::Index cols = static_cast<Eigen::Index>(heads) * n * n;
  const double norm = 1.0 / (static_cast<double>(layers) * heads * n);

  CropTerm term;
  std::vector<Eigen::RowVectorXd> pre(static_cast<std::size_t>(layers));
  std::vector<double> p(static_cast<std::size_t>(patches), 0.0);
  std::vector<double> lipschitz(static_cast<std::size_t>(patches), 0.0);
  for (int l = 0; l < layers; ++l) {
    auto& g = pre[static_cast<std::size_t>(l)];
    g.noalias() = u.transpose() * entry.jacobians[static_cast<std::size_t>(l)];
    for (Eigen::Index c = 0; c < cols; ++c) {
      const int j = static_cast<int>(c % n);
      if (j == 0) continue;
      const double col_norm = entry.jacobian_column_norms[static_cast<Eigen::Index>(l) * cols + c];
      if (g[c] > 0.0) p[static_cast<std::size_t>(j - 1)] += g[c];
      lipschitz[static_cast<std::size_t>(j - 1)] += col_norm;
      if (col_norm > 0.0) term.margin = std::min(term.margin, std::abs(g[c]) / col_norm);
    }
  }
  for (int j = 0; j < patches; ++j) {
    p[static_cast<std::size_t>(j)] *= norm;
    lipschitz[static_cast<std::size_t>(j)] *= norm;
  }

  const auto [min_it, max_it] = std::minmax_element(p.begin(), p.end());
  const auto jmin = static_cast<std::size_t>(min_it - p.begin());
  const auto jmax = static_cast<std::size_t>(max_it - p.begin());
  double range = *max_it - *min_it;
  // A reference parallel to the crop's own descriptor has an exactly zero
  // attention gradient (the unit-norm output is orthogonal to its own
  // derivative); what remains is rounding noise. Treat a relevance range that
  // small as a constant map.
  const double lip_scale = *std::max_element(lipschitz.begin(), lipschitz.end());
  if (range <= kFlatRelevance * lip_scale) range = 0.0;
  std::vector<double> e(p.size(), 0.0);
  if (range > 0.0) {
    for (std::size_t k = 0; k < p.size(); ++k) e[k] = (p[k] - *min_it) / range;
    // Distance to a change of arg-min / arg-max.
    const double lip_max = lip_scale;
    double gap_max = std::numeric_limits<double>::infinity();
    double gap_min = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (k != jmax) gap_max = std::min(gap_max, *max_it - p[k]);
      if (k != jmin) gap_min = std::min(gap_min, p[k] - *min_it);
    }
    if (lip_max > 0.0) term.margin = std::min(term.margin, std::min(gap_max, gap_min) / (2.0 * lip_max));
  } else {
    term.margin = 0.0;
  }

  const auto& m = entry.mask.values;
  double inter = 0.0, se = 0.0, sm = 0.0;
  for (std::size_t k = 0; k < e.size(); ++k) {
    inter += e[k] * m[k];
    se += e[k];
    sm += m[k];
  }
  const double uni = se + sm - inter;
  term.iou = uni > 0.0 ? inter / uni : 0.0;

  if (map_out) {
    map_out->rows = bundle.grid_side;
    map_out->cols = bundle.grid_side;
    map_out->values = e;
    map_out->crop_id = entry.object_id;
  }
  if (!with_gradient) return term;

  term.grad_u = Vector::Zero(u.size());
  if (!(uni > 0.0) || !(range > 0.0)) return term;

  // d iou / d e_k
  std::vector<double> ge(e.size());
  for (std::size_t k = 0; k < e.size(); ++k) {
    ge[k] = (m[k] * uni - inter * (1.0 - m[k])) / (uni * uni);
  }
  // Through min-max normalization.
  std::vector<double> gp(p.size());
  double to_min = 0.0, to_max = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    gp[k] = ge[k] / range;
    to_min += ge[k] * (e[k] - 1.0) / range;
    to_max -= ge[k] * e[k] / range;
  }
  gp[jmin] += to_min;
  gp[jmax] += to_max;

  // Through the rectified layer relevances to u.
  Eigen::RowVectorXd grad_pre(cols);
  for (int l = 0; l < layers; ++l) {
    const auto& g = pre[static_cast<std::size_t>(l)];
    for (Eigen::Index c = 0; c < cols; ++c) {
      const int j = static_cast<int>(c % n);
      grad_pre[c] = (j != 0 && g[c] > 0.0) ? gp[static_cast<std::size_t>(j - 1)] * norm : 0.0;
    }
    term.grad_u.noalias() += entry.jacobians[static_cast<std::size_t>(l)] * grad_pre.transpose();
  }
  return term;
}

}  // namespace

PatchMap crop_explainability(const Descriptor& v, const CropBundle& bundle, std::size_t entry) {
  PatchMap map;
  crop_term(l2_normalized(v), bundle, bundle.entries.at(entry), false, &map);
  return map;
}

ObjectiveEvaluation evaluate_objective(const Descriptor& v, const CropBundle& bundle,
                                       double alpha, bool with_gradient) {
  if (bundle.entries.empty()) throw Error("refinement_objective: empty bundle");
  const double v_norm = v.norm();
  if (!(v_norm > 0.0) || !std::isfinite(v_norm)) {
    throw Error("refinement_objective: zero-norm or non-finite descriptor");
  }
  const Vector u = v / v_norm;

  ObjectiveEvaluation out;
  out.kink_margin = std::numeric_limits<double>::infinity();
  Vector grad_u = Vector::Zero(v.size());
  for (std::size_t i : bundle.summation_order()) {
    const CropTerm term = crop_term(u, bundle, bundle.entries[i], with_gradient, nullptr);
    out.iou_sum += term.iou;
    out.kink_margin = std::min(out.kink_margin, term.margin);
    if (with_gradient) grad_u += term.grad_u;
  }

  const Vector sum = bundle.descriptor_sum();
  const double sum_norm = sum.norm();
  if (!(sum_norm > 0.0)) throw Error("refinement_objective: object descriptors sum to zero");
  const Vector sum_unit = sum / sum_norm;
  out.regularizer = u.dot(sum_unit);
  out.value = out.iou_sum + alpha * out.regularizer;
  if (with_gradient) {
    grad_u += alpha * sum_unit;
    // u = v/|v|: project out the radial component.
    out.gradient = (grad_u - u * u.dot(grad_u)) / v_norm;
  }
  return out;
}

double refinement_objective(const Descriptor& v, const CropBundle& bundle, double alpha) {
  return evaluate_objective(v, bundle, alpha, false).value;
}

RefineResult refine_descriptor(const CropBundle& bundle, const Descriptor& init,
                               const RefineConfig& config) {
  config.validate();
  RefineResult result;
  result.empty_mask_warning = std::any_of(bundle.entries.begin(), bundle.entries.end(),
                                          [](const CropEntry& e) { return e.mask_empty; });
  if (!(init.norm() > 0.0) || !init.allFinite()) throw Error("refine_descriptor: zero-norm or non-finite init");
  // The ascent runs at the scale of the supplied init; only the result is
  // normalized.
  Vector v = init;
  const auto first = evaluate_objective(v, bundle, config.alpha, false);
  result.initial_objective = first.value;
  result.initial_iou_sum = first.iou_sum;
  for (int it = 0; it < config.iterations; ++it) {
    const auto eval = evaluate_objective(v, bundle, config.alpha, true);
    if (!std::isfinite(eval.value) || !eval.gradient.allFinite()) {
      throw Error("refine_descriptor: non-finite objective at iteration " + std::to_string(it));
    }
    v += config.step_size * eval.gradient;
  }
  result.descriptor = l2_normalized(v);
  const auto last = evaluate_objective(result.descriptor, bundle, config.alpha, false);
  if (!std::isfinite(last.value)) {
    throw Error("refine_descriptor: non-finite objective at iteration " +
                std::to_string(config.iterations));
  }
  result.final_objective = last.value;
  result.final_iou_sum = last.iou_sum;
  return result;
}

RefineResult refine_query(const ImageGrid& crop, const PatchMap& mask, const Encoder& encoder,
                          const RefineConfig& config) {
  config.validate();
  auto entry = prepare_crop(encoder, crop, mask, "query");
  if (entry.mask_empty) {
    RefineResult result;
    result.descriptor = entry.descriptor;
    result.empty_mask_warning = true;
    return result;
  }
  const Descriptor init = entry.descriptor;
  std::vector<CropEntry> entries;
  entries.push_back(std::move(entry));
  return refine_descriptor(make_bundle(encoder.config(), std::move(entries)), init, config);
}

RefineResult refine_query(const ImageGrid& crop, const PatchMap& mask, const WeightStore& weights,
                          const RefineConfig& config) {
  return refine_query(crop, mask, Encoder(weights), config);
}

}  // namespace mao
