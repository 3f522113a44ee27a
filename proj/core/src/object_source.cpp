#include "mao/object_source.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mao {
namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void schema_error(std::size_t line, const std::string& what) {
  throw Error("manifest line " + std::to_string(line) + ": " + what);
}

BBox union_box(const BBox& a, const BBox& b) {
  const int x0 = std::min(a.x, b.x);
  const int y0 = std::min(a.y, b.y);
  const int x1 = std::max(a.x + a.w, b.x + b.w);
  const int y1 = std::max(a.y + a.h, b.y + b.h);
  return {x0, y0, x1 - x0, y1 - y0};
}

ObjectRegion parse_object(const ordered_json& j, std::size_t line) {
  if (!j.is_object()) schema_error(line, "object entry must be a JSON object");
  ObjectRegion r;
  if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4) {
    schema_error(line, "object needs \"bbox\": [x, y, w, h]");
  }
  int v[4];
  for (int k = 0; k < 4; ++k) {
    if (!j["bbox"][k].is_number_integer()) schema_error(line, "bbox entries must be integers");
    v[k] = j["bbox"][k].get<int>();
  }
  r.bbox = {v[0], v[1], v[2], v[3]};
  if (r.bbox.w <= 0 || r.bbox.h <= 0) schema_error(line, "bbox must have positive size");
  if (!j.contains("mask")) schema_error(line, "object needs \"mask\" (path or null)");
  if (j["mask"].is_string()) {
    r.mask_path = j["mask"].get<std::string>();
  } else if (!j["mask"].is_null()) {
    schema_error(line, "\"mask\" must be a string or null");
  }
  if (!j.contains("conf") || !j["conf"].is_number()) schema_error(line, "object needs numeric \"conf\"");
  r.confidence = j["conf"].get<double>();
  if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) schema_error(line, "\"conf\" must lie in [0,1]");
  if (!j.contains("id")) schema_error(line, "object needs \"id\" (string or null)");
  if (j["id"].is_string()) {
    r.instance_id = j["id"].get<std::string>();
  } else if (!j["id"].is_null()) {
    schema_error(line, "\"id\" must be a string or null");
  }
  for (const auto& [key, value] : j.items()) {
    if (key != "bbox" && key != "mask" && key != "conf" && key != "id") {
      schema_error(line, "unknown object field \"" + key + "\"");
    }
  }
  return r;
}

ordered_json object_to_json(const ObjectRegion& r) {
  ordered_json j;
  j["bbox"] = {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h};
  j["mask"] = r.mask_path ? ordered_json(*r.mask_path) : ordered_json(nullptr);
  j["conf"] = r.confidence;
  j["id"] = r.instance_id ? ordered_json(*r.instance_id) : ordered_json(nullptr);
  return j;
}

}  // namespace

double bbox_iou(const BBox& a, const BBox& b) {
  const int x0 = std::max(a.x, b.x);
  const int y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.x + a.w, b.x + b.w);
  const int y1 = std::min(a.y + a.h, b.y + b.h);
  const long long inter = static_cast<long long>(std::max(0, x1 - x0)) * std::max(0, y1 - y0);
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::string_view split_name(Split split) {
  return split == Split::Query ? "query" : "gallery";
}

const ManifestRecord* Manifest::find(const std::string& image_id) const {
  for (const auto& r : records) {
    if (r.image == image_id) return &r;
  }
  return nullptr;
}

std::vector<const ManifestRecord*> Manifest::queries() const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == Split::Query) out.push_back(&r);
  }
  return out;
}

std::vector<const ManifestRecord*> Manifest::gallery() const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == Split::Gallery) out.push_back(&r);
  }
  return out;
}

void compute_size_ratios(ManifestRecord& record) {
  const double image_area = static_cast<double>(record.size.width) * record.size.height;
  for (auto& obj : record.objects) {
    if (obj.mask) {
      obj.size_ratio = static_cast<double>(obj.mask->area()) / image_area;
      obj.ratio_from_bbox = false;
    } else {
      obj.size_ratio = static_cast<double>(obj.bbox.area()) / image_area;
      obj.ratio_from_bbox = true;
    }
  }
}

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, bool load_files) {
  Manifest manifest;
  manifest.base_dir = base_dir;
  std::string text;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> line_of;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      schema_error(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) schema_error(line_no, "record must be a JSON object");
    ManifestRecord rec;
    if (!j.contains("image") || !j["image"].is_string()) schema_error(line_no, "record needs string \"image\"");
    rec.image = j["image"].get<std::string>();
    if (!j.contains("split") || !j["split"].is_string()) schema_error(line_no, "record needs string \"split\"");
    const auto split = j["split"].get<std::string>();
    if (split == "query") {
      rec.split = Split::Query;
    } else if (split == "gallery") {
      rec.split = Split::Gallery;
    } else {
      schema_error(line_no, "\"split\" must be \"query\" or \"gallery\", got \"" + split + "\"");
    }
    if (!j.contains("objects") || !j["objects"].is_array()) schema_error(line_no, "record needs \"objects\" array");
    for (const auto& o : j["objects"]) rec.objects.push_back(parse_object(o, line_no));
    if (j.contains("relevant")) {
      if (rec.split != Split::Query) schema_error(line_no, "\"relevant\" is only allowed on query records");
      if (!j["relevant"].is_array()) schema_error(line_no, "\"relevant\" must be an array");
      for (const auto& id : j["relevant"]) {
        if (!id.is_string()) schema_error(line_no, "relevant ids must be strings");
        rec.relevant.push_back(id.get<std::string>());
      }
    } else if (rec.split == Split::Query) {
      schema_error(line_no, "query record needs \"relevant\"");
    }
    for (const auto& [key, value] : j.items()) {
      if (key != "image" && key != "split" && key != "objects" && key != "relevant") {
        schema_error(line_no, "unknown record field \"" + key + "\"");
      }
    }
    if (!line_of.emplace(rec.image, line_no).second) {
      schema_error(line_no, "duplicate image \"" + rec.image + "\"");
    }

    if (load_files) {
      const auto image_path = manifest.resolve(rec.image);
      if (!std::filesystem::exists(image_path)) {
        schema_error(line_no, "image file not found: " + image_path.string());
      }
      rec.size = read_ppm_size(image_path);
      for (auto& obj : rec.objects) {
        const auto& b = obj.bbox;
        if (b.x < 0 || b.y < 0 || b.x + b.w > rec.size.width || b.y + b.h > rec.size.height) {
          schema_error(line_no, "bbox lies outside the image");
        }
        if (obj.mask_path) {
          const auto mask_path = manifest.resolve(*obj.mask_path);
          if (!std::filesystem::exists(mask_path)) {
            schema_error(line_no, "mask file not found: " + mask_path.string());
          }
          obj.mask = read_pbm(mask_path);
          if (obj.mask->width != b.w || obj.mask->height != b.h) {
            schema_error(line_no, "mask size does not match bbox");
          }
        }
      }
      compute_size_ratios(rec);
    }
    manifest.records.push_back(std::move(rec));
  }

  // Relevance links must point at gallery records that contain the instance.
  for (const auto& rec : manifest.records) {
    if (rec.split != Split::Query) continue;
    const std::size_t line = line_of.at(rec.image);
    std::optional<std::string> instance;
    if (!rec.objects.empty()) instance = rec.objects.front().instance_id;
    for (const auto& id : rec.relevant) {
      const auto* target = manifest.find(id);
      if (!target || target->split != Split::Gallery) {
        schema_error(line, "relevant id \"" + id + "\" is not a gallery record");
      }
      if (!instance) continue;
      bool any_ids = false, found = false;
      for (const auto& obj : target->objects) {
        if (obj.instance_id) {
          any_ids = true;
          found = found || *obj.instance_id == *instance;
        }
      }
      if (any_ids && !found) {
        schema_error(line, "gallery record \"" + id + "\" does not contain instance \"" + *instance + "\"");
      }
    }
  }
  return manifest;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

std::string serialize_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& rec : manifest.records) {
    ordered_json j;
    j["image"] = rec.image;
    j["split"] = std::string(split_name(rec.split));
    j["objects"] = ordered_json::array();
    for (const auto& obj : rec.objects) j["objects"].push_back(object_to_json(obj));
    if (rec.split == Split::Query) j["relevant"] = rec.relevant;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest " + path.string());
  out << serialize_manifest(manifest);
  if (!out) throw Error("write failed for manifest " + path.string());
}

std::vector<ObjectRegion> propose_regions(const ImageGrid& image, const ProposalParams& params) {
  const int w = image.width;
  const int h = image.height;
  const int channels = image.channels;
  std::vector<double> background(static_cast<std::size_t>(channels));
  {
    std::vector<double> values(static_cast<std::size_t>(w) * h);
    for (int c = 0; c < channels; ++c) {
      for (int i = 0; i < w * h; ++i) values[static_cast<std::size_t>(i)] = image.data[static_cast<std::size_t>(i) * channels + c];
      auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
      std::nth_element(values.begin(), mid, values.end());
      background[static_cast<std::size_t>(c)] = *mid;
    }
  }
  std::vector<double> deviation(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double dev = 0.0;
      for (int c = 0; c < channels; ++c) {
        dev = std::max(dev, std::abs(image.at(x, y, c) - background[static_cast<std::size_t>(c)]));
      }
      deviation[static_cast<std::size_t>(y) * w + x] = dev;
    }
  }

  struct Component {
    BBox box;
    std::vector<std::pair<int, int>> pixels;
    double saliency = 0.0;
  };
  std::vector<Component> components;
  std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(y) * w + x;
      if (label[idx] >= 0 || deviation[idx] <= params.deviation_threshold) continue;
      Component comp;
      const int id = static_cast<int>(components.size());
      label[idx] = id;
      stack.assign(1, {x, y});
      int x0 = x, y0 = y, x1 = x, y1 = y;
      double dev_sum = 0.0;
      while (!stack.empty()) {
        const auto [px, py] = stack.back();
        stack.pop_back();
        comp.pixels.emplace_back(px, py);
        dev_sum += deviation[static_cast<std::size_t>(py) * w + px];
        x0 = std::min(x0, px);
        y0 = std::min(y0, py);
        x1 = std::max(x1, px);
        y1 = std::max(y1, py);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = px + dx, ny = py + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            const auto nidx = static_cast<std::size_t>(ny) * w + nx;
            if (label[nidx] >= 0 || deviation[nidx] <= params.deviation_threshold) continue;
            label[nidx] = id;
            stack.emplace_back(nx, ny);
          }
        }
      }
      comp.box = {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
      comp.saliency = dev_sum / static_cast<double>(comp.pixels.size());
      components.push_back(std::move(comp));
    }
  }
  components.erase(std::remove_if(components.begin(), components.end(),
                                  [&](const Component& c) {
                                    return static_cast<int>(c.pixels.size()) < params.min_area;
                                  }),
                   components.end());

  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t a = 0; a < components.size() && !merged; ++a) {
      for (std::size_t b = a + 1; b < components.size() && !merged; ++b) {
        if (bbox_iou(components[a].box, components[b].box) > params.merge_iou) {
          auto& ca = components[a];
          auto& cb = components[b];
          const double total = static_cast<double>(ca.pixels.size() + cb.pixels.size());
          ca.saliency = (ca.saliency * static_cast<double>(ca.pixels.size()) +
                         cb.saliency * static_cast<double>(cb.pixels.size())) / total;
          ca.box = union_box(ca.box, cb.box);
          ca.pixels.insert(ca.pixels.end(), cb.pixels.begin(), cb.pixels.end());
          components.erase(components.begin() + static_cast<std::ptrdiff_t>(b));
          merged = true;
        }
      }
    }
  }

  double strongest = 0.0;
  for (const auto& c : components) strongest = std::max(strongest, c.saliency);
  std::vector<ObjectRegion> regions;
  for (const auto& c : components) {
    ObjectRegion r;
    r.bbox = c.box;
    BinaryMask mask(c.box.w, c.box.h);
    for (const auto& [px, py] : c.pixels) mask.at(px - c.box.x, py - c.box.y) = 1;
    r.mask = std::move(mask);
    r.confidence = strongest > 0.0 ? c.saliency / strongest : 0.0;
    regions.push_back(std::move(r));
  }
  std::sort(regions.begin(), regions.end(), [](const ObjectRegion& a, const ObjectRegion& b) {
    return std::tie(a.bbox.y, a.bbox.x) < std::tie(b.bbox.y, b.bbox.x);
  });
  return regions;
}

CropWindow crop_window_for(const BBox& box, int image_width, int image_height, int crop_side) {
  CropWindow win;
  win.out_side = crop_side;
  win.side = std::max({box.w, box.h, crop_side});
  auto place = [&](int start, int extent, int limit) {
    int pos = start + static_cast<int>(std::floor((extent - win.side) / 2.0));
    if (win.side <= limit) {
      pos = std::clamp(pos, 0, limit - win.side);
    } else {
      pos = static_cast<int>(std::floor((limit - win.side) / 2.0));
    }
    return pos;
  };
  win.x = place(box.x, box.w, image_width);
  win.y = place(box.y, box.h, image_height);
  return win;
}

std::vector<SelectedCrop> select_and_crop(const ImageGrid& image,
                                          const std::vector<ObjectRegion>& regions,
                                          double threshold, int crop_side) {
  if (crop_side <= 0) throw Error("select_and_crop: crop_side must be positive");
  std::vector<SelectedCrop> out;
  for (const auto& region : regions) {
    if (!(region.confidence > threshold)) continue;
    SelectedCrop sel;
    sel.region = region;
    sel.window = crop_window_for(region.bbox, image.width, image.height, crop_side);
    ImageGrid window = crop_window(image, sel.window.x, sel.window.y, sel.window.side, sel.window.side);
    sel.crop = sel.window.side == crop_side ? std::move(window)
                                            : resize_area(window, crop_side, crop_side);
    out.push_back(std::move(sel));
  }
  return out;
}

MaskGrid region_patch_mask(const ObjectRegion& region, const CropWindow& window, int patch_side) {
  if (region.mask) {
    return mask_to_patch_grid(*region.mask, region.bbox.x, region.bbox.y, window, patch_side);
  }
  const BinaryMask full(region.bbox.w, region.bbox.h, 1);
  return mask_to_patch_grid(full, region.bbox.x, region.bbox.y, window, patch_side);
}

}  // namespace mao
