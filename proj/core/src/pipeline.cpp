#include "mao/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "json.hpp"

namespace mao {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

ImageGrid fit_input(const ImageGrid& image, int side) {
  if (image.width == side && image.height == side) return image;
  return resize_area(image, side, side);
}

const std::string* object_instance(const ManifestRecord& rec) {
  for (const auto& obj : rec.objects) {
    if (obj.instance_id) return &*obj.instance_id;
  }
  return nullptr;
}

bool max_reached(const std::vector<TrainPair>& pairs, std::size_t max_pairs) {
  return max_pairs > 0 && pairs.size() >= max_pairs;
}

}  // namespace

std::string_view mode_name(DescriptorMode mode) {
  switch (mode) {
    case DescriptorMode::WholeImage: return "whole-image";
    case DescriptorMode::StageAAvg: return "stage-a-avg";
    case DescriptorMode::Gem: return "gem";
    case DescriptorMode::Mao: return "mao";
  }
  return "unknown";
}

DescriptorMode parse_mode(std::string_view name) {
  for (DescriptorMode m : kAllModes) {
    if (mode_name(m) == name) return m;
  }
  throw Error("unknown mode '" + std::string(name) + "' (whole-image, stage-a-avg, gem, mao)");
}

ImageProvider disk_images(const Manifest& manifest) {
  const auto base = manifest.base_dir;
  return [base](const ManifestRecord& rec) { return read_ppm(base / rec.image); };
}

ImageProvider generated_images(const GeneratedSplit& split) {
  return [&split](const ManifestRecord& rec) { return split.render(rec.image); };
}

std::vector<ObjectRegion> image_regions(const ImageGrid& image, const ManifestRecord& record,
                                        const PipelineConfig& config) {
  if (config.regions == RegionSource::Manifest) return record.objects;
  return propose_regions(image, config.proposals);
}

RecordDescriptor describe_image(const Encoder& encoder, const ImageGrid& image,
                                const ManifestRecord& record, const PipelineConfig& config) {
  const int side = encoder.config().image_side;
  RecordDescriptor out;
  out.id = record.image;

  auto whole = [&]() {
    const auto t0 = Clock::now();
    out.descriptor = encoder.encode(fit_input(image, side)).descriptor;
    out.encode_ms += ms_since(t0);
  };
  if (config.mode == DescriptorMode::WholeImage) {
    whole();
    return out;
  }

  const auto selected = select_and_crop(image, image_regions(image, record, config), config.threshold, side);
  if (selected.empty()) {
    out.whole_image_fallback = true;
    whole();
    return out;
  }
  out.crops = static_cast<int>(selected.size());

  auto t0 = Clock::now();
  std::vector<EncodeResult> encoded;
  std::vector<Descriptor> descriptors;
  for (const auto& sel : selected) {
    encoded.push_back(encoder.encode(sel.crop));
    descriptors.push_back(encoded.back().descriptor);
  }
  out.encode_ms = ms_since(t0);

  switch (config.mode) {
    case DescriptorMode::StageAAvg:
      out.descriptor = average_pool_objects(descriptors);
      break;
    case DescriptorMode::Gem:
      out.descriptor = gem_pool(descriptors, config.gem_p);
      break;
    default: {
      t0 = Clock::now();
      MaoInput input = prepare_mao_input(encoder, selected, encoded);
      const auto refined = refine_descriptor(input.bundle, input.init, config.refine);
      out.descriptor = refined.descriptor;
      out.empty_mask_warning = refined.empty_mask_warning;
      out.refine_ms = ms_since(t0);
      break;
    }
  }
  return out;
}

MaoInput prepare_mao_input(const Encoder& encoder, const std::vector<SelectedCrop>& selected,
                           const std::vector<EncodeResult>& encoded) {
  if (selected.empty() || selected.size() != encoded.size()) {
    throw Error("prepare_mao_input: need one encoding per selected crop");
  }
  MaoInput input;
  std::vector<CropEntry> entries;
  input.init = Vector::Zero(encoded.front().trace.cls_out.size());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const MaskGrid mask = region_patch_mask(selected[i].region, selected[i].window, encoder.config().patch_side);
    // Zero-padded ids keep the summation order equal to the crop order.
    std::string id = std::to_string(i);
    id.insert(0, 6 - std::min<std::size_t>(6, id.size()), '0');
    entries.push_back(prepare_crop(encoder, encoded[i], mask.map, id));
    input.init += encoded[i].trace.cls_out;
  }
  // Mean of the unnormalized object features: the ascent step is absolute,
  // so the init scale sets how far the refinement moves.
  input.init /= static_cast<double>(encoded.size());
  input.bundle = make_bundle(encoder.config(), std::move(entries));
  return input;
}

MaoInput prepare_mao_input(const Encoder& encoder, const std::vector<SelectedCrop>& selected) {
  std::vector<EncodeResult> encoded;
  for (const auto& sel : selected) encoded.push_back(encoder.encode(sel.crop));
  return prepare_mao_input(encoder, selected, encoded);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const int threads = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

std::vector<RecordDescriptor> describe_records(const Encoder& encoder,
                                               const std::vector<const ManifestRecord*>& records,
                                               const ImageProvider& images,
                                               const PipelineConfig& config) {
  std::vector<RecordDescriptor> out(records.size());
  parallel_for(records.size(), config.workers, [&](std::size_t i) {
    try {
      out[i] = describe_image(encoder, images(*records[i]), *records[i], config);
    } catch (const std::exception& e) {
      out[i] = RecordDescriptor{};
      out[i].id = records[i]->image;
      out[i].error = e.what();
    }
  });
  return out;
}

GalleryMetadata gallery_metadata(const ManifestRecord& record) {
  GalleryMetadata meta;
  meta.object_count = static_cast<int>(record.objects.size());
  meta.resolution = record.size.width;
  if (!record.objects.empty()) {
    meta.min_size_ratio = record.objects.front().size_ratio;
    double sum = 0.0;
    for (const auto& o : record.objects) {
      meta.min_size_ratio = std::min(meta.min_size_ratio, o.size_ratio);
      sum += o.size_ratio;
    }
    meta.mean_size_ratio = sum / static_cast<double>(record.objects.size());
  }
  return meta;
}

Index build_gallery_index(const std::vector<RecordDescriptor>& gallery, const Manifest& manifest) {
  std::vector<GalleryRecord> records;
  for (const auto& g : gallery) {
    if (!g.ok()) continue;
    GalleryRecord r;
    r.id = g.id;
    r.descriptor = g.descriptor;
    if (const auto* rec = manifest.find(g.id)) r.metadata = gallery_metadata(*rec);
    records.push_back(std::move(r));
  }
  return build_index(std::move(records));
}

QueryResult query_metadata(const ManifestRecord& query, const Manifest& manifest) {
  QueryResult row;
  row.query_id = query.image;
  const std::string* instance = object_instance(query);
  double ratio_sum = 0.0, clutter_sum = 0.0;
  std::size_t ratio_n = 0, scenes = 0;
  for (const auto& id : query.relevant) {
    const ManifestRecord* scene = manifest.find(id);
    if (!scene) continue;
    ++scenes;
    clutter_sum += static_cast<double>(scene->objects.size());
    if (row.resolution == 0) row.resolution = scene->size.width;
    for (const auto& obj : scene->objects) {
      if (instance && obj.instance_id && *obj.instance_id == *instance) {
        ratio_sum += obj.size_ratio;
        ++ratio_n;
      }
    }
  }
  if (ratio_n > 0) {
    row.size_ratio = ratio_sum / static_cast<double>(ratio_n);
  } else if (!query.objects.empty()) {
    row.size_ratio = query.objects.front().size_ratio;
  }
  if (scenes > 0) row.clutter = clutter_sum / static_cast<double>(scenes);
  if (row.resolution == 0) row.resolution = query.size.width;
  return row;
}

EvalReport evaluate_queries(const Index& index, const std::vector<RecordDescriptor>& queries,
                            const Manifest& manifest, const BucketSpec& buckets) {
  std::vector<QueryResult> rows;
  std::size_t skipped = 0;
  double search_ms = 0.0;
  std::size_t searched = 0;
  for (const auto& q : queries) {
    const ManifestRecord* rec = manifest.find(q.id);
    if (!q.ok() || !rec) {
      ++skipped;
      continue;
    }
    const std::set<std::string> relevant(rec->relevant.begin(), rec->relevant.end());
    const auto t0 = Clock::now();
    const auto hits = index.search(q.descriptor);
    search_ms += ms_since(t0);
    ++searched;
    std::vector<std::string> ranking;
    ranking.reserve(hits.size());
    for (const auto& h : hits) ranking.push_back(index.id(h.index));
    const auto ap = average_precision(ranking, relevant);
    if (!ap) {
      ++skipped;
      continue;
    }
    QueryResult row = query_metadata(*rec, manifest);
    row.ap = *ap;
    rows.push_back(std::move(row));
  }
  EvalReport report = bucketed_report(std::move(rows), buckets);
  report.skipped = skipped;
  report.timing.search_total_s = search_ms / 1000.0;
  if (searched > 0) report.timing.search_ms_per_query = search_ms / static_cast<double>(searched);
  return report;
}

EvalRun evaluate(const Encoder& encoder, const Manifest& manifest, const ImageProvider& images,
                 const PipelineConfig& config, const BucketSpec& buckets) {
  EvalRun run;
  run.gallery = describe_records(encoder, manifest.gallery(), images, config);
  run.queries = describe_records(encoder, manifest.queries(), images, config);
  const Index index = build_gallery_index(run.gallery, manifest);
  run.report = evaluate_queries(index, run.queries, manifest, buckets);

  double enc = 0.0, ref = 0.0, qenc = 0.0;
  for (const auto& g : run.gallery) {
    if (!g.ok()) ++run.failures;
    enc += g.encode_ms;
    ref += g.refine_ms;
  }
  for (const auto& q : run.queries) {
    if (!q.ok()) ++run.failures;
    qenc += q.encode_ms + q.refine_ms;
  }
  if (!run.gallery.empty()) {
    run.report.timing.encode_ms_per_image = enc / static_cast<double>(run.gallery.size());
    run.report.timing.refine_ms_per_image = ref / static_cast<double>(run.gallery.size());
  }
  if (!run.queries.empty()) run.report.timing.query_encode_ms = qenc / static_cast<double>(run.queries.size());
  return run;
}

void save_descriptor_store(const std::filesystem::path& path, DescriptorMode mode,
                           const std::vector<RecordDescriptor>& records) {
  nlohmann::ordered_json j;
  j["mode"] = std::string(mode_name(mode));
  j["dim"] = records.empty() ? 0 : records.front().descriptor.size();
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json e;
    e["id"] = r.id;
    e["descriptor"] = std::vector<double>(r.descriptor.data(), r.descriptor.data() + r.descriptor.size());
    e["encode_ms"] = r.encode_ms;
    e["refine_ms"] = r.refine_ms;
    e["crops"] = r.crops;
    e["whole_image_fallback"] = r.whole_image_fallback;
    e["empty_mask_warning"] = r.empty_mask_warning;
    e["error"] = r.error;
    arr.push_back(std::move(e));
  }
  j["records"] = std::move(arr);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

std::vector<RecordDescriptor> load_descriptor_store(const std::filesystem::path& path,
                                                    DescriptorMode* mode) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open descriptor store " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("descriptor store " + path.string() + ": " + e.what());
  }
  if (mode) *mode = parse_mode(j.at("mode").get<std::string>());
  std::vector<RecordDescriptor> out;
  for (const auto& e : j.at("records")) {
    RecordDescriptor r;
    r.id = e.at("id").get<std::string>();
    const auto values = e.at("descriptor").get<std::vector<double>>();
    r.descriptor = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
    r.encode_ms = e.value("encode_ms", 0.0);
    r.refine_ms = e.value("refine_ms", 0.0);
    r.crops = e.value("crops", 0);
    r.whole_image_fallback = e.value("whole_image_fallback", false);
    r.empty_mask_warning = e.value("empty_mask_warning", false);
    r.error = e.value("error", std::string());
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TrainPair> build_train_pairs(const Manifest& manifest, const ImageProvider& images,
                                         const PipelineConfig& config, int crop_side,
                                         std::size_t max_pairs) {
  const auto queries = manifest.queries();
  std::size_t depth = 0;
  for (const auto* q : queries) depth = std::max(depth, q->relevant.size());
  std::map<std::string, std::vector<ImageGrid>> object_cache;
  std::vector<TrainPair> pairs;
  for (std::size_t r = 0; r < depth; ++r) {
    for (const auto* q : queries) {
      if (max_pairs > 0 && pairs.size() >= max_pairs) return pairs;
      if (r >= q->relevant.size()) continue;
      const ManifestRecord* scene = manifest.find(q->relevant[r]);
      if (!scene) throw Error("train pairs: relevant scene '" + q->relevant[r] + "' missing");
      auto it = object_cache.find(scene->image);
      if (it == object_cache.end()) {
        const ImageGrid image = images(*scene);
        std::vector<ImageGrid> crops;
        for (auto& sel : select_and_crop(image, image_regions(image, *scene, config), config.threshold, crop_side)) {
          crops.push_back(std::move(sel.crop));
        }
        if (crops.empty()) crops.push_back(fit_input(image, crop_side));
        it = object_cache.emplace(scene->image, std::move(crops)).first;
      }
      TrainPair pair;
      pair.query = fit_input(images(*q), crop_side);
      pair.gallery_objects = it->second;
      const std::string* instance = object_instance(*q);
      pair.instance_id = instance ? *instance : q->image;
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

std::vector<TrainPair> build_object_pairs(const Manifest& manifest, const ImageProvider& images,
                                          const ObjectPairParams& params) {
  std::vector<TrainPair> pairs;
  std::uint64_t stream = 0;
  for (const auto* scene : manifest.gallery()) {
    const ImageGrid image = images(*scene);
    for (auto& sel : select_and_crop(image, scene->objects, 0.0, params.crop_side)) {
      if (max_reached(pairs, params.max_pairs)) return pairs;
      const auto instance = sel.region.instance_id ? parse_instance_name(*sel.region.instance_id) : std::nullopt;
      if (!instance) continue;
      TrainPair pair;
      pair.query = render_instance_view(*instance, params.view_side, params.view_ratio,
                                        derive_seed(params.seed, stream++));
      pair.gallery_objects.push_back(std::move(sel.crop));
      pair.instance_id = *sel.region.instance_id;
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

}  // namespace mao
