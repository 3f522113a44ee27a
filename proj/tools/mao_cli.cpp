#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mao/pipeline.hpp"
#include "mao/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct RunOptions {
  std::string out;
  std::uint64_t seed = 0;
  int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool deterministic = false;
  bool check = false;
};

struct PipelineOptions {
  std::string manifest;
  std::string weights;
  std::string mode = "mao";
  double alpha = 0.03;
  int iters = 80;
  double step = 0.1;
  double threshold = 0.2;
  std::string regions = "proposals";
  double gem_p = 3.0;
};

struct GenOptions {
  int instances = 50;
  int gallery = 200;
  int queries_per_instance = 2;
  int train_instances = 50;
  int train_gallery = 200;
  int distractor_pool = 300;
  int resolution = 256;
  int geometry_side = 0;
  int min_objects = 7;
  int max_objects = 9;
  std::vector<double> ratios{0.005, 0.01, 0.02};
  int query_side = 32;
  double query_ratio = 0.3;
};

// Collects --check failures; each is printed when it is recorded.
struct Checks {
  int failed = 0;
  void expect(bool ok, const std::string& what) {
    std::cout << (ok ? "check ok: " : "CHECK FAILED: ") << what << '\n';
    if (!ok) ++failed;
  }
};

void add_run_options(CLI::App* cmd, RunOptions& run, bool needs_out = true) {
  auto* out = cmd->add_option("--out", run.out, "Output directory");
  if (needs_out) out->required();
  cmd->add_option("--seed", run.seed, "Random seed");
  cmd->add_option("--workers", run.workers, "Worker threads (default: all cores)")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic", run.deterministic, "Process records sequentially");
  cmd->add_flag("--check", run.check, "Assert the command's acceptance properties");
}

void add_pipeline_options(CLI::App* cmd, PipelineOptions& p, bool manifest_required = true) {
  auto* m = cmd->add_option("--manifest", p.manifest, "Manifest (JSON lines)")->check(CLI::ExistingFile);
  if (manifest_required) m->required();
  cmd->add_option("--weights", p.weights, "Encoder weights file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--mode", p.mode, "Descriptor mode")
      ->check(CLI::IsMember({"whole-image", "stage-a-avg", "gem", "mao"}));
  cmd->add_option("--alpha", p.alpha, "Refinement regularization weight");
  cmd->add_option("--iters", p.iters, "Refinement iterations")->check(CLI::NonNegativeNumber);
  cmd->add_option("--step", p.step, "Refinement step size");
  cmd->add_option("--threshold", p.threshold, "Proposal confidence threshold");
  cmd->add_option("--regions", p.regions, "Object regions: proposals or manifest ground truth")
      ->check(CLI::IsMember({"proposals", "manifest"}));
  cmd->add_option("--gem-p", p.gem_p, "GeM exponent");
}

void add_gen_options(CLI::App* cmd, GenOptions& g) {
  cmd->add_option("--instances", g.instances, "Test target instances");
  cmd->add_option("--gallery", g.gallery, "Test gallery scenes");
  cmd->add_option("--queries-per-instance", g.queries_per_instance);
  cmd->add_option("--train-instances", g.train_instances, "Train target instances");
  cmd->add_option("--train-gallery", g.train_gallery, "Train gallery scenes");
  cmd->add_option("--distractor-pool", g.distractor_pool, "Distractor instances per split");
  cmd->add_option("--resolution", g.resolution, "Gallery scene side in pixels");
  cmd->add_option("--geometry-side", g.geometry_side, "Geometry lattice side (0 = resolution)");
  cmd->add_option("--min-objects", g.min_objects);
  cmd->add_option("--max-objects", g.max_objects);
  cmd->add_option("--ratios", g.ratios, "Target size ratios, cycled over instances")->delimiter(',');
  cmd->add_option("--query-side", g.query_side);
  cmd->add_option("--query-ratio", g.query_ratio);
}

mao::BenchmarkParams benchmark_params(const GenOptions& g, std::uint64_t seed) {
  mao::BenchmarkParams p;
  p.n_instances = g.instances;
  p.gallery_size = g.gallery;
  p.queries_per_instance = g.queries_per_instance;
  p.n_train_instances = g.train_instances;
  p.train_gallery_size = g.train_gallery;
  p.distractor_pool = g.distractor_pool;
  p.resolution = g.resolution;
  p.geometry_side = g.geometry_side;
  p.min_objects = g.min_objects;
  p.max_objects = g.max_objects;
  p.ratio_choices = g.ratios;
  p.query_side = g.query_side;
  p.query_ratio = g.query_ratio;
  p.seed = seed;
  return p;
}

int workers_for(const RunOptions& run) { return run.deterministic ? 1 : run.workers; }

mao::PipelineConfig pipeline_config(const PipelineOptions& p, const RunOptions& run) {
  mao::PipelineConfig c;
  c.mode = mao::parse_mode(p.mode);
  c.refine.alpha = p.alpha;
  c.refine.iterations = p.iters;
  c.refine.step_size = p.step;
  c.refine.seed = run.seed;
  c.refine.validate();
  c.threshold = p.threshold;
  c.regions = p.regions == "manifest" ? mao::RegionSource::Manifest : mao::RegionSource::Proposals;
  c.gem_p = p.gem_p;
  c.workers = workers_for(run);
  return c;
}

// Config echo, version and seed, so a run can be repeated from its directory.
void write_run_header(const fs::path& out, const CLI::App& cmd, std::uint64_t seed, int argc, char** argv) {
  fs::create_directories(out);
  json config;
  for (const CLI::Option* opt : cmd.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    config[opt->get_lnames().front()] = value;
  }
  json j;
  j["command"] = cmd.get_name();
  j["config"] = config;
  j["version"] = std::string(mao::version_string());
  j["seed"] = seed;
  auto args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  j["argv"] = args;
  std::ofstream(out / "config.json") << j.dump(2) << '\n';
}

void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

void write_record_log(const fs::path& path, const std::vector<mao::RecordDescriptor>& records) {
  std::ofstream out(path);
  out << "id,crops,encode_ms,refine_ms,whole_image_fallback,empty_mask_warning,error\n";
  for (const auto& r : records) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.id << ',' << r.crops << ',' << r.encode_ms << ',' << r.refine_ms << ','
        << r.whole_image_fallback << ',' << r.empty_mask_warning << ',' << err << '\n';
  }
}

std::size_t count_failures(const std::vector<mao::RecordDescriptor>& records) {
  std::size_t n = 0;
  for (const auto& r : records) {
    if (!r.ok()) {
      std::cerr << "record " << r.id << " failed: " << r.error << '\n';
      ++n;
    }
  }
  return n;
}

// Writes report.csv/report.json and checks that re-aggregating the CSV rows
// reproduces the summary.
void write_report(const fs::path& dir, const mao::EvalReport& report, Checks* checks) {
  mao::write_report_csv(dir / "report.csv", report);
  mao::write_report_json(dir / "report.json", report);
  if (!checks) return;
  const auto rows = mao::read_report_csv(dir / "report.csv");
  const auto again = mao::bucketed_report(rows);
  checks->expect(rows.size() == report.rows.size() && std::abs(again.map - report.map) <= 1e-12,
                 "report re-aggregation matches raw rows (" + dir.string() + ")");
}

mao::EvalRun run_eval(const mao::Encoder& encoder, const mao::Manifest& manifest,
                      const mao::ImageProvider& images, const mao::PipelineConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  auto run = mao::evaluate(encoder, manifest, images, config);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << std::setw(12) << mao::mode_name(config.mode) << "  mAP " << std::fixed << std::setprecision(4)
            << run.report.map << "  (" << run.report.rows.size() << " queries, " << std::setprecision(1) << s
            << " s)" << std::defaultfloat << std::setprecision(6) << '\n';
  return run;
}

// ---- gen ----

int cmd_gen(const CLI::App* cmd, const RunOptions& run, const GenOptions& g, int argc, char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  const auto params = benchmark_params(g, run.seed);
  const auto bench = mao::generate_benchmark(params);
  const auto manifest = mao::write_benchmark(bench, params, out, workers_for(run));
  json summary;
  summary["queries"] = manifest.queries().size();
  summary["gallery"] = manifest.gallery().size();
  summary["train_queries"] = bench.train.manifest.queries().size();
  summary["train_gallery"] = bench.train.manifest.gallery().size();
  write_json(out / "summary.json", summary);
  std::cout << "wrote " << manifest.queries().size() << " queries, " << manifest.gallery().size()
            << " gallery scenes to " << out << '\n';
  if (!run.check) return 0;

  Checks checks;
  const auto reloaded = mao::load_manifest(out / "manifest.jsonl");
  checks.expect(mao::serialize_manifest(reloaded) == mao::serialize_manifest(manifest),
                "manifest round-trips byte-identically");
  auto instances = [](const mao::Manifest& m) {
    std::set<std::string> ids;
    for (const auto& r : m.records)
      for (const auto& o : r.objects)
        if (o.instance_id) ids.insert(*o.instance_id);
    return ids;
  };
  const auto test_ids = instances(manifest);
  const auto train_ids = instances(bench.train.manifest);
  bool disjoint = std::none_of(test_ids.begin(), test_ids.end(), [&](const auto& id) { return train_ids.count(id); });
  checks.expect(disjoint, "train and test instance sets are disjoint");
  bool ratios_ok = true;
  for (const auto& [id, spec] : bench.test.scenes) {
    const auto* rec = manifest.find(id);
    for (const auto& o : rec->objects) {
      if (std::abs(o.size_ratio - spec.target_ratio) > 0.2 * spec.target_ratio + 1e-12) ratios_ok = false;
    }
  }
  checks.expect(ratios_ok, "every object ratio within 20% of its scene target");
  bool relevant_ok = true;
  for (const auto* q : manifest.queries()) relevant_ok = relevant_ok && !q->relevant.empty();
  checks.expect(relevant_ok, "every query has a relevant gallery scene");
  return checks.failed == 0 ? 0 : 1;
}

// ---- train ----

struct TrainOptions {
  std::string manifest;
  std::string weights;
  std::string recipe = "stage-a";
  std::string pairs = "query";
  int rank = 4;
  double lr = 5e-5;
  double lr_decay = 0.93;
  double decay_every = 1.0;
  double lr_floor = 1e-6;
  int batch = 16;
  int epochs = 1;
  int steps = 0;
  double tau = 0.07;
  double weight_decay = 0.01;
  std::size_t max_pairs = 0;
  double threshold = 0.2;
  std::string regions = "proposals";
};

int cmd_train(const CLI::App* cmd, const RunOptions& run, const TrainOptions& t, int argc,
              char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  mao::TrainConfig config = t.recipe == "backbone" ? mao::TrainConfig::backbone_mode() : mao::TrainConfig{};
  auto given = [&](const char* name) { return cmd->count(name) > 0; };
  if (given("--rank")) config.adapter_rank = t.rank;
  if (given("--lr")) config.lr_init = t.lr;
  if (given("--lr-decay")) config.lr_decay = t.lr_decay;
  if (given("--decay-every")) config.decay_every = t.decay_every;
  if (given("--lr-floor")) config.lr_floor = t.lr_floor;
  if (given("--batch")) config.batch_size = t.batch;
  if (given("--epochs")) config.epochs = t.epochs;
  if (given("--steps")) config.max_steps = t.steps;
  if (given("--tau")) config.temperature = t.tau;
  if (given("--weight-decay")) config.weight_decay = t.weight_decay;
  config.seed = run.seed;
  config.validate();

  mao::WeightStore weights;
  if (t.weights.empty()) {
    mao::EncoderConfig ec;
    ec.seed = run.seed;
    weights = mao::init_encoder(ec);
  } else {
    weights = mao::load_weights(t.weights);
  }

  const auto manifest = mao::load_manifest(t.manifest);
  const auto images = mao::disk_images(manifest);
  const int side = weights.config.image_side;
  std::vector<mao::TrainPair> pairs;
  if (t.pairs == "object") {
    mao::ObjectPairParams op;
    op.crop_side = side;
    op.view_side = side;
    op.seed = mao::derive_seed(run.seed, 7);
    op.max_pairs = t.max_pairs;
    pairs = mao::build_object_pairs(manifest, images, op);
  } else {
    mao::PipelineConfig pc;
    pc.threshold = t.threshold;
    pc.regions = t.regions == "manifest" ? mao::RegionSource::Manifest : mao::RegionSource::Proposals;
    pairs = mao::build_train_pairs(manifest, images, pc, side, t.max_pairs);
  }
  std::cout << pairs.size() << " training pairs\n";

  const int log_every = 50;
  const auto result = mao::train_stage_a(weights, pairs, config, [&](const mao::TrainLogRow& row) {
    if (row.step % log_every == 0) std::cout << "step " << row.step << "  lr " << row.lr << "  loss " << row.loss << '\n';
  });
  mao::persist_weights(result.weights, out / "weights.maow");
  mao::write_training_log(out / "train_log.csv", result.log);

  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(10, result.log.size() / 2));
  const double first = mao::running_loss(result.log, window, false);
  const double last = mao::running_loss(result.log, window, true);
  json summary;
  summary["pairs"] = pairs.size();
  summary["steps"] = result.log.size();
  summary["running_loss_window"] = window;
  summary["initial_running_loss"] = first;
  summary["final_running_loss"] = last;
  summary["adapter_rank"] = config.adapter_rank;
  summary["lr_init"] = config.lr_init;
  write_json(out / "summary.json", summary);
  std::cout << "running loss " << first << " -> " << last << '\n';
  if (!run.check) return 0;
  Checks checks;
  checks.expect(last < first, "final running loss below initial running loss");
  return checks.failed == 0 ? 0 : 1;
}

// ---- encode-gallery ----

int cmd_encode_gallery(const CLI::App* cmd, const RunOptions& run, const PipelineOptions& p, int argc,
                       char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  const auto manifest = mao::load_manifest(p.manifest);
  const mao::Encoder encoder(mao::load_weights(p.weights));
  const auto config = pipeline_config(p, run);
  const auto records = mao::describe_records(encoder, manifest.gallery(), mao::disk_images(manifest), config);
  mao::save_descriptor_store(out / "descriptors.json", config.mode, records);
  write_record_log(out / "records.csv", records);
  const std::size_t failures = count_failures(records);

  double enc = 0.0, ref = 0.0;
  for (const auto& r : records) {
    enc += r.encode_ms;
    ref += r.refine_ms;
  }
  const double n = std::max<double>(1.0, static_cast<double>(records.size()));
  write_json(out / "timing.json", {{"images", records.size()},
                                   {"failures", failures},
                                   {"encode_ms_per_image", enc / n},
                                   {"refine_ms_per_image", ref / n}});
  std::cout << "encoded " << records.size() - failures << "/" << records.size() << " gallery images ("
            << mao::mode_name(config.mode) << "), " << enc / n << " ms encode + " << ref / n
            << " ms refine per image\n";
  int code = failures == 0 ? 0 : 1;
  if (run.check) {
    Checks checks;
    bool unit = true;
    for (const auto& r : records) {
      if (r.ok() && (!r.descriptor.allFinite() || std::abs(r.descriptor.norm() - 1.0) > 1e-9)) unit = false;
    }
    checks.expect(unit, "all descriptors finite and unit norm");
    if (checks.failed) code = 1;
  }
  return code;
}

std::vector<mao::RecordDescriptor> gallery_from_store(const std::string& path, mao::DescriptorMode mode) {
  mao::DescriptorMode stored{};
  auto records = mao::load_descriptor_store(path, &stored);
  if (stored != mode) {
    throw mao::Error("gallery store was encoded with mode '" + std::string(mao::mode_name(stored)) +
                     "', not '" + std::string(mao::mode_name(mode)) + "'");
  }
  return records;
}

// ---- query ----

int cmd_query(const CLI::App* cmd, const RunOptions& run, const PipelineOptions& p, const std::string& store,
              const std::vector<std::string>& query_ids, std::size_t top_k, int argc, char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  const auto manifest = mao::load_manifest(p.manifest);
  const mao::Encoder encoder(mao::load_weights(p.weights));
  const auto config = pipeline_config(p, run);
  const auto gallery = gallery_from_store(store, config.mode);
  const auto index = mao::build_gallery_index(gallery, manifest);

  std::vector<const mao::ManifestRecord*> queries;
  if (query_ids.empty()) {
    queries = manifest.queries();
  } else {
    for (const auto& id : query_ids) {
      const auto* rec = manifest.find(id);
      if (!rec) throw mao::Error("query '" + id + "' not in manifest");
      queries.push_back(rec);
    }
  }
  const auto described = mao::describe_records(encoder, queries, mao::disk_images(manifest), config);
  std::size_t failures = count_failures(described);
  std::ofstream csv(out / "rankings.csv");
  csv << "query_id,rank,gallery_id,score,relevant\n" << std::setprecision(17);
  for (std::size_t i = 0; i < described.size(); ++i) {
    if (!described[i].ok()) continue;
    const std::set<std::string> relevant(queries[i]->relevant.begin(), queries[i]->relevant.end());
    const auto hits = index.search(described[i].descriptor, top_k);
    for (std::size_t r = 0; r < hits.size(); ++r) {
      const auto& id = index.id(hits[r].index);
      csv << described[i].id << ',' << r + 1 << ',' << id << ',' << hits[r].score << ','
          << (relevant.count(id) ? 1 : 0) << '\n';
    }
  }
  std::cout << "ranked " << described.size() - failures << " queries against " << index.size()
            << " gallery images\n";
  return failures == 0 ? 0 : 1;
}

// ---- eval ----

int cmd_eval(const CLI::App* cmd, const RunOptions& run, const PipelineOptions& p, const std::string& store,
             double max_ratio, std::optional<double> min_map, int argc, char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  auto manifest = mao::load_manifest(p.manifest);
  if (max_ratio < 1.0) manifest = mao::size_filter_subset(manifest, max_ratio);
  const mao::Encoder encoder(mao::load_weights(p.weights));
  const auto config = pipeline_config(p, run);
  const auto images = mao::disk_images(manifest);

  mao::EvalRun result;
  if (store.empty()) {
    result = run_eval(encoder, manifest, images, config);
  } else {
    result.gallery = gallery_from_store(store, config.mode);
    result.queries = mao::describe_records(encoder, manifest.queries(), images, config);
    result.report = mao::evaluate_queries(mao::build_gallery_index(result.gallery, manifest), result.queries,
                                          manifest);
    for (const auto& r : result.gallery) result.failures += r.ok() ? 0 : 1;
    for (const auto& r : result.queries) result.failures += r.ok() ? 0 : 1;
    std::cout << "mAP " << result.report.map << " over " << result.report.rows.size() << " queries\n";
  }
  count_failures(result.gallery);
  count_failures(result.queries);
  write_record_log(out / "queries.csv", result.queries);
  Checks checks;
  write_report(out, result.report, run.check ? &checks : nullptr);
  if (run.check && min_map) checks.expect(result.report.map >= *min_map, "mAP >= " + std::to_string(*min_map));
  return (result.failures == 0 && checks.failed == 0) ? 0 : 1;
}

// ---- ablate ----

int cmd_ablate(const CLI::App* cmd, const RunOptions& run, const PipelineOptions& p,
               const std::vector<std::string>& modes, double min_gap, int argc, char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  const auto manifest = mao::load_manifest(p.manifest);
  const mao::Encoder encoder(mao::load_weights(p.weights));
  const auto images = mao::disk_images(manifest);

  Checks checks;
  std::size_t failures = 0;
  std::map<std::string, double> maps;
  std::ofstream table(out / "ablation.csv");
  table << "mode,map,queries,skipped,encode_ms_per_image,refine_ms_per_image";
  const auto size_labels = mao::bucketed_report({}).size_buckets;
  for (const auto& b : size_labels) table << ",map_" << b.label;
  table << '\n';
  for (const auto& name : modes) {
    PipelineOptions po = p;
    po.mode = name;
    const auto config = pipeline_config(po, run);
    const auto result = run_eval(encoder, manifest, images, config);
    failures += result.failures;
    count_failures(result.gallery);
    count_failures(result.queries);
    write_report(out / name, result.report, run.check ? &checks : nullptr);
    maps[name] = result.report.map;
    table << name << ',' << std::setprecision(10) << result.report.map << ',' << result.report.rows.size() << ','
          << result.report.skipped << ',' << result.report.timing.encode_ms_per_image << ','
          << result.report.timing.refine_ms_per_image;
    for (const auto& b : result.report.size_buckets) {
      table << ',';
      if (b.map) table << *b.map;
    }
    table << '\n';
  }
  json summary;
  for (const auto& [k, v] : maps) summary[k] = v;
  write_json(out / "ablation.json", summary);
  if (run.check) {
    auto has = [&](const char* m) { return maps.count(m) > 0; };
    if (has("whole-image") && has("stage-a-avg")) {
      checks.expect(maps["whole-image"] <= maps["stage-a-avg"], "mAP(whole-image) <= mAP(stage-a-avg)");
    }
    if (has("stage-a-avg") && has("mao")) {
      checks.expect(maps["stage-a-avg"] <= maps["mao"], "mAP(stage-a-avg) <= mAP(mao)");
    }
    if (has("whole-image") && has("mao")) {
      checks.expect(maps["mao"] - maps["whole-image"] >= min_gap,
                    "mAP(mao) - mAP(whole-image) >= " + std::to_string(min_gap));
    }
  }
  return (failures == 0 && checks.failed == 0) ? 0 : 1;
}

// ---- sweep ----

struct SweepPoint {
  double value = 0.0;
  mao::EvalReport report;
  std::size_t failures = 0;
};

int cmd_sweep(const CLI::App* cmd, const RunOptions& run, const PipelineOptions& p, const GenOptions& g,
              const std::string& kind, std::vector<double> grid, double noise, int argc, char** argv) {
  const fs::path out = run.out;
  write_run_header(out, *cmd, run.seed, argc, argv);
  const mao::Encoder encoder(mao::load_weights(p.weights));
  const auto base = benchmark_params(g, run.seed);
  Checks checks;
  std::vector<SweepPoint> points;

  auto eval_point = [&](double value, const mao::Manifest& manifest, const mao::ImageProvider& images,
                        const PipelineOptions& po) {
    std::cout << kind << " = " << value << ": ";
    const auto result = run_eval(encoder, manifest, images, pipeline_config(po, run));
    count_failures(result.gallery);
    count_failures(result.queries);
    std::ostringstream name;
    name << kind << "_" << value;
    write_report(out / name.str(), result.report, run.check ? &checks : nullptr);
    points.push_back({value, result.report, result.failures});
  };

  if (kind == "alpha" || kind == "iterations") {
    if (p.manifest.empty()) throw mao::Error("sweep " + kind + " needs --manifest");
    const auto manifest = mao::load_manifest(p.manifest);
    const auto images = mao::disk_images(manifest);
    for (double v : grid) {
      PipelineOptions po = p;
      if (kind == "alpha") po.alpha = v;
      else po.iters = static_cast<int>(v);
      eval_point(v, manifest, images, po);
    }
  } else if (kind == "size") {
    for (double v : grid) {
      auto params = base;
      params.ratio_choices = {v};
      const auto split = mao::generate_benchmark(params).test;
      eval_point(v, split.manifest, mao::generated_images(split), p);
    }
  } else if (kind == "clutter") {
    std::sort(grid.begin(), grid.end());
    const int max_j = static_cast<int>(grid.back());
    const auto series = mao::clutter_series(base, max_j);
    for (double v : grid) {
      const auto& split = series.at(static_cast<std::size_t>(v));
      eval_point(v, split.manifest, mao::generated_images(split), p);
    }
  } else if (kind == "resolution") {
    std::sort(grid.begin(), grid.end());
    std::vector<int> resolutions;
    for (double v : grid) resolutions.push_back(static_cast<int>(v));
    const auto series = mao::resolution_series(base, resolutions);
    for (std::size_t i = 0; i < series.size(); ++i) {
      eval_point(grid[i], series[i].manifest, mao::generated_images(series[i]), p);
    }
    if (run.check) {
      bool identical = true;
      for (std::size_t i = 1; i < series.size(); ++i) {
        const auto& a = series.front().manifest.records;
        const auto& b = series[i].manifest.records;
        identical = identical && a.size() == b.size();
        for (std::size_t r = 0; identical && r < a.size(); ++r) {
          identical = a[r].image == b[r].image && a[r].objects.size() == b[r].objects.size();
          for (std::size_t o = 0; identical && o < a[r].objects.size(); ++o) {
            identical = a[r].objects[o].size_ratio == b[r].objects[o].size_ratio;
          }
        }
      }
      checks.expect(identical, "size ratios bit-identical across resolutions");
    }
  } else {
    throw mao::Error("unknown sweep kind '" + kind + "'");
  }

  std::ofstream csv(out / "sweep.csv");
  csv << "kind,value,map,queries,skipped,failures\n" << std::setprecision(10);
  std::size_t failures = 0;
  for (const auto& pt : points) {
    csv << kind << ',' << pt.value << ',' << pt.report.map << ',' << pt.report.rows.size() << ','
        << pt.report.skipped << ',' << pt.failures << '\n';
    failures += pt.failures;
  }

  if (run.check && points.size() >= 2) {
    if (kind == "clutter") {
      bool ok = true;
      for (std::size_t i = 1; i < points.size(); ++i) ok = ok && points[i].report.map <= points[i - 1].report.map + noise;
      checks.expect(ok, "mAP non-increasing in clutter within " + std::to_string(noise));
    } else if (kind == "size") {
      bool ok = true;
      for (std::size_t i = 1; i < points.size(); ++i) ok = ok && points[i].report.map >= points[i - 1].report.map;
      checks.expect(ok, "mAP non-decreasing in object size");
    } else if (kind == "resolution") {
      checks.expect(points.back().report.map >= points.front().report.map,
                    "mAP at the highest resolution >= mAP at the lowest");
    }
  }
  return (failures == 0 && checks.failed == 0) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small-object image retrieval: synthetic benchmarks, training, multi-object descriptors"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mao::version_string()));
  app.option_defaults()->always_capture_default();

  RunOptions run;
  PipelineOptions pipe;
  GenOptions gen;
  TrainOptions train;
  std::string store;
  std::vector<std::string> query_ids;
  std::size_t top_k = 10;
  double max_ratio = 1.0;
  std::optional<double> min_map;
  std::vector<std::string> modes{"whole-image", "stage-a-avg", "gem", "mao"};
  double min_gap = 0.05;
  std::string kind;
  std::vector<double> grid;
  double noise = 0.02;

  auto* g = app.add_subcommand("gen", "Generate a synthetic benchmark (test and train splits)");
  add_run_options(g, run);
  add_gen_options(g, gen);

  auto* t = app.add_subcommand("train", "Contrastive fine-tuning on a training manifest");
  add_run_options(t, run);
  t->add_option("--manifest", train.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--weights", train.weights, "Initial weights (default: random init from --seed)")
      ->check(CLI::ExistingFile);
  t->add_option("--recipe", train.recipe, "Defaults: stage-a (adapters) or backbone (full, constant lr)")
      ->check(CLI::IsMember({"stage-a", "backbone"}));
  t->add_option("--pairs", train.pairs, "query: query vs all scene objects; object: instance view vs one object")
      ->check(CLI::IsMember({"query", "object"}));
  t->add_option("--rank", train.rank, "Adapter rank (0 = full fine-tune)");
  t->add_option("--lr", train.lr);
  t->add_option("--lr-decay", train.lr_decay);
  t->add_option("--decay-every", train.decay_every, "Steps per decay application");
  t->add_option("--lr-floor", train.lr_floor);
  t->add_option("--batch", train.batch);
  t->add_option("--epochs", train.epochs);
  t->add_option("--steps", train.steps, "Step count (overrides epochs)");
  t->add_option("--tau", train.tau, "InfoNCE temperature");
  t->add_option("--weight-decay", train.weight_decay);
  t->add_option("--max-pairs", train.max_pairs);
  t->add_option("--threshold", train.threshold, "Proposal confidence threshold (query pairs)");
  t->add_option("--regions", train.regions)->check(CLI::IsMember({"proposals", "manifest"}));

  auto* e = app.add_subcommand("encode-gallery", "Encode every gallery image into a descriptor store");
  add_run_options(e, run);
  add_pipeline_options(e, pipe);

  auto* q = app.add_subcommand("query", "Rank the gallery for queries");
  add_run_options(q, run);
  add_pipeline_options(q, pipe);
  q->add_option("--gallery-store", store, "Descriptor store from encode-gallery")->required()->check(CLI::ExistingFile);
  q->add_option("--query", query_ids, "Query image ids (default: all)");
  q->add_option("--top-k", top_k, "Hits per query (0 = all)");

  auto* v = app.add_subcommand("eval", "Encode, search and score; writes the evaluation report");
  add_run_options(v, run);
  add_pipeline_options(v, pipe);
  v->add_option("--gallery-store", store, "Reuse an encoded gallery")->check(CLI::ExistingFile);
  v->add_option("--max-ratio", max_ratio, "Keep targets with size ratio <= this");
  v->add_option("--min-map", min_map, "With --check, required mAP");

  auto* s = app.add_subcommand("sweep", "Evaluate over a parameter grid");
  add_run_options(s, run);
  add_pipeline_options(s, pipe, false);
  add_gen_options(s, gen);
  s->add_option("--kind", kind, "Swept parameter")
      ->required()
      ->check(CLI::IsMember({"alpha", "iterations", "size", "clutter", "resolution"}));
  s->add_option("--grid", grid, "Grid values")->required()->delimiter(',');
  s->add_option("--noise", noise, "Tolerance of the clutter monotonicity check");

  auto* a = app.add_subcommand("ablate", "Evaluate every descriptor mode on one manifest");
  add_run_options(a, run);
  add_pipeline_options(a, pipe);
  a->add_option("--modes", modes, "Modes to compare")->delimiter(',');
  a->add_option("--min-gap", min_gap, "With --check, required mao minus whole-image mAP");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g->parsed()) return cmd_gen(g, run, gen, argc, argv);
    if (t->parsed()) return cmd_train(t, run, train, argc, argv);
    if (e->parsed()) return cmd_encode_gallery(e, run, pipe, argc, argv);
    if (q->parsed()) return cmd_query(q, run, pipe, store, query_ids, top_k, argc, argv);
    if (v->parsed()) return cmd_eval(v, run, pipe, store, max_ratio, min_map, argc, argv);
    if (s->parsed()) return cmd_sweep(s, run, pipe, gen, kind, grid, noise, argc, argv);
    if (a->parsed()) {
      for (const auto& m : modes) mao::parse_mode(m);
      return cmd_ablate(a, run, pipe, modes, min_gap, argc, argv);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 2;
  }
  return 0;
}
