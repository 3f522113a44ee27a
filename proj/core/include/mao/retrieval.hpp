#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mao/numkit.hpp"

namespace mao {

struct GalleryMetadata {
  int object_count = 0;
  double min_size_ratio = 0.0;
  double mean_size_ratio = 0.0;
  int resolution = 0;
};

struct GalleryRecord {
  std::string id;
  Descriptor descriptor;  // unit norm
  GalleryMetadata metadata;
};

struct SearchHit {
  std::size_t index = 0;  // position in the index (ascending-id order)
  double score = 0.0;
};

// Exact cosine-similarity index over unit descriptors. Records are stored
// sorted by id in one contiguous N x d matrix, so ties in score resolve to the
// smaller id. Immutable after build; concurrent searches are safe.
class Index {
 public:
  Index() = default;

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(descriptors_.cols()); }
  bool empty() const { return ids_.empty(); }

  const std::string& id(std::size_t i) const { return ids_[i]; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& descriptors() const { return descriptors_; }
  const GalleryMetadata& metadata(std::size_t i) const { return metadata_[i]; }
  std::optional<std::size_t> find(const std::string& id) const;

  // Top-k by cosine, descending, ties by ascending id. k larger than the
  // gallery (or 0) returns the full ranking.
  std::vector<SearchHit> search(const Descriptor& query, std::size_t k = 0) const;
  std::vector<std::vector<SearchHit>> search_batch(const Matrix& queries, std::size_t k = 0) const;

 private:
  friend Index build_index(std::vector<GalleryRecord> records);

  std::vector<std::string> ids_;
  Matrix descriptors_;
  std::vector<GalleryMetadata> metadata_;
};

// Throws on duplicate ids, mixed dimensions or non-unit descriptors.
Index build_index(std::vector<GalleryRecord> records);

// (1/|relevant|) * sum over relevant hits at rank r of hits_so_far / r.
// `cutoff` > 0 only counts the first `cutoff` ranks (mAP@K mode). Returns
// nullopt when the relevant set is empty, which marks the query as skipped.
std::optional<double> average_precision(std::span<const std::string> ranking,
                                        const std::set<std::string>& relevant,
                                        std::size_t cutoff = 0);

// Arithmetic mean; throws on an empty list.
double mean_average_precision(std::span<const double> aps);

struct QueryResult {
  std::string query_id;
  double ap = 0.0;
  double size_ratio = 0.0;
  double clutter = 0.0;
  int resolution = 0;
};

struct Bucket {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> map;  // absent for an empty bucket
};

struct BucketSpec {
  // Half-open [edge_i, edge_{i+1}) size-ratio buckets. The defaults separate
  // 0.2% / 0.5% / 1% / 2% objects at their geometric midpoints.
  std::vector<double> size_edges{0.0, 0.00316, 0.00707, 0.01414, 0.02828, 0.05, 0.15, 1.0};
};

struct Timing {
  double encode_ms_per_image = 0.0;
  double refine_ms_per_image = 0.0;
  double query_encode_ms = 0.0;
  double search_ms_per_query = 0.0;
  double search_total_s = 0.0;
};

struct EvalReport {
  std::vector<QueryResult> rows;
  double map = 0.0;
  std::size_t skipped = 0;
  std::vector<Bucket> size_buckets;
  std::vector<Bucket> clutter_buckets;     // one per rounded object count
  std::vector<Bucket> resolution_buckets;  // one per distinct resolution
  Timing timing;
};

EvalReport bucketed_report(std::vector<QueryResult> rows, const BucketSpec& spec = {});

// CSV: query_id,ap,size_ratio,clutter,resolution (one row per query).
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
std::vector<QueryResult> read_report_csv(const std::filesystem::path& path);
// JSON summary: mAP, bucket tables and timings.
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace mao
