#include "mao/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace mao {
namespace {

void rank_scores(const Eigen::VectorXd& scores, std::size_t k, std::vector<SearchHit>& out) {
  const std::size_t n = static_cast<std::size_t>(scores.size());
  const std::size_t take = (k == 0 || k > n) ? n : k;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    const double sa = scores[static_cast<Eigen::Index>(a)];
    const double sb = scores[static_cast<Eigen::Index>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  };
  if (take < n) {
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);
  } else {
    std::sort(order.begin(), order.end(), better);
  }
  out.resize(take);
  for (std::size_t i = 0; i < take; ++i) {
    out[i] = {order[i], scores[static_cast<Eigen::Index>(order[i])]};
  }
}

std::string percent_label(double lo, double hi) {
  std::ostringstream out;
  out << std::setprecision(4) << lo * 100.0 << "-" << hi * 100.0 << "%";
  return out.str();
}

nlohmann::ordered_json bucket_json(const std::vector<Bucket>& buckets) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& b : buckets) {
    nlohmann::ordered_json j;
    j["label"] = b.label;
    j["lo"] = b.lo;
    j["hi"] = b.hi;
    j["count"] = b.count;
    j["map"] = b.map ? nlohmann::ordered_json(*b.map) : nlohmann::ordered_json(nullptr);
    arr.push_back(j);
  }
  return arr;
}

template <typename Key, typename KeyFn, typename LabelFn>
std::vector<Bucket> group_by(const std::vector<QueryResult>& rows, KeyFn key, LabelFn label) {
  std::map<Key, std::pair<std::size_t, double>> groups;
  for (const auto& r : rows) {
    auto& g = groups[key(r)];
    g.first += 1;
    g.second += r.ap;
  }
  std::vector<Bucket> out;
  for (const auto& [k, g] : groups) {
    Bucket b;
    b.label = label(k);
    b.lo = static_cast<double>(k);
    b.hi = static_cast<double>(k);
    b.count = g.first;
    b.map = g.second / static_cast<double>(g.first);
    out.push_back(b);
  }
  return out;
}

}  // namespace

std::optional<std::size_t> Index::find(const std::string& id) const {
  const auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

Index build_index(std::vector<GalleryRecord> records) {
  Index index;
  if (records.empty()) return index;
  std::sort(records.begin(), records.end(),
            [](const GalleryRecord& a, const GalleryRecord& b) { return a.id < b.id; });
  const Eigen::Index d = records.front().descriptor.size();
  index.descriptors_.resize(static_cast<Eigen::Index>(records.size()), d);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (i > 0 && records[i - 1].id == r.id) throw Error("build_index: duplicate id '" + r.id + "'");
    if (r.descriptor.size() != d) throw Error("build_index: descriptor dimension mismatch for '" + r.id + "'");
    if (std::abs(r.descriptor.norm() - 1.0) > 1e-6) {
      throw Error("build_index: descriptor of '" + r.id + "' is not unit norm");
    }
    index.descriptors_.row(static_cast<Eigen::Index>(i)) = r.descriptor.transpose();
    index.ids_.push_back(r.id);
    index.metadata_.push_back(r.metadata);
  }
  return index;
}

std::vector<SearchHit> Index::search(const Descriptor& query, std::size_t k) const {
  std::vector<SearchHit> hits;
  if (empty()) return hits;
  if (static_cast<std::size_t>(query.size()) != dim()) throw Error("search: query dimension mismatch");
  const Vector unit = l2_normalized(query);
  const Eigen::VectorXd scores = descriptors_ * unit;
  rank_scores(scores, k, hits);
  return hits;
}

std::vector<std::vector<SearchHit>> Index::search_batch(const Matrix& queries, std::size_t k) const {
  std::vector<std::vector<SearchHit>> out(static_cast<std::size_t>(queries.rows()));
  if (empty()) return out;
  if (static_cast<std::size_t>(queries.cols()) != dim()) throw Error("search: query dimension mismatch");
  Matrix units = queries;
  for (Eigen::Index r = 0; r < units.rows(); ++r) units.row(r) = l2_normalized(units.row(r).transpose()).transpose();
  const Eigen::MatrixXd scores = descriptors_ * units.transpose();  // N x Q, column per query
  for (Eigen::Index q = 0; q < units.rows(); ++q) {
    rank_scores(scores.col(q), k, out[static_cast<std::size_t>(q)]);
  }
  return out;
}

std::optional<double> average_precision(std::span<const std::string> ranking,
                                        const std::set<std::string>& relevant,
                                        std::size_t cutoff) {
  if (relevant.empty()) return std::nullopt;
  const std::size_t limit = cutoff == 0 ? ranking.size() : std::min(cutoff, ranking.size());
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < limit; ++r) {
    if (relevant.count(ranking[r])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

double mean_average_precision(std::span<const double> aps) {
  if (aps.empty()) throw Error("mean_average_precision: no queries");
  double sum = 0.0;
  for (double ap : aps) sum += ap;
  return sum / static_cast<double>(aps.size());
}

EvalReport bucketed_report(std::vector<QueryResult> rows, const BucketSpec& spec) {
  EvalReport report;
  report.rows = std::move(rows);
  if (!report.rows.empty()) {
    std::vector<double> aps;
    for (const auto& r : report.rows) aps.push_back(r.ap);
    report.map = mean_average_precision(aps);
  }
  for (std::size_t b = 0; b + 1 < spec.size_edges.size(); ++b) {
    Bucket bucket;
    bucket.lo = spec.size_edges[b];
    bucket.hi = spec.size_edges[b + 1];
    bucket.label = percent_label(bucket.lo, bucket.hi);
    double sum = 0.0;
    for (const auto& r : report.rows) {
      if (r.size_ratio >= bucket.lo && r.size_ratio < bucket.hi) {
        ++bucket.count;
        sum += r.ap;
      }
    }
    if (bucket.count > 0) bucket.map = sum / static_cast<double>(bucket.count);
    report.size_buckets.push_back(bucket);
  }
  report.clutter_buckets = group_by<long>(
      report.rows, [](const QueryResult& r) { return std::lround(r.clutter); },
      [](long k) { return std::to_string(k) + " objects"; });
  report.resolution_buckets = group_by<int>(
      report.rows, [](const QueryResult& r) { return r.resolution; },
      [](int k) { return std::to_string(k) + "px"; });
  return report;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "query_id,ap,size_ratio,clutter,resolution\n" << std::setprecision(17);
  for (const auto& r : report.rows) {
    out << r.query_id << ',' << r.ap << ',' << r.size_ratio << ',' << r.clutter << ','
        << r.resolution << '\n';
  }
}

std::vector<QueryResult> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "query_id,ap,size_ratio,clutter,resolution") throw Error("report csv: bad header");
  std::vector<QueryResult> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, ap, ratio, clutter, res;
    if (!std::getline(fields, id, ',') || !std::getline(fields, ap, ',') ||
        !std::getline(fields, ratio, ',') || !std::getline(fields, clutter, ',') ||
        !std::getline(fields, res, ',')) {
      throw Error("report csv: malformed row '" + line + "'");
    }
    rows.push_back({id, std::stod(ap), std::stod(ratio), std::stod(clutter), std::stoi(res)});
  }
  return rows;
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::ordered_json j;
  j["map"] = report.map;
  j["queries"] = report.rows.size();
  j["skipped"] = report.skipped;
  j["size_buckets"] = bucket_json(report.size_buckets);
  j["clutter_buckets"] = bucket_json(report.clutter_buckets);
  j["resolution_buckets"] = bucket_json(report.resolution_buckets);
  j["timing"] = {{"encode_ms_per_image", report.timing.encode_ms_per_image},
                 {"refine_ms_per_image", report.timing.refine_ms_per_image},
                 {"query_encode_ms", report.timing.query_encode_ms},
                 {"search_ms_per_query", report.timing.search_ms_per_query},
                 {"search_total_s", report.timing.search_total_s}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace mao
