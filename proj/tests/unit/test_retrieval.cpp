#include <algorithm>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "mao/retrieval.hpp"

using namespace mao;
using doctest::Approx;

namespace {

std::string gid(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "g%04d", i);
  return buf;
}

// Plain loops: scores, a stable sort on (score desc, id asc), then the
// precision at every relevant rank counted from scratch.
struct Oracle {
  std::vector<std::string> ranking;
  std::optional<double> ap;
};

Oracle brute_force(const std::vector<GalleryRecord>& gallery, const Vector& q, const std::set<std::string>& rel) {
  const Vector u = q / q.norm();
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& g : gallery) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < u.size(); ++k) s += g.descriptor[k] * u[k];
    scored.emplace_back(s, g.id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (std::abs(a.first - b.first) > 1e-12) return a.first > b.first;
    return a.second < b.second;
  });
  Oracle o;
  for (const auto& [s, id] : scored) o.ranking.push_back(id);
  if (rel.empty()) return o;
  double sum = 0.0;
  for (std::size_t r = 0; r < o.ranking.size(); ++r) {
    if (!rel.count(o.ranking[r])) continue;
    std::size_t upto = 0;
    for (std::size_t t = 0; t <= r; ++t) upto += rel.count(o.ranking[t]);
    sum += static_cast<double>(upto) / static_cast<double>(r + 1);
  }
  o.ap = sum / static_cast<double>(rel.size());
  return o;
}

}  // namespace

TEST_CASE("average precision examples") {
  const std::vector<std::string> r{"a", "b", "c"};
  CHECK(*average_precision(r, {"a", "c"}) == Approx(0.83333).epsilon(1e-5));
  CHECK(*average_precision(r, {"a"}) == 1.0);
  CHECK(*average_precision(r, {"c"}) == Approx(1.0 / 3.0));
  CHECK(*average_precision(r, {"z"}) == 0.0);
  CHECK_FALSE(average_precision(r, {}).has_value());
  CHECK(*average_precision(r, {"a", "c"}, 2) == Approx(0.5));
  const std::vector<double> aps{1.0, 0.5, 0.0};
  CHECK(mean_average_precision(aps) == Approx(0.5));
  CHECK_THROWS_AS(mean_average_precision(std::vector<double>{}), Error);
}

TEST_CASE("search and AP agree with brute force") {
  Rng rng(2024);
  int with_ties = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(rng.below(50));
    const int d = 1 + static_cast<int>(rng.below(16));
    std::vector<GalleryRecord> gallery;
    for (int i = 0; i < n; ++i) {
      GalleryRecord g;
      g.id = gid(static_cast<int>(rng.below(10000)));
      bool dup = false;
      for (const auto& o : gallery) dup = dup || o.id == g.id;
      if (dup) continue;
      // Some exact duplicates force score ties.
      if (!gallery.empty() && rng.uniform() < 0.15) {
        g.descriptor = gallery[rng.below(gallery.size())].descriptor;
        ++with_ties;
      } else {
        g.descriptor = testing::random_vector(rng, d);
      }
      gallery.push_back(std::move(g));
    }
    std::set<std::string> rel;
    for (const auto& g : gallery)
      if (rng.uniform() < 0.2) rel.insert(g.id);
    const Vector q = testing::random_vector(rng, d, 0.5 + 3.0 * rng.uniform());

    const auto oracle = brute_force(gallery, q, rel);
    const auto index = build_index(gallery);
    const auto hits = index.search(q);
    REQUIRE(hits.size() == gallery.size());
    std::vector<std::string> ranking;
    for (const auto& h : hits) ranking.push_back(index.id(h.index));
    CHECK(ranking == oracle.ranking);
    CHECK(average_precision(ranking, rel) == oracle.ap);

    const std::size_t k = 1 + rng.below(static_cast<std::uint64_t>(gallery.size()));
    const auto top = index.search(q, k);
    REQUIRE(top.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(top[i].index == hits[i].index);
  }
  CHECK(with_ties > 100);
}

TEST_CASE("batch search matches single search") {
  Rng rng(5);
  std::vector<GalleryRecord> gallery;
  for (int i = 0; i < 40; ++i) gallery.push_back({gid(i), testing::random_vector(rng, 8), {}});
  const auto index = build_index(gallery);
  Matrix qs(6, 8);
  for (int r = 0; r < 6; ++r) qs.row(r) = testing::random_vector(rng, 8, 2.0).transpose();
  const auto batch = index.search_batch(qs, 5);
  for (int r = 0; r < 6; ++r) {
    const auto single = index.search(qs.row(r).transpose(), 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(batch[static_cast<std::size_t>(r)][i].index == single[i].index);
  }
}

TEST_CASE("query scale does not change the ranking") {
  Rng rng(8);
  std::vector<GalleryRecord> gallery;
  for (int i = 0; i < 30; ++i) gallery.push_back({gid(i), testing::random_vector(rng, 12), {}});
  const auto index = build_index(gallery);
  const Vector q = testing::random_vector(rng, 12);
  const auto a = index.search(q);
  for (double s : {1e-3, 5.0, 1e6}) {
    const auto b = index.search(Vector(q * s));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].index == b[i].index);
  }
}

TEST_CASE("index construction") {
  const auto empty = build_index({});
  CHECK(empty.empty());
  CHECK(empty.search(Vector::Ones(4)).empty());

  Rng rng(1);
  const Vector v = testing::random_vector(rng, 4);
  CHECK_THROWS_AS(build_index({{"a", v, {}}, {"a", v, {}}}), Error);
  CHECK_THROWS_AS(build_index({{"a", v, {}}, {"b", testing::random_vector(rng, 5), {}}}), Error);
  CHECK_THROWS_AS(build_index({{"a", Vector(v * 2.0), {}}}), Error);

  std::vector<GalleryRecord> big;
  for (int i = 1580; i >= 0; --i) big.push_back({gid(i), testing::random_vector(rng, 64), {}});
  const auto index = build_index(big);
  CHECK(index.size() == 1581);
  CHECK(index.dim() == 64);
  CHECK(index.descriptors().rows() == 1581);
  CHECK(index.id(0) == gid(0));
  CHECK(index.find(gid(77)) == std::size_t{77});
  CHECK_FALSE(index.find("nope").has_value());
  CHECK(index.descriptors().row(77) == big[1580 - 77].descriptor.transpose());
}

TEST_CASE("bucketed report") {
  std::vector<QueryResult> rows{
      {"q0", 1.0, 0.002, 8, 256}, {"q1", 0.5, 0.002, 8, 256}, {"q2", 0.25, 0.005, 6, 512},
      {"q3", 0.0, 0.01, 8, 256},  {"q4", 1.0, 0.02, 7.6, 256},
  };
  const auto rep = bucketed_report(rows);
  CHECK(rep.map == Approx(2.75 / 5));
  REQUIRE(rep.size_buckets.size() == 7);
  CHECK(rep.size_buckets[0].count == 2);
  CHECK(*rep.size_buckets[0].map == Approx(0.75));
  CHECK(rep.size_buckets[1].count == 1);
  CHECK(rep.size_buckets[2].count == 1);
  CHECK(rep.size_buckets[3].count == 1);
  CHECK_FALSE(rep.size_buckets[6].map.has_value());
  REQUIRE(rep.clutter_buckets.size() == 2);
  CHECK(rep.clutter_buckets[1].count == 4);
  REQUIRE(rep.resolution_buckets.size() == 2);
  CHECK(*rep.resolution_buckets[1].map == Approx(0.25));
}

TEST_CASE("report csv round trips") {
  Rng rng(3);
  std::vector<QueryResult> rows;
  for (int i = 0; i < 20; ++i)
    rows.push_back({"q" + std::to_string(i), rng.uniform(), rng.uniform() * 0.05, 1.0 + static_cast<double>(rng.below(9)), 256});
  const auto rep = bucketed_report(rows);
  const auto dir = std::filesystem::temp_directory_path() / "mao_test_report";
  write_report_csv(dir / "r.csv", rep);
  write_report_json(dir / "r.json", rep);
  const auto back = read_report_csv(dir / "r.csv");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].query_id == rows[i].query_id);
    CHECK(back[i].ap == rows[i].ap);
    CHECK(back[i].size_ratio == rows[i].size_ratio);
    CHECK(back[i].clutter == rows[i].clutter);
    CHECK(back[i].resolution == rows[i].resolution);
  }
  CHECK(bucketed_report(back).map == rep.map);
  CHECK(std::filesystem::exists(dir / "r.json"));
}
