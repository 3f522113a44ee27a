#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "mao/object_source.hpp"
#include "mao/synthbench.hpp"

using namespace mao;
using doctest::Approx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mao_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Gallery image with one 10x10 masked object, a query of the same instance.
fs::path write_small_manifest(const fs::path& dir) {
  write_ppm(dir / "g.ppm", ImageGrid(100, 100, 3, 0.5));
  write_ppm(dir / "q.ppm", ImageGrid(32, 32, 3, 0.5));
  write_pbm(dir / "g_m.pbm", BinaryMask(10, 10, 1));
  std::ofstream out(dir / "manifest.jsonl");
  out << R"({"image":"g.ppm","split":"gallery","objects":[{"bbox":[5,6,10,10],"mask":"g_m.pbm","conf":0.9,"id":"inst_0001"},{"bbox":[50,50,20,10],"mask":null,"conf":1.0,"id":null}]})"
      << "\n"
      << R"({"image":"q.ppm","split":"query","objects":[{"bbox":[0,0,32,32],"mask":null,"conf":1.0,"id":"inst_0001"}],"relevant":["g.ppm"]})"
      << "\n";
  return dir / "manifest.jsonl";
}

std::string expect_error(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_manifest(in, ".", false);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

ImageGrid uniform_with(const ImageGrid& sprite, int side, int ox, int oy) {
  ImageGrid img(side, side, 3, 0.5);
  for (int y = 0; y < sprite.height; ++y)
    for (int x = 0; x < sprite.width; ++x) {
      bool lit = false;
      for (int c = 0; c < 3; ++c) lit = lit || sprite.at(x, y, c) > 0.0;
      if (!lit) continue;
      for (int c = 0; c < 3; ++c) img.at(ox + x, oy + y, c) = sprite.at(x, y, c);
    }
  return img;
}

}  // namespace

TEST_CASE("bbox iou") {
  CHECK(bbox_iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
  CHECK(bbox_iou({0, 0, 10, 10}, {10, 0, 10, 10}) == 0.0);
  CHECK(bbox_iou({0, 0, 10, 10}, {5, 0, 10, 10}) == Approx(50.0 / 150.0));
}

TEST_CASE("manifest loads, measures ratios and round trips") {
  const auto dir = fresh_dir("manifest");
  const auto m = load_manifest(write_small_manifest(dir));
  REQUIRE(m.records.size() == 2);
  const auto& g = *m.find("g.ppm");
  CHECK(g.size.width == 100);
  CHECK(g.objects[0].size_ratio == Approx(0.01));
  CHECK_FALSE(g.objects[0].ratio_from_bbox);
  CHECK(g.objects[0].confidence == 0.9);
  CHECK(g.objects[1].size_ratio == Approx(0.02));
  CHECK(g.objects[1].ratio_from_bbox);
  CHECK_FALSE(g.objects[1].instance_id.has_value());
  CHECK(m.queries().size() == 1);
  CHECK(m.gallery().size() == 1);
  CHECK(m.queries()[0]->relevant == std::vector<std::string>{"g.ppm"});

  const auto text = serialize_manifest(m);
  save_manifest(m, dir / "again.jsonl");
  const auto again = load_manifest(dir / "again.jsonl");
  CHECK(serialize_manifest(again) == text);
  std::ifstream a(dir / "manifest.jsonl"), b(dir / "again.jsonl");
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("manifest errors carry line numbers") {
  const std::string good = R"({"image":"a","split":"gallery","objects":[]})";
  CHECK(expect_error(good + "\n{\"image\":\"b\"}\n").find("line 2") != std::string::npos);
  CHECK(expect_error(good + "\n" + good + "\n").find("duplicate") != std::string::npos);
  CHECK(expect_error("not json\n").find("line 1") != std::string::npos);
  CHECK(expect_error(R"({"image":"a","split":"side","objects":[]})").find("split") != std::string::npos);
  CHECK(expect_error(R"({"image":"q","split":"query","objects":[]})").find("relevant") != std::string::npos);
  CHECK(expect_error(good + "\n" + R"({"image":"q","split":"query","objects":[],"relevant":["zz"]})")
            .find("line 2") != std::string::npos);
  CHECK(expect_error(R"({"image":"a","split":"gallery","objects":[{"bbox":[0,0,1,1],"mask":null,"conf":1,"id":null,"x":1}]})")
            .find("line 1") != std::string::npos);

  const auto dir = fresh_dir("manifest_missing");
  std::ofstream(dir / "m.jsonl") << good << "\n";
  CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"), doctest::Contains("not found"), Error);
}

TEST_CASE("blank image has no proposals") {
  CHECK(propose_regions(ImageGrid(64, 64, 3, 0.3)).empty());
}

TEST_CASE("one sprite gives one matching proposal") {
  const auto sprite = render_sprite(17, 20);
  const auto img = uniform_with(sprite, 96, 40, 30);
  const auto regions = propose_regions(img);
  REQUIRE(regions.size() == 1);
  CHECK(bbox_iou(regions[0].bbox, {40, 30, 20, 20}) >= 0.6);
  CHECK(regions[0].confidence == Approx(1.0));
  REQUIRE(regions[0].mask.has_value());
  CHECK(regions[0].mask->width == regions[0].bbox.w);
}

TEST_CASE("separated sprites give one region each") {
  ImageGrid img(128, 128, 3, 0.5);
  const int pos[3][2] = {{5, 5}, {70, 10}, {30, 80}};
  for (int k = 0; k < 3; ++k) {
    const auto s = render_sprite(300 + k, 24);
    const auto with = uniform_with(s, 128, pos[k][0], pos[k][1]);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x)
        for (int c = 0; c < 3; ++c) img.at(pos[k][0] + x, pos[k][1] + y, c) = with.at(pos[k][0] + x, pos[k][1] + y, c);
  }
  CHECK(propose_regions(img).size() == 3);
}

TEST_CASE("selection drops low confidence and centers small boxes") {
  const ImageGrid img = testing::random_image(1, 100);
  ObjectRegion low, high;
  low.bbox = {10, 10, 8, 8};
  low.confidence = 0.15;
  high.bbox = {40, 44, 10, 6};
  high.confidence = 0.9;
  const auto sel = select_and_crop(img, {low, high}, 0.2, 32);
  REQUIRE(sel.size() == 1);
  CHECK(sel[0].region.bbox == high.bbox);
  CHECK(sel[0].window == CropWindow{29, 31, 32, 32});
  CHECK(sel[0].crop.width == 32);
  CHECK(sel[0].crop.at(0, 0, 0) == img.at(29, 31, 0));

  ObjectRegion corner;
  corner.bbox = {0, 95, 4, 5};
  CHECK(crop_window_for(corner.bbox, 100, 100, 32) == CropWindow{0, 68, 32, 32});

  // Larger than a crop: expanded square, downscaled.
  const auto big = crop_window_for({10, 20, 60, 40}, 100, 100, 32);
  CHECK(big.side == 60);
  CHECK(big.out_side == 32);
  CHECK(big.y == 10);
  ObjectRegion wide;
  wide.bbox = {10, 20, 60, 40};
  const auto sel2 = select_and_crop(img, {wide}, 0.0, 32);
  CHECK(sel2[0].crop.width == 32);
}

TEST_CASE("region patch masks") {
  ObjectRegion r;
  r.bbox = {40, 40, 8, 8};
  r.mask = BinaryMask(8, 8, 1);
  const CropWindow w{32, 32, 32, 32};
  const auto g = region_patch_mask(r, w, 8);
  CHECK(g.map.at(1, 1) == 1.0);
  CHECK(g.map.at(0, 0) == 0.0);
  r.mask.reset();
  r.bbox = {32, 32, 16, 8};
  const auto b = region_patch_mask(r, w, 8);
  CHECK(b.map.at(0, 0) == 1.0);
  CHECK(b.map.at(0, 1) == 1.0);
  CHECK(b.map.at(1, 0) == 0.0);
}
