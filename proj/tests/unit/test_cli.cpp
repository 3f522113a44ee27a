#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "mao_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const char* bin = std::getenv("MAO_CLI");
  REQUIRE_MESSAGE(bin != nullptr, "MAO_CLI is not set");
  const std::string cmd = std::string(bin) + " " + args + " >> " + (work_dir() / "log.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string at(const std::string& name) { return (work_dir() / name).string(); }

}  // namespace

// The subcommands share state on disk, so they run as one ordered case.
TEST_CASE("command line round trip on a tiny benchmark") {
  const std::string bench = at("bench");
  REQUIRE(run("gen --out " + bench +
              " --instances 3 --gallery 6 --queries-per-instance 1 --train-instances 3 --train-gallery 6"
              " --distractor-pool 12 --resolution 128 --min-objects 2 --max-objects 3 --seed 4 --check") == 0);
  CHECK(fs::exists(bench + "/manifest.jsonl"));
  CHECK(fs::exists(bench + "/train/manifest.jsonl"));
  CHECK(fs::exists(bench + "/config.json"));
  const auto config = nlohmann::json::parse(slurp(bench + "/config.json"));
  CHECK(config["command"] == "gen");
  CHECK(config["seed"] == 4);

  const std::string train = at("train");
  REQUIRE(run("train --out " + train + " --manifest " + bench +
              "/train/manifest.jsonl --regions manifest --steps 3 --batch 3 --seed 1") == 0);
  CHECK(fs::exists(train + "/weights.maow"));
  CHECK(slurp(train + "/train_log.csv").rfind("step,lr,loss\n", 0) == 0);

  // Same seed, same bytes.
  REQUIRE(run("train --out " + at("train2") + " --manifest " + bench +
              "/train/manifest.jsonl --regions manifest --steps 3 --batch 3 --seed 1") == 0);
  CHECK(slurp(train + "/weights.maow") == slurp(at("train2") + "/weights.maow"));

  const std::string common = " --manifest " + bench + "/manifest.jsonl --weights " + train + "/weights.maow --iters 5";
  const std::string enc = at("enc");
  REQUIRE(run("encode-gallery --out " + enc + common + " --check") == 0);
  CHECK(fs::exists(enc + "/descriptors.json"));
  CHECK(fs::exists(enc + "/timing.json"));

  REQUIRE(run("query --out " + at("query") + common + " --gallery-store " + enc + "/descriptors.json --top-k 3") == 0);
  const auto rankings = slurp(at("query") + "/rankings.csv");
  CHECK(std::count(rankings.begin(), rankings.end(), '\n') == 1 + 3 * 3);

  const std::string ev = at("eval");
  REQUIRE(run("eval --out " + ev + common + " --gallery-store " + enc + "/descriptors.json --check") == 0);
  const auto report = nlohmann::json::parse(slurp(ev + "/report.json"));
  CHECK(report.contains("map"));
  CHECK(fs::exists(ev + "/report.csv"));
  // An impossible bar fails the check with exit code 1.
  CHECK(run("eval --out " + at("eval2") + common + " --check --min-map 1.01") == 1);

  REQUIRE(run("ablate --out " + at("ablate") + common + " --modes whole-image stage-a-avg") == 0);
  CHECK(slurp(at("ablate") + "/ablation.csv").find("stage-a-avg") != std::string::npos);

  REQUIRE(run("sweep --out " + at("sweep") + common + " --kind alpha --grid 0 0.03") == 0);
  const auto sweep = slurp(at("sweep") + "/sweep.csv");
  CHECK(std::count(sweep.begin(), sweep.end(), '\n') == 3);

  CHECK(run("eval --out " + at("bad") + " --manifest " + at("missing.jsonl") + " --weights " + train +
            "/weights.maow") != 0);
  CHECK(run("nonsense") != 0);
}
