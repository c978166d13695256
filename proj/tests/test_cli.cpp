#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffusion/cli.hpp"

using namespace diffusion;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "diffusion_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("diffusion_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << body;
  return p;
}

const char* kSmall = R"({
  "network": {"n_nodes": 4, "radius": 0.8, "seed": 1},
  "cost": {"model": "quadratic", "w_true": [1.0, 0.5], "rows": 1, "noise_var": 1.0},
  "strategies": [
    {"name": "atc", "strategy": "atc", "mu": 0.01},
    {"name": "cta", "strategy": "cta", "mu": 0.01},
    {"name": "noncoop", "strategy": "noncoop", "mu": 0.01}
  ],
  "run": {"horizon": 300, "n_trials": 3, "seed": 2}
})";

}  // namespace

TEST(Cli, HelpAndVersion) {
  const auto help = invoke({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("sweep"), std::string::npos);
  const auto ver = invoke({"--version"});
  EXPECT_EQ(ver.code, 0);
  EXPECT_NE(ver.out.find(kVersion), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  const auto missing = invoke({"run", "/no/such/config.json"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("/no/such/config.json"), std::string::npos);
}

TEST(Cli, BadConfigIsExitOne) {
  const auto dir = scratch("bad");
  const auto cfg = write_config(dir, R"({"cost": {"model": "quadratic", "w_true": [1.0]}, "strategies": [],
                                         "surprise": true})");
  const auto r = invoke({"run", cfg.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("surprise"), std::string::npos);
}

TEST(Cli, RunWritesArtifactsAndSummary) {
  const auto dir = scratch("run");
  const auto cfg = write_config(dir, kSmall);
  const std::string before = slurp(cfg);
  const auto r = invoke({"run", cfg.string(), "--out-dir", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"atc", "cta", "noncoop", "msd_db", "theory_db"}) EXPECT_NE(r.out.find(name), std::string::npos);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "out")) files += e.is_regular_file() ? 1 : 0;
  EXPECT_GE(files, 2u);
  EXPECT_EQ(slurp(cfg), before);

  const std::string csv = slurp(dir / "out" / "curves.csv");
  const std::string meta = slurp(dir / "out" / "metadata.json");
  const auto again = invoke({"run", cfg.string(), "--out-dir", (dir / "out").string()});
  EXPECT_EQ(again.out, r.out);
  EXPECT_EQ(slurp(dir / "out" / "curves.csv"), csv);
  EXPECT_EQ(slurp(dir / "out" / "metadata.json"), meta);
}

TEST(Cli, OverridesApply) {
  const auto dir = scratch("override");
  const auto cfg = write_config(dir, kSmall);
  ASSERT_EQ(invoke({"run", cfg.string(), "--out-dir", (dir / "a").string(), "--seed", "9", "--trials", "2"}).code, 0);
  const Json meta = Json::parse(slurp(dir / "a" / "metadata.json"));
  EXPECT_EQ(meta["seed"], 9);
  EXPECT_EQ(meta["n_trials"], 2);
  EXPECT_EQ(invoke({"run", cfg.string(), "--trials", "0"}).code, 1);
}

TEST(Cli, AllTrialsDivergedIsExitTwo) {
  const auto dir = scratch("diverge");
  Json j = Json::parse(kSmall);
  j["strategies"][2]["mu"] = 10.0;
  const auto cfg = write_config(dir, j.dump());
  const auto r = invoke({"run", cfg.string(), "--out-dir", (dir / "out").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(fs::exists(dir / "out" / "metadata.json"));
}

TEST(Cli, TheoryEmitsDocumentAndRow) {
  const auto dir = scratch("theory");
  const auto cfg = write_config(dir, kSmall);
  const auto r = invoke({"theory", cfg.string(), "--out-dir", (dir / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const Json doc = Json::parse(slurp(dir / "out" / "theory.json"));
  EXPECT_EQ(doc["reports"].size(), 3u);
  EXPECT_TRUE(doc["reports"][0]["stable"].get<bool>());
  const std::string csv = slurp(dir / "out" / "theory.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Cli, SweepAndTrack) {
  const auto dir = scratch("sweep");
  const auto cfg = write_config(dir, kSmall);
  const auto s = invoke({"sweep", cfg.string(), "--param", "mu", "--values", "0.01", "0.02", "--out-dir",
                         (dir / "out").string()});
  ASSERT_EQ(s.code, 0) << s.err;
  const std::string csv = slurp(dir / "out" / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(invoke({"sweep", cfg.string(), "--param", "mu"}).code, 1);
  EXPECT_EQ(invoke({"track", cfg.string()}).code, 1);

  Json j = Json::parse(R"({
    "network": {"n_nodes": 5, "radius": 0.7, "seed": 5},
    "cost": {"model": "localization", "target": [0.0, 0.0], "anchor_scale": 4.0, "anchor_offset": [-2.0, -2.0]},
    "strategies": [{"name": "atc", "strategy": "atc", "mu": 0.01}],
    "run": {"horizon": 200, "n_trials": 2, "seed": 1,
            "target_trajectory": {"waypoints": [{"iteration": 0, "position": [0, 0]}, {"iteration": 200, "position": [0.5, 0]}]}}
  })");
  const auto tcfg = write_config(dir, j.dump());
  const auto t = invoke({"track", tcfg.string(), "--out-dir", (dir / "track").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(dir / "track" / "overlay.csv"));
}
