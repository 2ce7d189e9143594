#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qpat/pipeline.hpp"

using namespace qpat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qpat_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

nlohmann::json two_sphere_config(const fs::path& out, int n = 80) {
  nlohmann::json ph = {
      {"grid", {{"dims", {n, n, n}}, {"extent", {10, 10, 10}}}},
      {"background", {{"mu", 0.1}, {"D", 1.0}, {"Gamma", 1.0}}},
      {"inclusions",
       {{{"mu", 0.2}, {"D", 1.0}, {"Gamma", 1.0}, {"shape", {{"type", "sphere"}, {"center", {2.9, 5, 5}}, {"radius", 1.6}}}},
        {{"mu", 0.1}, {"D", 0.25}, {"Gamma", 1.0}, {"shape", {{"type", "sphere"}, {"center", {7.1, 5, 5}}, {"radius", 1.6}}}}}}};
  return {{"phantom", ph},
          {"illuminations", {"uniform", "face:-x"}},
          {"noise", {{"level", 0.0}, {"seed", 5}}},
          {"reference", {{"region", 1}, {"values", "d_gamma:1,1"}}},
          {"output_dir", out.string()}};
}

int run(const std::string& args) {
  const std::string cmd = std::string(QPAT_CLI) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

TEST(Config, ParsesAndResolvesRelativePhantom) {
  const PipelineConfig c = read_config(std::string(QPAT_SOURCE_DIR) + "/configs/noise.json");
  EXPECT_EQ(c.illuminations.size(), 6u);
  EXPECT_EQ(c.noise_level, 0.05);
  EXPECT_FALSE(c.thresholds.stage[2].enabled);
  EXPECT_EQ(c.thresholds.stage[1].derivative_sigma, 2.0);
  EXPECT_EQ(c.phantom.inclusions.size(), 4u);
  EXPECT_TRUE(fs::exists(c.phantom_path));
  EXPECT_EQ(c.fit.lap_radius, 6.0);
}

TEST(Config, NoiseRaisesDefaultTaus) {
  nlohmann::json j = two_sphere_config("x");
  j["noise"]["level"] = 0.2;
  const PipelineConfig c = config_from_json(j);
  for (const auto& s : c.thresholds.stage) EXPECT_GE(s.tau, 0.6);
}

TEST(Config, RejectsBadInput) {
  nlohmann::json j = two_sphere_config("x");
  j.erase("phantom");
  EXPECT_THROW(config_from_json(j), ParseError);
  j = two_sphere_config("x");
  j["illuminations"] = nlohmann::json::array();
  EXPECT_THROW(config_from_json(j), PreconditionError);
  j = two_sphere_config("x");
  j["segment"] = {{"tau", {0.1, 0.2}}};
  EXPECT_THROW(config_from_json(j), ParseError);
  j = two_sphere_config("x");
  j["phantom"] = "does_not_exist.json";
  EXPECT_THROW(config_from_json(j), Error);
  j = two_sphere_config("x");
  j["reference"]["values"] = "mu_d:1,1";
  EXPECT_NO_THROW(config_from_json(j));  // parses; estimation rejects it
}

TEST(Config, JsonRoundtrip) {
  const PipelineConfig c = config_from_json(two_sphere_config("y"));
  const PipelineConfig d = config_from_json(to_json(c));
  EXPECT_EQ(to_json(c).dump(), to_json(d).dump());
}

TEST(Pipeline, UniformPhantomReturnsReference) {
  const fs::path out = scratch("uniform");
  PipelineConfig c = read_config(std::string(QPAT_SOURCE_DIR) + "/configs/uniform.json");
  c.output_dir = out.string();
  std::ostringstream log;
  const PipelineResult r = run_pipeline(c, log);
  ASSERT_EQ(r.status, 0) << log.str();
  EXPECT_EQ(r.regions, 1);
  ASSERT_EQ(r.estimates.regions.size(), 1u);
  EXPECT_EQ(r.estimates.regions[0].estimate.mu, 0.5);
  EXPECT_EQ(r.estimates.regions[0].estimate.D, 0.2);
  EXPECT_EQ(r.estimates.regions[0].estimate.Gamma, 2.0);
  for (const char* f : {"manifest.json", "H1.qvol", "stage1_logH.qvol", "edges.obj", "edges.csv", "labels.qvol",
                        "segments.csv", "estimates.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m["seeds"]["measurements"][0].get<std::uint64_t>(), measurement_seed(3, 0));
  EXPECT_EQ(m["config"]["reference"]["values"], "full:0.5,0.2,2");
}

TEST(Pipeline, StageFailureKeepsArtifacts) {
  const fs::path out = scratch("fail");
  nlohmann::json j = two_sphere_config(out, 24);
  j["reference"]["region"] = 9;
  j["illuminations"] = {"uniform"};
  std::ostringstream log;
  const PipelineResult r = run_pipeline(config_from_json(j), log);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.failed_stage, "estimate");
  EXPECT_NE(r.error.find("reference region 9"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "H1.qvol"));
  EXPECT_TRUE(fs::exists(out / "labels.qvol"));
  EXPECT_FALSE(fs::exists(out / "estimates.csv"));
}

TEST(Pipeline, SubcommandsReproducePipelineBytes) {
  const fs::path out = scratch("compose_pipe"), sub = scratch("compose_sub");
  const nlohmann::json j = two_sphere_config(out);
  {
    std::ofstream os(sub / "config.json");
    os << j.dump(2);
    std::ofstream ps(sub / "phantom.json");
    ps << j["phantom"].dump(2);
  }
  std::ostringstream log;
  const PipelineResult r = run_pipeline(config_from_json(j), log);
  ASSERT_EQ(r.status, 0) << log.str();
  ASSERT_GE(r.regions, 2) << log.str();  // segmentation quality is covered elsewhere

  const std::string s = sub.string();
  for (int k = 0; k < 2; ++k) {
    const std::string illum = j["illuminations"][k];
    ASSERT_EQ(run("solve --phantom " + s + "/phantom.json --illum " + illum + " --seed " +
                  std::to_string(measurement_seed(5, static_cast<std::size_t>(k))) + " --out " + s + "/H" +
                  std::to_string(k + 1) + ".qvol"),
              0);
  }
  const std::string in = "--in " + s + "/H1.qvol " + s + "/H2.qvol";
  const StageThresholds th;
  for (int st = 0; st < 3; ++st)
    ASSERT_EQ(run("derive " + in + " --stage " + std::to_string(st + 1) + " --sigma " +
                  std::to_string(th.stage[static_cast<std::size_t>(st)].derivative_sigma) + " --out-stage " + s + "/" +
                  stage_field_name(st)),
              0);
  ASSERT_EQ(run("segment " + in + " --config " + s + "/config.json --out-labels " + s + "/labels.qvol --out-surface " + s +
                "/edges.obj --report " + s + "/segments.csv"),
            0);
  ASSERT_EQ(run("estimate " + in + " --config " + s + "/config.json --labels " + s + "/labels.qvol --surface " + s +
                "/edges.obj --truth " + s + "/phantom.json --out " + s + "/estimates.csv"),
            0);
  for (const char* f : {"H1.qvol", "H2.qvol", "stage1_logH.qvol", "stage2_loggrad.qvol", "stage3_loglap.qvol",
                        "labels.qvol", "edges.obj", "edges.csv", "segments.csv", "estimates.csv"})
    EXPECT_EQ(slurp(out / f), slurp(sub / f)) << f;
}

TEST(Pipeline, NoisyRunsAreByteIdentical) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  nlohmann::json j = two_sphere_config(a, 32);
  j["illuminations"] = {"face:-x", "face:+x", "face:-y", "face:+y", "face:-z", "face:+z"};
  j["noise"] = {{"level", 0.05}, {"seed", 17}};
  std::ostringstream la, lb;
  const PipelineResult ra = run_pipeline(config_from_json(j), la);
  j["output_dir"] = b.string();
  const PipelineResult rb = run_pipeline(config_from_json(j), lb);
  EXPECT_EQ(ra.status, rb.status);
  ASSERT_EQ(ra.artifacts.size(), rb.artifacts.size());
  ASSERT_GE(ra.artifacts.size(), 8u);
  for (const auto& p : ra.artifacts) {
    const fs::path name = fs::path(p).filename();
    if (name == "manifest.json") continue;  // records its own output_dir
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  // a different seed changes the data
  j["noise"]["seed"] = 18;
  const fs::path c = scratch("det_c");
  j["output_dir"] = c.string();
  std::ostringstream lc;
  run_pipeline(config_from_json(j), lc);
  EXPECT_NE(slurp(a / "H1.qvol"), slurp(c / "H1.qvol"));
}

TEST(Verify, ReportsAllThreeChecks) {
  const fs::path out = scratch("verify");
  nlohmann::json j = two_sphere_config(out, 16);
  j["illuminations"] = {"face:-x", "face:+y", "face:+z"};
  j["verify"] = {{"refinements", {8, 12, 16}}};
  std::ostringstream log;
  const VerifyReport r = verify(config_from_json(j), log);
  ASSERT_EQ(r.checks.size(), 4u);
  EXPECT_TRUE(r.passed()) << log.str();
  EXPECT_TRUE(fs::exists(out / "detcond.qvol"));

  j["illuminations"] = {"uniform"};
  const VerifyReport one = verify(config_from_json(j), log);
  EXPECT_FALSE(one.checks.back().passed);
  EXPECT_NE(one.checks.back().detail.find("at least 3"), std::string::npos);
}

TEST(Cli, ReportsErrorsWithNonzeroStatus) {
  EXPECT_NE(run("solve --phantom /nonexistent.json --out /tmp/x.qvol"), 0);
  EXPECT_NE(run("frobnicate"), 0);
  EXPECT_EQ(run("--help"), 0);
}
