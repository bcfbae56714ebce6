// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "refseq/cli.hpp"

namespace refseq {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("refseq_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(DumpRope, SmallTableGolden) {
  const Result r = run({"dump-rope", "--axes", "2", "4", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const Json j = Json::parse(r.out);
  EXPECT_EQ(j["frame"], Json::array({1.0}));
  EXPECT_EQ(j["height"], Json::array({1.0, 0.01}));
  EXPECT_EQ(j["width"], Json::array({1.0}));
  EXPECT_EQ(j["head_dim"], 8);
  EXPECT_EQ(j["base"], 10000.0);
}

TEST(DumpRope, ConfigFileAndOutFile) {
  const fs::path dir = scratch("rope");
  fs::create_directories(dir);
  spit(dir / "cfg.json", R"({"rope": {"axes_dim": [2, 2, 4], "theta": 100.0}})");
  const Result r = run({"dump-rope", "--config", (dir / "cfg.json").string(), "--out",
                        (dir / "table.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const Json j = Json::parse(slurp(dir / "table.json"));
  EXPECT_EQ(j["width"], Json::array({1.0, 0.1}));
}

TEST(DumpRope, BadInputs) {
  const fs::path dir = scratch("rope_bad");
  fs::create_directories(dir);
  spit(dir / "broken.json", "{\"rope\": ");
  EXPECT_EQ(run({"dump-rope", "--config", (dir / "broken.json").string()}).code, kExitBadInput);
  spit(dir / "odd.json", R"({"axes_dim": [3, 4, 4]})");
  EXPECT_EQ(run({"dump-rope", "--config", (dir / "odd.json").string()}).code, kExitBadInput);
  EXPECT_EQ(run({"dump-rope", "--config", (dir / "absent.json").string()}).code, kExitIo);
  EXPECT_EQ(run({"no-such-command"}).code, kExitBadInput);
}

TEST(DumpIndex, RowsForRequestedCount) {
  const Result r = run({"dump-index", "-n", "3", "--channels", "4"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const Json j = Json::parse(r.out);
  ASSERT_EQ(j["rows"].size(), 3u);
  EXPECT_EQ(j["rows"][0].size(), 4u);
}

TEST(Assemble, DefaultTwoImages) {
  const Result r = run({"assemble"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("L=10"), std::string::npos);
  EXPECT_NE(r.out.find("separator spans: 2"), std::string::npos);
}

TEST(Assemble, FiveImagesFiveSeparators) {
  const fs::path dir = scratch("asm5");
  fs::create_directories(dir);
  Json images = Json::array();
  for (int i = 0; i < 5; ++i) images.push_back({{"frames", 1}, {"height", 2}, {"width", 1}});
  spit(dir / "spec.json", Json{{"images", images}}.dump());
  const Result r = run({"assemble", "--config", (dir / "spec.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("N=5"), std::string::npos);
  EXPECT_NE(r.out.find("separator spans: 5"), std::string::npos);
  EXPECT_NE(r.out.find("L=15"), std::string::npos);
}

TEST(Assemble, FlagsOffPlainConcatenation) {
  const fs::path dir = scratch("asm_off");
  fs::create_directories(dir);
  spit(dir / "spec.json", R"({"use_separator": false, "use_index_embed": false})");
  const Result r = run({"assemble", "--config", (dir / "spec.json").string(), "--out",
                        (dir / "run").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("L=8"), std::string::npos);
  EXPECT_NE(r.out.find("separator spans: 0"), std::string::npos);
  EXPECT_NE(r.out.find("separator=off"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "run" / "sequence.json"));
  EXPECT_EQ(run({"verify", (dir / "run").string()}).code, kExitOk);
}

TEST(Assemble, UnknownKeyRejected) {
  const fs::path dir = scratch("asm_bad");
  fs::create_directories(dir);
  spit(dir / "spec.json", R"({"use_seperator": false})");
  EXPECT_EQ(run({"assemble", "--config", (dir / "spec.json").string()}).code, kExitBadInput);
}

TEST(Assemble, UnwritableOutput) {
  EXPECT_EQ(run({"assemble", "--out", "/proc/refseq_cannot_write"}).code, kExitIo);
}

// A one-layer model keeps the CLI gradient checks quick.
fs::path small_gradcheck_config(const std::string& name) {
  const fs::path dir = scratch(name);
  fs::create_directories(dir);
  spit(dir / "gc.json", R"({"model": {"layers": 1}, "num_images": 2})");
  return dir;
}

TEST(Gradcheck, PassesAndWritesReport) {
  const fs::path dir = small_gradcheck_config("gc");
  const Result r = run({"gradcheck", "--config", (dir / "gc.json").string(), "--out",
                        (dir / "run").string()});
  ASSERT_EQ(r.code, kExitOk) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  const Json report = Json::parse(slurp(dir / "run" / "gradcheck.json"));
  EXPECT_TRUE(report.is_object());
  EXPECT_EQ(run({"verify", (dir / "run").string()}).code, kExitOk);
}

TEST(Gradcheck, CorruptedBlockFailsByName) {
  const fs::path dir = small_gradcheck_config("gc_bad");
  const Result r = run({"gradcheck", "--config", (dir / "gc.json").string(), "--corrupt",
                        "layer0.ffn.w1"});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.out.find("FAIL: worst block layer0.ffn.w1"), std::string::npos) << r.out;
  EXPECT_EQ(run({"gradcheck", "--config", (dir / "gc.json").string(), "--corrupt", "nope"}).code,
            kExitBadInput);
}

TEST(Gradcheck, SinglePrecision) {
  const fs::path dir = small_gradcheck_config("gc32");
  const Result r = run({"gradcheck", "--config", (dir / "gc.json").string(), "--fp32"});
  EXPECT_EQ(r.code, kExitOk) << r.out << r.err;
}

fs::path probe_config(const std::string& name) {
  const fs::path dir = scratch(name);
  fs::create_directories(dir);
  spit(dir / "probe.json",
       R"({"probe": {"steps": 200, "episodes_per_step": 4, "seeds": [0],
                     "eval_episodes": 20, "curve_every": 50}})");
  return dir;
}

TEST(Probe, SmokeRunIsReproducibleAndVerifies) {
  const fs::path dir = probe_config("probe");
  const std::string cfg = (dir / "probe.json").string();
  const Result a = run({"probe", "--config", cfg, "--out", (dir / "a" / "nested").string()});
  ASSERT_EQ(a.code, kExitOk) << a.out << a.err;
  const Result b = run({"probe", "--config", cfg, "--out", (dir / "b").string()});
  ASSERT_EQ(b.code, kExitOk) << b.err;
  const fs::path ra = dir / "a" / "nested", rb = dir / "b";
  for (const char* f : {"results.csv", "curves.csv", "summary.json", "config.json",
                        "checkpoints/full-seed0.json"}) {
    ASSERT_TRUE(fs::exists(ra / f)) << f;
    EXPECT_EQ(slurp(ra / f), slurp(rb / f)) << f;
  }
  const std::string csv = slurp(ra / "results.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "config,seed,eval_set,image_counts,episodes,correct,accuracy,status");
  for (const char* name : {"rope-only", "rope+sep", "rope+index", "full"}) {
    EXPECT_NE(csv.find(std::string(name) + ",0,"), std::string::npos) << name;
  }

  EXPECT_EQ(run({"verify", ra.string(), rb.string()}).code, kExitOk);

  // Editing an output breaks verification.
  spit(ra / "results.csv", csv + "x\n");
  const Result v = run({"verify", ra.string()});
  EXPECT_EQ(v.code, kExitFailure);
  EXPECT_NE(v.out.find("digest mismatch results.csv"), std::string::npos) << v.out;

  // So does an extra file.
  spit(rb / "stray.txt", "hi");
  const Result w = run({"verify", rb.string()});
  EXPECT_EQ(w.code, kExitFailure);
  EXPECT_NE(w.out.find("unlisted file stray.txt"), std::string::npos) << w.out;
}

TEST(Probe, UnwritableOutputAndBadConfig) {
  const fs::path dir = probe_config("probe_bad");
  EXPECT_EQ(run({"probe", "--config", (dir / "probe.json").string(), "--out",
                 "/proc/refseq_cannot_write"}).code,
            kExitIo);
  spit(dir / "bad.json", R"({"probe": {"eval_extrapolated": [3]}})");
  EXPECT_EQ(run({"probe", "--config", (dir / "bad.json").string(), "--out",
                 (dir / "x").string()}).code,
            kExitBadInput);
  EXPECT_EQ(run({"probe"}).code, kExitBadInput);
}

TEST(Verify, MissingManifestAndDirectory) {
  const fs::path dir = scratch("verify");
  fs::create_directories(dir);
  const Result r = run({"verify", dir.string()});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.out.find("no manifest"), std::string::npos);
  EXPECT_EQ(run({"verify", (dir / "absent").string()}).code, kExitFailure);
}

TEST(Verify, MissingListedFile) {
  const fs::path dir = scratch("verify_missing");
  fs::create_directories(dir);
  spit(dir / "a.txt", "alpha");
  write_manifest(dir.string(), ManifestInfo{"test", Json::object(), {1}, {}, 0.0});
  EXPECT_TRUE(verify_run_dir(dir.string()).empty());
  fs::remove(dir / "a.txt");
  const auto problems = verify_run_dir(dir.string());
  ASSERT_EQ(problems.size(), 1u);
  EXPECT_NE(problems[0].find("missing a.txt"), std::string::npos);
}

}  // namespace
}  // namespace refseq
