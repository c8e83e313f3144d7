/* Copyright 2026 The pa3d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cli_chain.hpp"
#include "pa3d/config.hpp"
#include "test_support.hpp"

namespace pa3d {
namespace {

namespace fs = std::filesystem;
using testing::Cli;
using testing::TempDir;

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  const KeyValues kv = ParseKeyValues("# header\n  a = 1 \nb=two words # trailing\n\nc=\n");
  EXPECT_EQ(kv, (KeyValues{{"a", "1"}, {"b", "two words"}, {"c", ""}}));
  EXPECT_EQ(ParseKeyValues(DumpKeyValues(kv)), kv);
  EXPECT_PA3D_ERROR(ParseKeyValues("a=1\na=2\n"), ErrorCode::kFormat);
  EXPECT_PA3D_ERROR(ParseKeyValues("just words\n"), ErrorCode::kFormat);
  EXPECT_PA3D_ERROR(ParseKeyValues(" = 3\n"), ErrorCode::kFormat);
  EXPECT_PA3D_ERROR(LoadKeyValues("/nonexistent/pa3d.cfg"), ErrorCode::kIo);
}

TEST(Resolve, CliOverridesFileOverridesDefaults) {
  const cli::Command& cmd = cli::FindCommand("eval");
  const cli::Settings s = cli::Resolve(cmd, {{"mode", "all"}, {"report", "r.json"}}, {{"report", "x/y.json"}});
  EXPECT_EQ(s.Str("mode"), "all");
  EXPECT_EQ(s.Str("report"), (fs::current_path() / "x" / "y.json").string());
  EXPECT_TRUE(s.Given("mode"));
  EXPECT_FALSE(s.Given("pred"));
  EXPECT_THROW(cli::Resolve(cmd, {{"bogus", "1"}}, {}), cli::UsageError);
  EXPECT_THROW(s.Count("mode"), cli::UsageError);
  EXPECT_THROW(s.Need("pred"), cli::UsageError);
}

TEST(Cli, ExitCodesSeparateUsageFromRuntimeErrors) {
  TempDir tmp;
  EXPECT_EQ(Cli({"--help"}), 0);
  EXPECT_EQ(Cli({}), 2);
  EXPECT_EQ(Cli({"frobnicate"}), 2);
  EXPECT_EQ(Cli({"eval", "--no-such-flag"}), 2);
  EXPECT_EQ(Cli({"synth-gen", "--out", (tmp / "s").string(), "--families", "spaceship"}), 2);
  EXPECT_EQ(Cli({"synth-gen", "--out", (tmp / "s").string(), "--count", "many"}), 2);
  EXPECT_EQ(Cli({"eval", "--pred", (tmp / "p").string(), "--gt", (tmp / "g").string(), "--report",
                 (tmp / "r.json").string(), "--mode", "median"}),
            2);
  EXPECT_EQ(Cli({"segment", "--ckpt", (tmp / "missing.ckpt").string(), "--cloud", tmp.path().string(),
                 "--text-table", tmp.path().string(), "--out", (tmp / "o.ply").string()}),
            1);
  WriteFile(tmp / "bad.cfg", "no equals sign\n");
  EXPECT_EQ(Cli({"eval", "--config", (tmp / "bad.cfg").string()}), 2);
  WriteFile(tmp / "unknown.cfg", "colour=blue\n");
  EXPECT_EQ(Cli({"eval", "--config", (tmp / "unknown.cfg").string()}), 2);
}

TEST(Cli, Stage2WithoutCheckpointIsAUsageError) {
  TempDir tmp;
  EXPECT_EQ(Cli({"train", "--stage", "2", "--data", tmp.path().string(), "--text-table", tmp.path().string(),
                 "--ckpt-out", (tmp / "o.ckpt").string()}),
            2);
  EXPECT_FALSE(fs::exists(tmp / "o.ckpt"));
}

TEST(Cli, SynthSpecFileDrivesGeneration) {
  TempDir tmp;
  WriteFile(tmp / "spec.cfg", "families=table\ncount=1\npoints=64\nviews=2\nheldout=1\n");
  ASSERT_EQ(Cli({"synth-gen", "--spec", (tmp / "spec.cfg").string(), "--out", (tmp / "d").string()}), 0);
  EXPECT_TRUE(fs::exists(tmp / "d" / "clouds" / "table_0000" / "manifest.json"));
  EXPECT_TRUE(fs::exists(tmp / "d" / "heldout" / "table_0001" / "manifest.json"));
  EXPECT_EQ(ReadFields(tmp / "d" / "fields" / "table_0000").fields.size(), 2u);
  EXPECT_EQ(ReadTextTable(tmp / "d" / "text").size(), SynthVocabulary().size());
  const Json run = Json::parse(ReadFile(tmp / "d.run.json"));
  EXPECT_EQ(run["command"], "synth-gen");
  EXPECT_EQ(run["config"]["families"], "table");
  EXPECT_EQ(run["exit_code"], 0);
}

TEST(Cli, EvalOfGroundTruthAgainstItselfIsPerfect) {
  TempDir tmp;
  ASSERT_EQ(Cli({"synth-gen", "--out", (tmp / "d").string(), "--count", "2", "--points", "64", "--views", "1"}), 0);
  ASSERT_EQ(Cli({"eval", "--pred", (tmp / "d" / "clouds").string(), "--gt", (tmp / "d" / "clouds").string(),
                 "--report", (tmp / "r.json").string()}),
            0);
  const Json r = Json::parse(ReadFile(tmp / "r.json"));
  EXPECT_EQ(r["miou"], 1.0);
  EXPECT_EQ(r["ciou"], 1.0);
  EXPECT_EQ(r["shapes"].size(), 4u);
}

TEST(Cli, FullChainRunsAndEveryManifestReplaysBitExactly) {
  TempDir tmp;
  const testing::ChainResult chain = testing::RunCliChain(tmp.path());
  ASSERT_TRUE(chain.ok());
  const Json report = Json::parse(ReadFile(tmp / "eval.json"));
  EXPECT_GE(report["miou"].get<double>(), 0.0);
  EXPECT_EQ(ReadPly(tmp / "pca.ply").colors.size(), 128u);
  const ModelParams s1 = LoadCheckpoint(tmp / "s1.ckpt");
  EXPECT_FALSE(s1.HasGroup(group::kHeadText));
  EXPECT_EQ(LoadCheckpoint(tmp / "s2.ckpt").completed_stages, (std::vector<int>{1, 2}));
  for (std::size_t i = 0; i < chain.manifests.size(); ++i)
    EXPECT_EQ(Cli({"replay", chain.manifests[i].string()}), 0) << chain.steps[i];
}

TEST(Cli, SegmentNormalizesCloudsGivenInOtherUnits) {
  TempDir tmp;
  ASSERT_TRUE(testing::RunCliChain(tmp.path()).ok());
  const fs::path src = *cli::detail::ShapeDirs(tmp / "data" / "heldout").begin();
  PointCloud moved = ReadCloud(src);
  for (auto& p : moved.points) p = 3.5 * p + Vec3{10, -4, 2};
  WriteCloud(moved, tmp / "moved");
  auto segment = [&](const fs::path& cloud, const fs::path& out) {
    return Cli({"segment", "--ckpt", (tmp / "s2.ckpt").string(), "--cloud", cloud.string(), "--text-table",
                (tmp / "data" / "text").string(), "--out", out.string()});
  };
  ASSERT_EQ(segment(src, tmp / "a.ply"), 0);
  ASSERT_EQ(segment(tmp / "moved", tmp / "b.ply"), 0);
  const PlyData a = ReadPly(tmp / "a.ply"), b = ReadPly(tmp / "b.ply");
  EXPECT_EQ(a.part_ids, b.part_ids);
  EXPECT_NEAR(b.points[0][0], moved.points[0][0], 1e-5);
}

TEST(Cli, ReplayRejectsTamperedManifests) {
  TempDir tmp;
  ASSERT_EQ(Cli({"synth-gen", "--out", (tmp / "d").string(), "--count", "1", "--points", "64", "--views", "1"}), 0);
  const fs::path manifest = tmp / "d.run.json";
  const std::string original = ReadFile(manifest);
  Json m = Json::parse(original);
  m["outputs"][0]["fnv1a64"] = "0000000000000000";
  WriteFile(manifest, m.dump(2));
  EXPECT_EQ(Cli({"replay", manifest.string()}), 1);
  WriteFile(manifest, ManifestBytes(m));
  EXPECT_EQ(Cli({"replay", manifest.string()}), 1);
  WriteFile(manifest, original);
  EXPECT_EQ(Cli({"replay", manifest.string()}), 0);
  EXPECT_EQ(Cli({"replay", (tmp / "none.json").string()}), 1);
}

TEST(Cli, CorruptInputsExitNonZero) {
  TempDir tmp;
  ASSERT_EQ(Cli({"synth-gen", "--out", (tmp / "d").string(), "--families", "barbell", "--count", "1",
                 "--points", "64", "--views", "2"}),
            0);
  const fs::path cloud = tmp / "d" / "clouds" / "barbell_0000";
  std::string points = ReadFile(cloud / "points.f32");
  points[0] ^= 0x04;
  WriteFile(cloud / "points.f32", points);
  EXPECT_EQ(Cli({"cache-lift", "--cloud", cloud.string(), "--fields",
                 (tmp / "d" / "fields" / "barbell_0000").string(), "--out", (tmp / "c").string()}),
            1);
  EXPECT_FALSE(fs::exists(tmp / "c"));
}

}  // namespace
}  // namespace pa3d
