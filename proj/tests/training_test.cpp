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

#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pa3d/training.hpp"
#include "test_support.hpp"

namespace pa3d {
namespace {

using testing::LatticePoints;
using testing::RandomMatrix;
using testing::RandomPoints;
using testing::SynthTrainingSet;
using testing::TinyTextConfig;
using testing::UnitRows;

TEST(MatchPatches, MatchesNearestOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t g = 1 + rng.Index(16);
    const auto cached = trial % 2 ? RandomPoints(rng, g) : LatticePoints(rng, g, 1);
    const auto online = trial % 2 ? RandomPoints(rng, g) : LatticePoints(rng, g, 1);
    const auto got = MatchPatches(online, cached);
    for (std::size_t i = 0; i < g; ++i) EXPECT_EQ(got[i], oracle::Nearest(cached, online[i]));
  }
  EXPECT_PA3D_ERROR(MatchPatches(std::vector<Vec3>{{0, 0, 0}}, std::vector<Vec3>{}),
                    ErrorCode::kInvalidArgument);
}

TEST(FractionalLabels, CountMemberPartsOverPatchSize) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.Index(63), parts = 1 + rng.Index(4);
    const auto pts = RandomPoints(rng, n);
    PointLabels labels(n);
    for (auto& l : labels) {
      l.push_back(static_cast<int>(rng.Index(parts)));
      if (rng.Uniform() < 0.2) l.push_back(static_cast<int>(rng.Index(parts)));
    }
    const std::size_t g = 1 + rng.Index(std::min<std::size_t>(n, 16)), k = 1 + rng.Index(n);
    const PatchSet ps = BuildPatches(pts, FarthestPointSampling(pts, g, 0), k);
    std::vector<int> ids(parts);
    for (std::size_t j = 0; j < parts; ++j) ids[j] = static_cast<int>(j);
    const FractionalLabels y = ComputeFractionalLabels(ps, labels, ids);
    for (std::size_t i = 0; i < g; ++i) {
      for (std::size_t j = 0; j < parts; ++j) {
        double count = 0;
        for (std::size_t m : ps.membership[i])
          if (std::find(labels[m].begin(), labels[m].end(), static_cast<int>(j)) != labels[m].end()) count += 1;
        EXPECT_EQ(y.y(i, j), count / static_cast<double>(k));
      }
    }
  }
}

TEST(FractionalLabels, SingleLabelRowsSumToOne) {
  Rng rng(3);
  const auto pts = RandomPoints(rng, 30);
  PointLabels labels(30);
  for (auto& l : labels) l = {static_cast<int>(rng.Index(3))};
  const PatchSet ps = BuildPatches(pts, FarthestPointSampling(pts, 5, 0), 7);
  const std::vector<int> ids = {0, 1, 2};
  const FractionalLabels y = ComputeFractionalLabels(ps, labels, ids);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (double v : y.y.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  const std::vector<int> missing = {0, 1};
  EXPECT_PA3D_ERROR(ComputeFractionalLabels(ps, labels, missing), ErrorCode::kInvalidArgument);
  EXPECT_PA3D_ERROR(ComputeFractionalLabels(ps, PointLabels(3, {0}), ids), ErrorCode::kShapeMismatch);
}

TEST(Stage1Loss, MatchesCosineFormula) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t g = 1 + rng.Index(16), d = 1 + rng.Index(8);
    const Matrix p = RandomMatrix(rng, g, d), t = RandomMatrix(rng, g, d);
    double want = 0;
    for (std::size_t i = 0; i < g; ++i) {
      double dot = 0, np = 0, nt = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += p(i, k) * t(i, k);
        np += p(i, k) * p(i, k);
        nt += t(i, k) * t(i, k);
      }
      want += 1.0 - dot / std::sqrt(np * nt);
    }
    want /= static_cast<double>(g);
    EXPECT_NEAR(Stage1Loss(ToTensor(p), ToTensor(t)).item(), want, 1e-10);
  }
}

TEST(Stage2Loss, MatchesDirectBceOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t g = 1 + rng.Index(16), c = 1 + rng.Index(5), d = 2 + rng.Index(6);
    const Matrix z = UnitRows(RandomMatrix(rng, g, d)), t = UnitRows(RandomMatrix(rng, c, d));
    Matrix y(g, c);
    for (double& v : y.data) v = static_cast<double>(rng.Index(5)) / 4.0;
    const double tau = rng.Uniform(0.3, 2.0), b = rng.Uniform(-3, 3);
    const Tensor loss = Stage2Loss(ToTensor(z), ToTensor(t), {y, {}}, Tensor::Scalar(std::log(tau)),
                                   Tensor::Scalar(b));
    EXPECT_NEAR(loss.item(), oracle::SigmoidBce(z, t, tau, b, y), 1e-10) << "trial " << trial;
  }
}

TEST(Stage2Loss, StaysFiniteForExtremeLogits) {
  Matrix y(1, 2, std::vector<double>{1.0, 0.0});
  const Tensor logits = Tensor::FromData({1, 2}, {-800.0, 800.0});
  const double l = SigmoidBceSum(logits, y).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 1600.0, 1e-9);
  EXPECT_NEAR(SigmoidBceSum(Tensor::FromData({1, 2}, {800.0, -800.0}), y).item(), 0.0, 1e-12);
  EXPECT_PA3D_ERROR(SigmoidBceSum(Tensor::Zeros({2, 2}), y), ErrorCode::kShapeMismatch);
}

TEST(Stage, NamesRoundTrip) {
  for (const char* s : {"1", "2", "joint"}) EXPECT_EQ(StageName(ParseStage(s)), s);
  EXPECT_PA3D_ERROR(ParseStage("3"), ErrorCode::kInvalidArgument);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  ModelParams p;
  p.tensors.push_back({"lin.w", "g", {2}, {1.0, -2.0}});
  p.tensors.push_back({"lin.b", "g", {1}, {0.5}});
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  opt.Step(p, {0, 1}, {{0.2, 0.0}, {-3.0}});
  // Bias-corrected first step moves by lr * g / (|g| + eps); decay hits .w only.
  const double w0 = 1.0 - 0.1 * 0.5 * 1.0 - 0.1 * 0.2 / (0.2 + 1e-8);
  const double w1 = -2.0 - 0.1 * 0.5 * -2.0;
  const double b0 = 0.5 + 0.1 * 3.0 / (3.0 + 1e-8);
  EXPECT_NEAR(p.tensors[0].data[0], w0, 1e-15);
  EXPECT_NEAR(p.tensors[0].data[1], w1, 1e-15);
  EXPECT_NEAR(p.tensors[1].data[0], b0, 1e-15);
}

TEST(StageGroups, SplitHeadsByStage) {
  const ModelParams p = InitModel(TinyTextConfig(), 0);
  const auto s1 = StageGroups(p, Stage::kStage1), s2 = StageGroups(p, Stage::kStage2),
             joint = StageGroups(p, Stage::kJoint);
  EXPECT_TRUE(s1.count(group::kHead2d));
  EXPECT_FALSE(s1.count(group::kLogTau));
  EXPECT_FALSE(s2.count(group::kHead2d));
  EXPECT_TRUE(s2.count(group::kLogitBias));
  EXPECT_EQ(joint.size(), CanonicalGroups(p.config).size());
}

TEST(CheckStageGradients, BothStagesIncludingTemperatureAndBias) {
  const EncoderConfig c = TinyTextConfig();
  const TrainingSet set = SynthTrainingSet({"chair"}, 1, 64, c, 3);
  ModelParams p = InitModel(c, 4);
  // Moderate tau and b keep the sigmoid away from saturation.
  p.Get("log_tau").data[0] = std::log(0.5);
  p.Get("logit_bias").data[0] = -1.0;
  for (Stage stage : {Stage::kStage1, Stage::kStage2}) {
    const StageGradCheck gc = CheckStageGradients(p, set.shapes[0], set.text, stage, {1e-5, 4, 0});
    EXPECT_LT(gc.result.max_rel_error, 1e-6) << StageName(stage) << " worst " << gc.names[gc.result.worst_tensor];
    const std::set<std::string> names(gc.names.begin(), gc.names.end());
    EXPECT_EQ(names.count("log_tau"), stage == Stage::kStage2 ? 1u : 0u);
    EXPECT_EQ(names.count("head_2d.w"), stage == Stage::kStage1 ? 1u : 0u);
  }
}

StageConfig QuickConfig(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 9;
  return cfg;
}

TEST(RunStage, Stage2NeedsStage1UnlessScratchIsAllowed) {
  const EncoderConfig c = TinyTextConfig();
  const TrainingSet set = SynthTrainingSet({"barbell"}, 2, 48, c, 5);
  StageConfig cfg = QuickConfig(Stage::kStage2);
  EXPECT_PA3D_ERROR(RunStage(set, InitModel(c, 0), cfg), ErrorCode::kInvalidArgument);
  cfg.allow_scratch = true;
  EXPECT_EQ(RunStage(set, InitModel(c, 0), cfg).params.completed_stages, (std::vector<int>{2}));
}

TEST(RunStage, FrozenGroupsAreBitIdentical) {
  EncoderConfig c = TinyTextConfig();
  c.n_layers = 3;
  const TrainingSet set = SynthTrainingSet({"barbell", "table"}, 2, 48, c, 6);
  const ModelParams s1 = RunStage(set, InitModel(c, 1), QuickConfig(Stage::kStage1)).params;
  const ModelParams s2 = RunStage(set, s1, QuickConfig(Stage::kStage2)).params;
  const std::set<std::string> open = {"block.2", group::kHeadText, group::kLogTau, group::kLogitBias};
  for (std::size_t i = 0; i < s1.tensors.size(); ++i) {
    const auto& before = s1.tensors[i];
    if (open.count(before.group)) {
      EXPECT_NE(s2.tensors[i].data, before.data) << before.name;
    } else {
      EXPECT_EQ(s2.tensors[i].data, before.data) << before.name;
    }
  }
  EXPECT_EQ(s2.completed_stages, (std::vector<int>{1, 2}));
}

TEST(RunStage, SeededRunsRepeatAndThreadingDoesNotMatter) {
  const EncoderConfig c = TinyTextConfig();
  const TrainingSet set = SynthTrainingSet({"lamp"}, 4, 48, c, 7);
  StageConfig cfg = QuickConfig(Stage::kJoint);
  const StageResult a = RunStage(set, InitModel(c, 2), cfg);
  const StageResult b = RunStage(set, InitModel(c, 2), cfg);
  cfg.threads = 3;
  const StageResult t = RunStage(set, InitModel(c, 2), cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.params.tensors, t.params.tensors);
  ASSERT_EQ(a.log.size(), t.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, t.log[i].loss);
  cfg.seed = 10;
  EXPECT_NE(RunStage(set, InitModel(c, 2), cfg).params.tensors, a.params.tensors);
}

TEST(RunStage, Stage1ReducesTheLoss) {
  const EncoderConfig c = TinyTextConfig();
  const TrainingSet set = SynthTrainingSet({"barbell"}, 3, 64, c, 8);
  const ModelParams init = InitModel(c, 3);
  StageConfig cfg = QuickConfig(Stage::kStage1);
  cfg.epochs = 30;
  cfg.augment = false;
  cfg.optimizer.learning_rate = 3e-3;
  const StageResult r = RunStage(set, init, cfg);
  EXPECT_LT(EvaluateStage1Loss(r.params, set), 0.5 * EvaluateStage1Loss(init, set));
  ASSERT_FALSE(r.log.empty());
  EXPECT_EQ(r.log.front().stage, "1");
}

TEST(RunStage, ShapesWithoutPartsAreSkippedWithAWarning) {
  const EncoderConfig c = TinyTextConfig();
  TrainingSet set = SynthTrainingSet({"barbell"}, 2, 48, c, 9);
  set.shapes[1].cloud.part_names.clear();
  StageConfig cfg = QuickConfig(Stage::kStage2);
  cfg.allow_scratch = true;
  const StageResult r = RunStage(set, InitModel(c, 0), cfg);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find(set.shapes[1].cloud.shape_id), std::string::npos);
}

TEST(RunStage, RejectsInconsistentData) {
  const EncoderConfig c = TinyTextConfig();
  TrainingSet set = SynthTrainingSet({"barbell"}, 1, 48, c, 10);
  StageConfig cfg = QuickConfig(Stage::kStage1);
  cfg.epochs = 0;
  EXPECT_PA3D_ERROR(RunStage(set, InitModel(c, 0), cfg), ErrorCode::kInvalidArgument);
  EncoderConfig wide = c;
  wide.head_2d_out = 6;
  EXPECT_PA3D_ERROR(RunStage(set, InitModel(wide, 0), QuickConfig(Stage::kStage1)), ErrorCode::kShapeMismatch);
  TrainingSet unlabeled = set;
  unlabeled.shapes[0].cloud.labels.clear();
  StageConfig s2 = QuickConfig(Stage::kStage2);
  s2.allow_scratch = true;
  EXPECT_PA3D_ERROR(RunStage(unlabeled, InitModel(c, 0), s2), ErrorCode::kInvalidArgument);
  EXPECT_PA3D_ERROR(RunStage(TrainingSet{}, InitModel(c, 0), QuickConfig(Stage::kStage1)),
                    ErrorCode::kInvalidArgument);
}

}  // namespace
}  // namespace pa3d
