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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pa3d/liftproj.hpp"
#include "test_support.hpp"

namespace pa3d {
namespace {

using testing::CloudWithDuplicates;
using testing::RandomField;
using testing::RandomPoints;
using testing::RandomRig;

TEST(MakeViewRig, PlacesCamerasOnTheSphere) {
  const std::vector<double> elev = {0.5, -0.5};
  const auto cams = MakeViewRig(5, 2.2, elev);
  ASSERT_EQ(cams.size(), 5u);
  for (const auto& c : cams) EXPECT_NEAR(Norm(c.position), 2.2, 1e-12);
  EXPECT_GT(cams[0].position[2], 0);
  EXPECT_GT(cams[2].position[2], 0);
  EXPECT_LT(cams[3].position[2], 0);
  EXPECT_PA3D_ERROR(MakeViewRig(0, 2.2, elev), ErrorCode::kInvalidArgument);
  EXPECT_PA3D_ERROR(MakeViewRig(3, 0.5, elev), ErrorCode::kInvalidArgument);
  const std::vector<double> polar = {std::numbers::pi / 2};
  EXPECT_PA3D_ERROR(MakeViewRig(3, 2.2, polar), ErrorCode::kInvalidArgument);
}

TEST(Projection, MatchesHomogeneousOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pts = RandomPoints(rng, 64, 1.5);
    const auto cams = RandomRig(rng, 3, 8 + rng.Index(24));
    for (const auto& cam : cams) {
      const auto proj = ProjectVisible(pts, cam);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const oracle::Pixel px = oracle::Project(pts[i], cam);
        ASSERT_EQ(proj[i].in_frustum, px.in_frustum) << "trial " << trial << " point " << i;
        EXPECT_NEAR(proj[i].depth, px.depth, 1e-12);
        if (!px.in_frustum) continue;
        EXPECT_EQ(proj[i].pixel_x, static_cast<std::size_t>(px.x));
        EXPECT_EQ(proj[i].pixel_y, static_cast<std::size_t>(px.y));
      }
    }
  }
}

TEST(Projection, NearerPointOccludesWithinTolerance) {
  Camera cam;
  cam.position = {2, 0, 0};
  const std::vector<Vec3> pts = {{0.5, 0.01, 0.01}, {0.0, 0.01, 0.01}, {0.5 - 5e-4, 0.01, 0.01},
                                 {3, 0, 0}};
  const auto proj = ProjectVisible(pts, cam);
  ASSERT_TRUE(proj[0].in_frustum && proj[1].in_frustum);
  EXPECT_EQ(proj[0].pixel(cam.width), proj[1].pixel(cam.width));
  EXPECT_TRUE(proj[0].visible);
  EXPECT_FALSE(proj[1].visible);
  EXPECT_TRUE(proj[2].visible);
  EXPECT_FALSE(proj[3].in_frustum);
  EXPECT_FALSE(proj[3].visible);
}

TEST(Lift, MatchesBruteForceOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pts = CloudWithDuplicates(rng, 1 + rng.Index(64));
    const std::size_t views = 1 + rng.Index(4), dim = 1 + rng.Index(5);
    const auto cams = RandomRig(rng, views, 4 + rng.Index(12));
    std::vector<FeatureField> fields;
    for (std::size_t v = 0; v < views; ++v) fields.push_back(RandomField(rng, cams[v], static_cast<int>(v), dim));
    LiftResult got;
    try {
      got = LiftPointFeatures(pts, cams, fields);
    } catch (const Error& e) {
      ASSERT_EQ(e.code(), ErrorCode::kInvalidArgument) << e.what();
      continue;
    }
    const Matrix want = oracle::Lift(pts, cams, fields, kDepthTolerance);
    ASSERT_EQ(got.features.rows, want.rows);
    for (std::size_t i = 0; i < want.data.size(); ++i)
      EXPECT_NEAR(got.features.data[i], want.data[i], 1e-10) << "trial " << trial;
  }
}

TEST(Lift, ConstantFieldLiftsExactly) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = CloudWithDuplicates(rng, 64);
    const auto cams = RandomRig(rng, 10, 16);
    std::vector<FeatureField> fields;
    const std::vector<double> value = {0.1, -1.0 / 3.0, std::numbers::pi};
    for (std::size_t v = 0; v < cams.size(); ++v) {
      FeatureField f = RandomField(rng, cams[v], static_cast<int>(v), 3);
      for (std::size_t p = 0; p < f.width * f.height; ++p) std::copy(value.begin(), value.end(), f.grid.begin() + p * 3);
      fields.push_back(f);
    }
    const LiftResult got = LiftPointFeatures(pts, cams, fields);
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(got.features(i, d), value[d]);
  }
}

TEST(Lift, ViewPermutationChangesNothing) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = CloudWithDuplicates(rng, 48);
    const auto cams = RandomRig(rng, 6, 12);
    std::vector<FeatureField> fields;
    for (std::size_t v = 0; v < cams.size(); ++v) fields.push_back(RandomField(rng, cams[v], static_cast<int>(v), 4));
    const LiftResult base = LiftPointFeatures(pts, cams, fields);

    std::vector<std::size_t> perm(cams.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.Shuffle(perm);
    std::vector<Camera> pc;
    std::vector<FeatureField> pf;
    for (std::size_t i : perm) {
      pc.push_back(cams[i]);
      pf.push_back(fields[i]);
    }
    const LiftResult permuted = LiftPointFeatures(pts, pc, pf, {kDepthTolerance, 3});
    EXPECT_EQ(permuted.features, base.features);
    EXPECT_EQ(permuted.view_count, base.view_count);
  }
}

TEST(Lift, UnseenPointsCopyNearestSeenPoint) {
  Camera cam;
  cam.position = {2, 0, 0};
  cam.width = cam.height = 1;
  cam.vertical_fov = 0.2;
  // One pixel: the nearest point owns it and everything behind is occluded.
  const std::vector<Vec3> pts = {{0.5, 0, 0}, {0.0, 0, 0}, {-0.5, 0, 0}};
  FeatureField f{0, 1, 1, 2, {7.0, -7.0}};
  const LiftResult r = LiftPointFeatures(pts, std::vector<Camera>{cam}, std::vector<FeatureField>{f});
  EXPECT_EQ(r.view_count, (std::vector<std::size_t>{1, 0, 0}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.features(i, 0), 7.0);
    EXPECT_EQ(r.features(i, 1), -7.0);
  }
}

TEST(Lift, RejectsInconsistentInputs) {
  Rng rng(5);
  const auto pts = RandomPoints(rng, 10, 0.5);
  const auto cams = RandomRig(rng, 2, 8);
  std::vector<FeatureField> fields = {RandomField(rng, cams[0], 0, 3), RandomField(rng, cams[1], 1, 3)};
  EXPECT_PA3D_ERROR(LiftPointFeatures(pts, std::span(cams).first(1), fields), ErrorCode::kShapeMismatch);
  auto wrong_dim = fields;
  wrong_dim[1] = RandomField(rng, cams[1], 1, 2);
  EXPECT_PA3D_ERROR(LiftPointFeatures(pts, cams, wrong_dim), ErrorCode::kShapeMismatch);
  auto short_grid = fields;
  short_grid[0].grid.pop_back();
  EXPECT_PA3D_ERROR(LiftPointFeatures(pts, cams, short_grid), ErrorCode::kShapeMismatch);
  EXPECT_PA3D_ERROR(LiftPointFeatures(pts, std::span<const Camera>{}, std::span<const FeatureField>{}),
                    ErrorCode::kInvalidArgument);
  auto away = cams;
  for (auto& c : away) c.look_at = 2.0 * c.position;
  EXPECT_PA3D_ERROR(LiftPointFeatures(pts, away, fields), ErrorCode::kInvalidArgument);
}

TEST(Aggregate, MatchesOracleMean) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.Index(64), dim = 1 + rng.Index(6);
    const auto pts = RandomPoints(rng, n);
    Matrix feats(n, dim);
    for (double& v : feats.data) v = rng.Uniform(-5, 5);
    const std::size_t g = 1 + rng.Index(std::min<std::size_t>(n, 16));
    const PatchSet ps = BuildPatches(pts, FarthestPointSampling(pts, g, 0), 1 + rng.Index(n));
    const Matrix got = AggregatePatchTargets(feats, ps);
    const Matrix want = oracle::Aggregate(feats, ps.membership);
    for (std::size_t i = 0; i < want.data.size(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-10);
  }
  PatchSet bad;
  bad.centers = {{0, 0, 0}};
  bad.membership = {{3}};
  bad.center_index = {0};
  EXPECT_PA3D_ERROR(AggregatePatchTargets(Matrix(2, 2), bad), ErrorCode::kShapeMismatch);
}

TEST(PaintField, NoiselessPaintThenLiftRecoversVisibleFeatures) {
  Rng rng(7);
  const auto pts = RandomPoints(rng, 40, 0.7);
  Matrix feats(40, 3);
  for (double& v : feats.data) v = rng.Uniform(-1, 1);
  const auto cams = RandomRig(rng, 4, 64);
  std::vector<FeatureField> fields;
  for (std::size_t v = 0; v < cams.size(); ++v)
    fields.push_back(PaintFeatureField(pts, feats, cams[v], static_cast<int>(v), 0.0, rng));
  const LiftResult r = LiftPointFeatures(pts, cams, fields);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool alone = true;
    for (std::size_t v = 0; v < cams.size() && alone; ++v) {
      const auto proj = ProjectVisible(pts, cams[v]);
      if (!proj[i].visible) continue;
      for (std::size_t j = 0; j < pts.size(); ++j)
        if (j != i && proj[j].in_frustum && proj[j].pixel(64) == proj[i].pixel(64)) alone = false;
    }
    if (!alone || r.view_count[i] == 0) continue;
    ++checked;
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(r.features(i, d), feats(i, d), 1e-12);
  }
  EXPECT_GT(checked, 20u);
}

TEST(FeatureCache, BuildsConsistentLayout) {
  Rng rng(8);
  PointCloud cloud;
  cloud.points = RandomPoints(rng, 50, 0.8);
  const auto cams = RandomRig(rng, 3, 16);
  std::vector<FeatureField> fields;
  for (std::size_t v = 0; v < cams.size(); ++v) fields.push_back(RandomField(rng, cams[v], static_cast<int>(v), 5));
  CacheBuildOptions opt;
  opt.num_patches = 8;
  opt.patch_size = 6;
  const FeatureCache cache = BuildFeatureCache(cloud, cams, fields, opt);
  EXPECT_EQ(cache.patches.size(), 8u);
  EXPECT_EQ(cache.patches.patch_size(), 6u);
  EXPECT_EQ(cache.feature_dim(), 5u);
  EXPECT_EQ(cache.patch_targets, AggregatePatchTargets(cache.point_features, cache.patches));
  EXPECT_EQ(cache.patches.center_index, FarthestPointSampling(cloud.points, 8, 0));
}

}  // namespace
}  // namespace pa3d
