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
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/rng.hpp"
#include "test_support.hpp"

namespace pa3d {
namespace {

using testing::LatticePoints;
using testing::RandomPoints;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double x = a.Uniform();
    EXPECT_EQ(x, b.Uniform());
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  EXPECT_NE(a.NextU64(), c.NextU64());
  EXPECT_PA3D_ERROR(a.Index(0), ErrorCode::kInvalidArgument);
}

TEST(Normalize, CentersAndScalesIntoUnitSphere) {
  Rng rng(1);
  PointCloud c;
  for (auto& p : RandomPoints(rng, 50, 3.0)) c.points.push_back(p + Vec3{5, -2, 1});
  const PointCloud n = NormalizeUnitSphere(c);
  Vec3 mean{0, 0, 0};
  double max_norm = 0;
  for (const auto& p : n.points) {
    mean = mean + (1.0 / 50) * p;
    max_norm = std::max(max_norm, Norm(p));
  }
  for (double v : mean) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_NEAR(max_norm, 1.0, 1e-12);
  PointCloud same;
  same.points.assign(4, Vec3{1, 1, 1});
  EXPECT_PA3D_ERROR(NormalizeUnitSphere(same), ErrorCode::kInvalidArgument);
  PointCloud empty;
  EXPECT_PA3D_ERROR(NormalizeUnitSphere(empty), ErrorCode::kInvalidArgument);
}

TEST(Fps, MatchesOracleIncludingTies) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.Index(64);
    const auto pts = trial % 2 ? RandomPoints(rng, n) : LatticePoints(rng, n, 2);
    const std::size_t count = 1 + rng.Index(std::min<std::size_t>(n, 16));
    const std::size_t seed = rng.Index(n);
    EXPECT_EQ(FarthestPointSampling(pts, count, seed), oracle::Fps(pts, count, seed)) << "trial " << trial;
  }
}

TEST(Fps, PicksAreDistinctEvenWithDuplicates) {
  const std::vector<Vec3> pts(8, Vec3{0.5, 0.5, 0.5});
  const auto picks = FarthestPointSampling(pts, 8, 3);
  std::vector<std::size_t> sorted = picks;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(picks[0], 3u);
  EXPECT_PA3D_ERROR(FarthestPointSampling(pts, 9, 0), ErrorCode::kInvalidArgument);
  EXPECT_PA3D_ERROR(FarthestPointSampling(pts, 2, 8), ErrorCode::kInvalidArgument);
}

TEST(Patches, MatchKnnOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.Index(64);
    const auto pts = trial % 2 ? RandomPoints(rng, n) : LatticePoints(rng, n, 1);
    const std::size_t g = 1 + rng.Index(std::min<std::size_t>(n, 16));
    const std::size_t k = 1 + rng.Index(n);
    const auto centers = FarthestPointSampling(pts, g, rng.Index(n));
    const PatchSet ps = BuildPatches(pts, centers, k);
    ASSERT_EQ(ps.size(), g);
    for (std::size_t i = 0; i < g; ++i) {
      EXPECT_EQ(ps.membership[i], oracle::Knn(pts, centers[i], k)) << "trial " << trial;
      EXPECT_EQ(ps.center_index[i], centers[i]);
      EXPECT_EQ(ps.centers[i], pts[centers[i]]);
    }
  }
}

TEST(Patches, CenterIsAlwaysAMember) {
  const std::vector<Vec3> pts = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {1, 0, 0}};
  const std::vector<std::size_t> centers = {2};
  const PatchSet ps = BuildPatches(pts, centers, 1);
  EXPECT_EQ(ps.membership[0], (std::vector<std::size_t>{2}));
  EXPECT_PA3D_ERROR(BuildPatches(pts, centers, 5), ErrorCode::kInvalidArgument);
}

TEST(Nearest, TiesGoToTheSmallerIndex) {
  const std::vector<Vec3> c = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}};
  EXPECT_EQ(NearestIndex(c, {0, 0, 0}), 0u);
  EXPECT_EQ(NearestIndex(c, {-0.9, 0, 0}), 1u);
  EXPECT_PA3D_ERROR(NearestIndex(std::vector<Vec3>{}, {0, 0, 0}), ErrorCode::kInvalidArgument);
}

PointCloud LabeledCloud(Rng& rng, std::size_t n) {
  PointCloud c;
  c.points = RandomPoints(rng, n);
  for (std::size_t i = 0; i < n; ++i) c.labels.push_back({static_cast<int>(i % 3)});
  c.part_names = {"a", "b", "c"};
  return c;
}

TEST(Augment, IdentityConfigIsBitExact) {
  Rng rng(4), aug(9);
  const PointCloud c = LabeledCloud(rng, 40);
  const PointCloud out = Augment(c, aug, AugmentConfig::Identity());
  EXPECT_EQ(out.points, c.points);
  EXPECT_EQ(out.labels, c.labels);
}

TEST(Augment, RotationsAreIsometries) {
  Rng rng(5);
  const PointCloud c = LabeledCloud(rng, 30);
  for (RotationMode mode : {RotationMode::kSO3, RotationMode::kAxisZ}) {
    AugmentConfig cfg = AugmentConfig::Identity();
    cfg.rotation = mode;
    Rng aug(11);
    const PointCloud out = Augment(c, aug, cfg);
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < c.size(); ++j)
        EXPECT_NEAR(SquaredDistance(out.points[i], out.points[j]), SquaredDistance(c.points[i], c.points[j]), 1e-9);
    if (mode == RotationMode::kAxisZ) {
      for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(out.points[i][2], c.points[i][2], 1e-12);
    }
  }
}

TEST(Augment, RandomRotationIsProper) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const Mat3 r = RandomRotation(rng);
    const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                       r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                       r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    EXPECT_NEAR(det, 1.0, 1e-12);
  }
}

TEST(Augment, LabelsUntouchedAndRangesRespected) {
  Rng rng(7);
  const PointCloud c = LabeledCloud(rng, 50);
  AugmentConfig cfg = AugmentConfig::Identity();
  cfg.jitter_sigma = 0.05;
  cfg.jitter_clip = 0.02;
  Rng aug(12);
  const PointCloud out = Augment(c, aug, cfg);
  EXPECT_EQ(out.labels, c.labels);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int d = 0; d < 3; ++d) EXPECT_LE(std::abs(out.points[i][d] - c.points[i][d]), 0.02 + 1e-15);
  AugmentConfig bad = AugmentConfig::Identity();
  bad.scale_lo = 0;
  EXPECT_PA3D_ERROR(Augment(c, aug, bad), ErrorCode::kInvalidArgument);
}

TEST(Augment, SameSeedSameOutput) {
  Rng rng(8);
  const PointCloud c = LabeledCloud(rng, 20);
  Rng a(3), b(3);
  EXPECT_EQ(Augment(c, a, {}).points, Augment(c, b, {}).points);
}

}  // namespace
}  // namespace pa3d
