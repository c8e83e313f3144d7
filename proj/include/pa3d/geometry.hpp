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

#ifndef PA3D_GEOMETRY_HPP_
#define PA3D_GEOMETRY_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/rng.hpp"

namespace pa3d {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double Dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 Cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double Norm(const Vec3& a) { return std::sqrt(Dot(a, a)); }
inline Vec3 Normalized(const Vec3& a) { return (1.0 / Norm(a)) * a; }
inline double SquaredDistance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Per-point part ids; a point may carry several.
using PointLabels = std::vector<std::vector<int>>;

struct PointCloud {
  std::vector<Vec3> points;
  PointLabels labels;  // empty when unannotated, else one entry per point
  std::vector<std::string> part_names;  // id -> name for `labels`
  std::string shape_id;
  std::string category;

  std::size_t size() const { return points.size(); }
  bool has_labels() const { return !labels.empty(); }
};

inline void ValidateCloud(const PointCloud& cloud) {
  Require(!cloud.points.empty(), ErrorCode::kInvalidArgument, "point cloud is empty");
  for (const auto& p : cloud.points)
    for (double v : p)
      Require(std::isfinite(v), ErrorCode::kNonFinite, "point cloud has non-finite coordinates");
  Require(cloud.labels.empty() || cloud.labels.size() == cloud.points.size(),
          ErrorCode::kShapeMismatch,
          "labels: " + std::to_string(cloud.labels.size()) + " entries for " +
              std::to_string(cloud.points.size()) + " points");
}

inline PointCloud NormalizeUnitSphere(PointCloud cloud) {
  ValidateCloud(cloud);
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.points) centroid = centroid + p;
  centroid = (1.0 / static_cast<double>(cloud.size())) * centroid;
  double max_norm = 0;
  for (auto& p : cloud.points) {
    p = p - centroid;
    max_norm = std::max(max_norm, Norm(p));
  }
  Require(max_norm > 0, ErrorCode::kInvalidArgument,
          "normalize_unit_sphere: all points coincide");
  const double inv = 1.0 / max_norm;
  for (auto& p : cloud.points) p = inv * p;
  return cloud;
}

// Greedy farthest point sampling on squared distances. Each pick maximises
// the distance to the chosen set; equal distances go to the smaller index.
inline std::vector<std::size_t> FarthestPointSampling(std::span<const Vec3> points,
                                                      std::size_t count,
                                                      std::size_t seed_index) {
  const std::size_t n = points.size();
  Require(count >= 1 && count <= n, ErrorCode::kInvalidArgument,
          "fps: requested " + std::to_string(count) + " samples from " + std::to_string(n) +
              " points");
  Require(seed_index < n, ErrorCode::kInvalidArgument,
          "fps: seed index " + std::to_string(seed_index) + " out of range");
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> picks;
  picks.reserve(count);
  std::size_t current = seed_index;
  for (std::size_t s = 0; s < count; ++s) {
    picks.push_back(current);
    min_dist[current] = -1.0;  // never re-picked
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] < 0) continue;
      min_dist[i] = std::min(min_dist[i], SquaredDistance(points[i], points[current]));
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return picks;
}

struct PatchSet {
  std::vector<Vec3> centers;
  std::vector<std::vector<std::size_t>> membership;  // ascending point indices
  std::vector<std::size_t> center_index;

  std::size_t size() const { return centers.size(); }
  std::size_t patch_size() const { return membership.empty() ? 0 : membership[0].size(); }
};

// kNN groups around each center. Neighbours are ranked by squared distance
// then index, except that the center itself always ranks first so that
// exact duplicates cannot displace it.
inline PatchSet BuildPatches(std::span<const Vec3> points,
                             std::span<const std::size_t> center_indices, std::size_t k) {
  const std::size_t n = points.size();
  Require(k >= 1 && k <= n, ErrorCode::kInvalidArgument,
          "build_patches: k=" + std::to_string(k) + " with " + std::to_string(n) + " points");
  PatchSet patches;
  std::vector<std::pair<double, std::size_t>> ranked(n);
  for (std::size_t c : center_indices) {
    Require(c < n, ErrorCode::kInvalidArgument, "build_patches: center index out of range");
    for (std::size_t i = 0; i < n; ++i) {
      ranked[i] = {i == c ? -1.0 : SquaredDistance(points[i], points[c]), i};
    }
    std::nth_element(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k - 1),
                     ranked.end());
    std::vector<std::size_t> members;
    members.reserve(k);
    // nth_element leaves the k smallest (not sorted) in front.
    std::sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i = 0; i < k; ++i) members.push_back(ranked[i].second);
    std::sort(members.begin(), members.end());
    patches.centers.push_back(points[c]);
    patches.membership.push_back(std::move(members));
    patches.center_index.push_back(c);
  }
  return patches;
}

// Index of the nearest entry of `candidates` to `query`, ties to the smaller index.
inline std::size_t NearestIndex(std::span<const Vec3> candidates, const Vec3& query) {
  Require(!candidates.empty(), ErrorCode::kInvalidArgument, "nearest: no candidates");
  std::size_t best = 0;
  double best_d = SquaredDistance(candidates[0], query);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double d = SquaredDistance(candidates[i], query);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

enum class RotationMode { kNone, kSO3, kAxisZ };

struct AugmentConfig {
  RotationMode rotation = RotationMode::kSO3;
  double max_angle = std::numbers::pi;  // kAxisZ only: angle in [-max, max]
  double translation = 0.1;
  double scale_lo = 0.8;
  double scale_hi = 1.2;
  double jitter_sigma = 0.005;
  double jitter_clip = 0.02;

  static AugmentConfig Identity() {
    return {RotationMode::kNone, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0};
  }
};

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Vec3 Apply(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

// Uniform rotation from a random unit quaternion (Shoemake).
inline Mat3 RandomRotation(Rng& rng) {
  const double u1 = rng.Uniform(), u2 = rng.Uniform(), u3 = rng.Uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double x = a * std::sin(2 * std::numbers::pi * u2);
  const double y = a * std::cos(2 * std::numbers::pi * u2);
  const double z = b * std::sin(2 * std::numbers::pi * u3);
  const double w = b * std::cos(2 * std::numbers::pi * u3);
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
           {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
           {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

inline Mat3 RotationZ(double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

// Rotate, scale, translate, then jitter. Zero-width stages are skipped so
// the identity configuration returns the input bit for bit.
inline PointCloud Augment(PointCloud cloud, Rng& rng, const AugmentConfig& cfg) {
  Require(cfg.scale_lo > 0 && cfg.scale_hi >= cfg.scale_lo, ErrorCode::kInvalidArgument,
          "augment: scale range must satisfy 0 < lo <= hi");
  Require(cfg.jitter_clip >= 0 && cfg.jitter_sigma >= 0 && cfg.translation >= 0,
          ErrorCode::kInvalidArgument, "augment: negative jitter or translation range");
  if (cfg.rotation != RotationMode::kNone) {
    const Mat3 r = cfg.rotation == RotationMode::kSO3
                       ? RandomRotation(rng)
                       : RotationZ(rng.Uniform(-cfg.max_angle, cfg.max_angle));
    for (auto& p : cloud.points) p = Apply(r, p);
  }
  if (cfg.scale_lo != 1.0 || cfg.scale_hi != 1.0) {
    const double s = rng.Uniform(cfg.scale_lo, cfg.scale_hi);
    for (auto& p : cloud.points) p = s * p;
  }
  if (cfg.translation > 0) {
    const Vec3 t{rng.Uniform(-cfg.translation, cfg.translation),
                 rng.Uniform(-cfg.translation, cfg.translation),
                 rng.Uniform(-cfg.translation, cfg.translation)};
    for (auto& p : cloud.points) p = p + t;
  }
  if (cfg.jitter_sigma > 0) {
    for (auto& p : cloud.points)
      for (double& v : p) v += std::clamp(cfg.jitter_sigma * rng.Normal(), -cfg.jitter_clip, cfg.jitter_clip);
  }
  return cloud;
}

}  // namespace pa3d

#endif  // PA3D_GEOMETRY_HPP_
