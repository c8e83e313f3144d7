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

// Multi-view projection with a point z-buffer and back-projection of dense
// 2D feature fields onto points and patches.

#ifndef PA3D_LIFTPROJ_HPP_
#define PA3D_LIFTPROJ_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/parallel.hpp"
#include "pa3d/rng.hpp"

namespace pa3d {

inline constexpr double kDepthTolerance = 1e-3;

struct Camera {
  Vec3 position{2.2, 0, 0};
  Vec3 look_at{0, 0, 0};
  Vec3 up{0, 0, 1};
  double vertical_fov = 50.0 * std::numbers::pi / 180.0;
  std::size_t width = 128;
  std::size_t height = 128;
};

inline void ValidateCamera(const Camera& cam) {
  const Vec3 dir = cam.look_at - cam.position;
  Require(Norm(dir) > 0, ErrorCode::kInvalidArgument, "camera: position equals look_at");
  Require(Norm(Cross(dir, cam.up)) > 1e-12 * Norm(dir) * Norm(cam.up), ErrorCode::kInvalidArgument,
          "camera: up vector is parallel to the view direction");
  Require(cam.vertical_fov > 0 && cam.vertical_fov < std::numbers::pi, ErrorCode::kInvalidArgument,
          "camera: vertical fov must lie in (0, pi)");
  Require(cam.width > 0 && cam.height > 0, ErrorCode::kInvalidArgument,
          "camera: resolution must be positive");
}

struct RigOptions {
  std::size_t width = 128;
  std::size_t height = 128;
  double vertical_fov = 50.0 * std::numbers::pi / 180.0;
};

// Cameras on elevation rings around +z, evenly spaced in azimuth, all
// looking at the origin. Views are split across rings as evenly as
// possible, earlier rings taking the remainder. Elevations in radians.
inline std::vector<Camera> MakeViewRig(std::size_t n_views, double radius,
                                       std::span<const double> elevations,
                                       const RigOptions& options = {}) {
  Require(n_views >= 1, ErrorCode::kInvalidArgument, "view rig: need at least one view");
  Require(!elevations.empty(), ErrorCode::kInvalidArgument, "view rig: no elevation rings");
  Require(radius > 1.0, ErrorCode::kInvalidArgument,
          "view rig: radius must exceed the unit-sphere cloud extent");
  std::vector<Camera> cams;
  const std::size_t rings = elevations.size();
  for (std::size_t r = 0; r < rings; ++r) {
    const double e = elevations[r];
    Require(std::abs(e) < std::numbers::pi / 2, ErrorCode::kInvalidArgument,
            "view rig: elevation must be within (-90, 90) degrees");
    const std::size_t count = n_views / rings + (r < n_views % rings ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i) {
      const double az = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(count);
      Camera cam;
      cam.position = {radius * std::cos(e) * std::cos(az), radius * std::cos(e) * std::sin(az),
                      radius * std::sin(e)};
      cam.look_at = {0, 0, 0};
      cam.up = {0, 0, 1};
      cam.vertical_fov = options.vertical_fov;
      cam.width = options.width;
      cam.height = options.height;
      cams.push_back(cam);
    }
  }
  return cams;
}

struct Projection {
  double u = 0;  // continuous pixel coordinates, origin at the top-left corner
  double v = 0;
  double depth = 0;  // distance along the optical axis
  std::size_t pixel_x = 0;
  std::size_t pixel_y = 0;
  bool in_frustum = false;
  bool visible = false;

  std::size_t pixel(std::size_t width) const { return pixel_y * width + pixel_x; }
};

// Pinhole projection of every point. Each point splats into one pixel; the
// z-buffer keeps the minimum depth per pixel and a point is visible when it
// is in the frustum and within `delta` of that minimum.
inline std::vector<Projection> ProjectVisible(std::span<const Vec3> points, const Camera& cam,
                                              double delta = kDepthTolerance) {
  ValidateCamera(cam);
  const Vec3 forward = Normalized(cam.look_at - cam.position);
  const Vec3 right = Normalized(Cross(forward, cam.up));
  const Vec3 up = Cross(right, forward);
  const double focal = 0.5 * static_cast<double>(cam.height) / std::tan(0.5 * cam.vertical_fov);
  const double cx = 0.5 * static_cast<double>(cam.width);
  const double cy = 0.5 * static_cast<double>(cam.height);

  std::vector<Projection> out(points.size());
  std::vector<double> zbuffer(cam.width * cam.height, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3 rel = points[i] - cam.position;
    Projection& p = out[i];
    p.depth = Dot(rel, forward);
    if (p.depth <= 1e-9) continue;
    p.u = cx + focal * Dot(rel, right) / p.depth;
    p.v = cy - focal * Dot(rel, up) / p.depth;
    const double fx = std::floor(p.u), fy = std::floor(p.v);
    if (fx < 0 || fy < 0 || fx >= static_cast<double>(cam.width) ||
        fy >= static_cast<double>(cam.height)) {
      continue;
    }
    p.pixel_x = static_cast<std::size_t>(fx);
    p.pixel_y = static_cast<std::size_t>(fy);
    p.in_frustum = true;
    double& z = zbuffer[p.pixel(cam.width)];
    z = std::min(z, p.depth);
  }
  for (auto& p : out) {
    if (p.in_frustum) p.visible = p.depth <= zbuffer[p.pixel(cam.width)] + delta;
  }
  return out;
}

// Dense H x W x D feature grid for one view.
struct FeatureField {
  int view_id = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t dim = 0;
  std::vector<double> grid;  // (y * width + x) * dim + d

  std::span<const double> at(std::size_t x, std::size_t y) const {
    return {grid.data() + (y * width + x) * dim, dim};
  }
  std::span<double> at(std::size_t x, std::size_t y) {
    return {grid.data() + (y * width + x) * dim, dim};
  }
};

struct LiftOptions {
  double delta = kDepthTolerance;
  std::size_t threads = 0;  // 0 = serial
};

struct LiftResult {
  Matrix features;                      // N x D
  std::vector<std::size_t> view_count;  // |V(x)| per point
};

// d(x) = mean of F_r at x's pixel over the views that see x. Views are
// folded in ascending view_id order with a running mean, so a constant
// field lifts exactly. Points no view sees copy the feature of the nearest
// visible point (squared distance, ties to the smaller index).
inline LiftResult LiftPointFeatures(std::span<const Vec3> points, std::span<const Camera> cameras,
                                    std::span<const FeatureField> fields,
                                    const LiftOptions& options = {}) {
  Require(cameras.size() == fields.size(), ErrorCode::kShapeMismatch,
          "lift: " + std::to_string(cameras.size()) + " cameras but " +
              std::to_string(fields.size()) + " feature fields");
  Require(!fields.empty(), ErrorCode::kInvalidArgument, "lift: no views");
  const std::size_t dim = fields[0].dim;
  Require(dim >= 1, ErrorCode::kInvalidArgument, "lift: feature dim must be positive");
  for (std::size_t v = 0; v < fields.size(); ++v) {
    const auto& f = fields[v];
    Require(f.dim == dim, ErrorCode::kShapeMismatch,
            "lift: view " + std::to_string(f.view_id) + " has dim " + std::to_string(f.dim) +
                ", expected " + std::to_string(dim));
    Require(f.width == cameras[v].width && f.height == cameras[v].height,
            ErrorCode::kShapeMismatch,
            "lift: view " + std::to_string(f.view_id) + " field resolution differs from camera");
    Require(f.grid.size() == f.width * f.height * f.dim, ErrorCode::kShapeMismatch,
            "lift: view " + std::to_string(f.view_id) + " grid size mismatch");
  }

  std::vector<std::size_t> order(fields.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return fields[a].view_id < fields[b].view_id; });

  std::vector<std::vector<Projection>> projections(fields.size());
  detail::ParallelFor(fields.size(), options.threads, [&](std::size_t v) {
    projections[v] = ProjectVisible(points, cameras[v], options.delta);
  });

  const std::size_t n = points.size();
  LiftResult result{Matrix(n, dim, 0.0), std::vector<std::size_t>(n, 0)};
  for (std::size_t v : order) {
    const auto& proj = projections[v];
    for (std::size_t i = 0; i < n; ++i) {
      if (!proj[i].visible) continue;
      auto value = fields[v].at(proj[i].pixel_x, proj[i].pixel_y);
      auto out = result.features.row(i);
      const double count = static_cast<double>(++result.view_count[i]);
      for (std::size_t d = 0; d < dim; ++d) out[d] += (value[d] - out[d]) / count;
    }
  }

  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < n; ++i)
    if (result.view_count[i] > 0) seen.push_back(i);
  Require(!seen.empty(), ErrorCode::kInvalidArgument, "lift: no point is visible in any view");
  for (std::size_t i = 0; i < n; ++i) {
    if (result.view_count[i] > 0) continue;
    std::size_t best = seen[0];
    double best_d = SquaredDistance(points[i], points[best]);
    for (std::size_t j : seen) {
      const double d = SquaredDistance(points[i], points[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    auto src = result.features.row(best);
    std::copy(src.begin(), src.end(), result.features.row(i).begin());
  }
  return result;
}

// d_i = mean of member point features, folded in ascending point order.
inline Matrix AggregatePatchTargets(const Matrix& point_features, const PatchSet& patches) {
  Matrix targets(patches.size(), point_features.cols, 0.0);
  for (std::size_t g = 0; g < patches.size(); ++g) {
    auto out = targets.row(g);
    double count = 0;
    for (std::size_t m : patches.membership[g]) {
      Require(m < point_features.rows, ErrorCode::kShapeMismatch,
              "aggregate: patch member " + std::to_string(m) + " outside " +
                  std::to_string(point_features.rows) + " point features");
      auto f = point_features.row(m);
      count += 1.0;
      for (std::size_t d = 0; d < out.size(); ++d) out[d] += (f[d] - out[d]) / count;
    }
  }
  return targets;
}

// Renders a synthetic feature field: every pixel owned by a visible point
// (minimum depth, ties to the smaller index) receives that point's feature
// plus i.i.d. Gaussian noise; empty pixels stay zero.
inline FeatureField PaintFeatureField(std::span<const Vec3> points, const Matrix& point_features,
                                      const Camera& cam, int view_id, double noise_sigma, Rng& rng,
                                      double delta = kDepthTolerance) {
  const auto proj = ProjectVisible(points, cam, delta);
  FeatureField field;
  field.view_id = view_id;
  field.width = cam.width;
  field.height = cam.height;
  field.dim = point_features.cols;
  field.grid.assign(cam.width * cam.height * field.dim, 0.0);
  std::vector<std::size_t> owner(cam.width * cam.height, points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!proj[i].in_frustum) continue;
    std::size_t& o = owner[proj[i].pixel(cam.width)];
    if (o == points.size() || proj[i].depth < proj[o].depth) o = i;
  }
  for (std::size_t px = 0; px < owner.size(); ++px) {
    if (owner[px] == points.size()) continue;
    auto src = point_features.row(owner[px]);
    double* dst = field.grid.data() + px * field.dim;
    for (std::size_t d = 0; d < field.dim; ++d)
      dst[d] = src[d] + (noise_sigma > 0 ? noise_sigma * rng.Normal() : 0.0);
  }
  return field;
}

// Everything cached per shape for Stage 1: the cloud, its patch layout,
// lifted point features d(x) and patch targets d_i.
struct FeatureCache {
  PointCloud cloud;
  PatchSet patches;
  Matrix point_features;  // N x D, may be empty
  Matrix patch_targets;   // G x D
  std::string provenance = "synthetic";
  std::uint64_t seed = 0;

  std::size_t feature_dim() const { return patch_targets.cols; }
};

struct CacheBuildOptions {
  std::size_t num_patches = 32;
  std::size_t patch_size = 16;
  std::size_t fps_seed_index = 0;
  LiftOptions lift;
};

inline FeatureCache BuildFeatureCache(const PointCloud& cloud, std::span<const Camera> cameras,
                                      std::span<const FeatureField> fields,
                                      const CacheBuildOptions& options = {}) {
  ValidateCloud(cloud);
  FeatureCache cache;
  cache.cloud = cloud;
  cache.point_features = LiftPointFeatures(cloud.points, cameras, fields, options.lift).features;
  const auto centers =
      FarthestPointSampling(cloud.points, options.num_patches, options.fps_seed_index);
  cache.patches = BuildPatches(cloud.points, centers, options.patch_size);
  cache.patch_targets = AggregatePatchTargets(cache.point_features, cache.patches);
  cache.seed = options.fps_seed_index;
  return cache;
}

}  // namespace pa3d

#endif  // PA3D_LIFTPROJ_HPP_
