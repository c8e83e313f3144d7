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

// Procedural part-annotated shapes and ground-truth feature fields. Parts
// are built from boxes, spheres and cylinders separated by gaps of at least
// kPartGap, so points of different parts never share a pixel within the
// depth tolerance and noise-free painting lifts back exactly.

#ifndef PA3D_SYNTH_HPP_
#define PA3D_SYNTH_HPP_

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/liftproj.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/rng.hpp"
#include "pa3d/text_table.hpp"

namespace pa3d {

inline constexpr double kPartGap = 0.1;

inline const std::vector<std::string>& SynthFamilies() {
  static const std::vector<std::string> f = {"barbell", "chair", "table", "lamp"};
  return f;
}

inline std::vector<std::string> FamilyParts(const std::string& family) {
  if (family == "barbell") return {"ball", "handle"};
  if (family == "chair") return {"seat", "back", "leg"};
  if (family == "table") return {"top", "leg"};
  if (family == "lamp") return {"base", "pole", "shade"};
  Fail(ErrorCode::kInvalidArgument, "unknown shape family '" + family + "'");
}

// Union of all family parts in first-seen order.
inline std::vector<std::string> SynthVocabulary() {
  std::vector<std::string> out;
  for (const auto& f : SynthFamilies())
    for (const auto& p : FamilyParts(f))
      if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  return out;
}

namespace detail {

struct Primitive {
  enum Kind { kBox, kSphere, kCylinder } kind;
  Vec3 center;
  Vec3 size;     // box half extents; sphere {r}; cylinder {r, half length}
  int axis = 2;  // cylinder axis
  int part = 0;

  double Area() const {
    switch (kind) {
      case kBox:
        return 8 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]);
      case kSphere:
        return 4 * std::numbers::pi * size[0] * size[0];
      case kCylinder:
        return 2 * std::numbers::pi * size[0] * (2 * size[1] + size[0]);
    }
    return 0;
  }

  Vec3 Sample(Rng& rng) const {
    switch (kind) {
      case kBox: {
        const double a[3] = {size[1] * size[2], size[0] * size[2], size[0] * size[1]};
        double u = rng.Uniform() * (a[0] + a[1] + a[2]);
        int face = u < a[0] ? 0 : (u < a[0] + a[1] ? 1 : 2);
        Vec3 p;
        for (int i = 0; i < 3; ++i) p[i] = rng.Uniform(-size[i], size[i]);
        p[face] = rng.Uniform() < 0.5 ? -size[face] : size[face];
        return center + p;
      }
      case kSphere: {
        Vec3 d{rng.Normal(), rng.Normal(), rng.Normal()};
        const double n = Norm(d);
        return center + (size[0] / (n > 0 ? n : 1.0)) * d;
      }
      case kCylinder: {
        const double r = size[0], h = size[1];
        const double side = 2 * h, cap = r / 2;
        const double t = rng.Uniform(0, 2 * std::numbers::pi);
        double radial = r, along;
        if (rng.Uniform() * (side + 2 * cap) < side) {
          along = rng.Uniform(-h, h);
        } else {
          radial = r * std::sqrt(rng.Uniform());
          along = rng.Uniform() < 0.5 ? -h : h;
        }
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        Vec3 p{0, 0, 0};
        p[axis] = along;
        p[a1] = radial * std::cos(t);
        p[a2] = radial * std::sin(t);
        return center + p;
      }
    }
    return center;
  }
};

inline Primitive Box(Vec3 c, Vec3 half, int part) { return {Primitive::kBox, c, half, 2, part}; }
inline Primitive Sphere(Vec3 c, double r, int part) { return {Primitive::kSphere, c, {r, 0, 0}, 2, part}; }
inline Primitive Cylinder(Vec3 c, double r, double half, int axis, int part) {
  return {Primitive::kCylinder, c, {r, half, 0}, axis, part};
}

inline std::vector<Primitive> FamilyPrimitives(const std::string& family, Rng& rng) {
  const double g = kPartGap;
  std::vector<Primitive> out;
  if (family == "barbell") {
    const double r = rng.Uniform(0.2, 0.3), half = rng.Uniform(0.45, 0.65);
    const double rod = rng.Uniform(0.05, 0.08);
    out.push_back(Sphere({-(half + g + r), 0, 0}, r, 0));
    out.push_back(Sphere({half + g + r, 0, 0}, r, 0));
    out.push_back(Cylinder({0, 0, 0}, rod, half, 0, 1));
  } else if (family == "chair") {
    const double w = rng.Uniform(0.3, 0.45), t = 0.05, back_h = rng.Uniform(0.3, 0.5);
    const double leg_h = rng.Uniform(0.25, 0.4), leg_r = 0.04;
    out.push_back(Box({0, 0, 0}, {w, w, t}, 0));
    out.push_back(Box({0, -w + t, t + g + back_h}, {w, t, back_h}, 1));
    for (double sx : {-1.0, 1.0})
      for (double sy : {-1.0, 1.0})
        out.push_back(Cylinder({sx * (w - leg_r), sy * (w - leg_r), -(t + g + leg_h)}, leg_r, leg_h, 2, 2));
  } else if (family == "table") {
    const double wx = rng.Uniform(0.5, 0.7), wy = rng.Uniform(0.3, 0.45), t = 0.04;
    const double leg_h = rng.Uniform(0.25, 0.4), leg_r = 0.04;
    out.push_back(Box({0, 0, 0}, {wx, wy, t}, 0));
    for (double sx : {-1.0, 1.0})
      for (double sy : {-1.0, 1.0})
        out.push_back(Cylinder({sx * (wx - 0.08), sy * (wy - 0.08), -(t + g + leg_h)}, leg_r, leg_h, 2, 1));
  } else if (family == "lamp") {
    const double base_r = rng.Uniform(0.2, 0.3), base_h = 0.04;
    const double pole_h = rng.Uniform(0.3, 0.45), shade_r = rng.Uniform(0.2, 0.3), shade_h = rng.Uniform(0.1, 0.18);
    out.push_back(Cylinder({0, 0, base_h}, base_r, base_h, 2, 0));
    const double pole_c = 2 * base_h + g + pole_h;
    out.push_back(Cylinder({0, 0, pole_c}, 0.04, pole_h, 2, 1));
    out.push_back(Cylinder({0, 0, pole_c + pole_h + g + shade_h}, shade_r, shade_h, 2, 2));
  } else {
    Fail(ErrorCode::kInvalidArgument, "unknown shape family '" + family + "'");
  }
  return out;
}

}  // namespace detail

// One labeled shape, centered and scaled into the unit sphere. Each part
// receives points in proportion to its surface area, with at least
// `num_points / 16` per part.
inline PointCloud SynthShape(const std::string& family, std::size_t num_points, Rng& rng,
                             const std::string& shape_id) {
  const auto parts = FamilyParts(family);
  Require(num_points >= 4 * parts.size(), ErrorCode::kInvalidArgument,
          "synth: too few points for family '" + family + "'");
  const auto prims = detail::FamilyPrimitives(family, rng);
  std::vector<double> part_area(parts.size(), 0);
  for (const auto& p : prims) part_area[static_cast<std::size_t>(p.part)] += p.Area();
  double total = 0;
  for (double a : part_area) total += a;

  const std::size_t floor_count = num_points / 16;
  std::vector<std::size_t> counts(parts.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const double share = part_area[i] / total * static_cast<double>(num_points - floor_count * parts.size());
    counts[i] = floor_count + static_cast<std::size_t>(share);
    assigned += counts[i];
  }
  for (std::size_t i = 0; assigned < num_points; i = (i + 1) % parts.size()) ++counts[i], ++assigned;

  PointCloud cloud;
  cloud.shape_id = shape_id;
  cloud.category = family;
  cloud.part_names = parts;
  for (std::size_t part = 0; part < parts.size(); ++part) {
    std::vector<const detail::Primitive*> mine;
    double area = 0;
    for (const auto& p : prims)
      if (static_cast<std::size_t>(p.part) == part) mine.push_back(&p), area += p.Area();
    for (std::size_t j = 0; j < counts[part]; ++j) {
      double u = rng.Uniform() * area;
      const detail::Primitive* pick = mine.back();
      for (const auto* p : mine) {
        if (u < p->Area()) {
          pick = p;
          break;
        }
        u -= p->Area();
      }
      cloud.points.push_back(pick->Sample(rng));
      cloud.labels.push_back({static_cast<int>(part)});
    }
  }
  return NormalizeUnitSphere(std::move(cloud));
}

// Orthonormal rows (Gram-Schmidt on Gaussian draws), one per name.
inline Matrix PartPrototypes(std::size_t count, std::size_t dim, std::uint64_t seed) {
  Require(count >= 1 && count <= dim, ErrorCode::kInvalidArgument,
          "prototypes: need 1 <= count <= dim");
  Rng rng(seed);
  Matrix out(count, dim);
  for (std::size_t i = 0; i < count; ++i) {
    for (;;) {
      std::vector<double> v(dim);
      for (double& x : v) x = rng.Normal();
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0;
        for (std::size_t d = 0; d < dim; ++d) dot += v[d] * out(j, d);
        for (std::size_t d = 0; d < dim; ++d) v[d] -= dot * out(j, d);
      }
      double n = 0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      if (n < 1e-6) continue;
      for (std::size_t d = 0; d < dim; ++d) out(i, d) = v[d] / n;
      break;
    }
  }
  return out;
}

// Text table whose rows are the part prototypes of `vocabulary`.
inline TextTable SynthTextTable(const std::vector<std::string>& vocabulary, std::size_t dim,
                                std::uint64_t seed) {
  TextTable t;
  t.names = vocabulary;
  t.embeddings = PartPrototypes(vocabulary.size(), dim, seed);
  for (const auto& name : vocabulary) {
    std::vector<std::string> prompts;
    for (const auto& tmpl : DefaultPromptTemplates()) prompts.push_back(ExpandTemplate(tmpl, name));
    t.prompts.push_back(std::move(prompts));
  }
  return t;
}

// Per-point ground truth: the prototype of each point's (first) label.
inline Matrix PrototypeFeatures(const PointCloud& cloud, const TextTable& table) {
  Require(cloud.has_labels(), ErrorCode::kInvalidArgument, "synth features need labels");
  Matrix out(cloud.size(), table.dim());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    Require(!cloud.labels[i].empty(), ErrorCode::kInvalidArgument, "synth features: unlabeled point");
    const auto& name = cloud.part_names[static_cast<std::size_t>(cloud.labels[i][0])];
    const auto j = table.IndexOf(name);
    Require(j >= 0, ErrorCode::kInvalidArgument, "synth features: no prototype for '" + name + "'");
    auto src = table.embeddings.row(static_cast<std::size_t>(j));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline constexpr std::size_t kDefaultViews = 10;
inline constexpr double kRigRadius = 2.2;

inline std::vector<Camera> DefaultRig(std::size_t views = kDefaultViews, const RigOptions& options = {}) {
  const double deg = std::numbers::pi / 180.0;
  const std::vector<double> elevations = {-30 * deg, 30 * deg};
  return MakeViewRig(views, kRigRadius, elevations, options);
}

inline std::vector<FeatureField> PaintFields(const PointCloud& cloud, const Matrix& point_features,
                                             std::span<const Camera> cameras, double noise_sigma,
                                             Rng& rng) {
  std::vector<FeatureField> out;
  for (std::size_t v = 0; v < cameras.size(); ++v)
    out.push_back(PaintFeatureField(cloud.points, point_features, cameras[v], static_cast<int>(v),
                                    noise_sigma, rng));
  return out;
}

}  // namespace pa3d

#endif  // PA3D_SYNTH_HPP_
