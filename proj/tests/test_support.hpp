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

#ifndef PA3D_TESTS_TEST_SUPPORT_HPP_
#define PA3D_TESTS_TEST_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <atomic>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/liftproj.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/model.hpp"
#include "pa3d/rng.hpp"
#include "pa3d/synth.hpp"
#include "pa3d/training.hpp"

namespace pa3d::testing {

// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("pa3d_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<Vec3> RandomPoints(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<Vec3> out(n);
  for (auto& p : out) p = {rng.Uniform(-scale, scale), rng.Uniform(-scale, scale), rng.Uniform(-scale, scale)};
  return out;
}

// Points on a coarse lattice so that exact distance ties are common.
inline std::vector<Vec3> LatticePoints(Rng& rng, std::size_t n, int extent = 3) {
  std::vector<Vec3> out(n);
  for (auto& p : out)
    for (double& v : p) v = static_cast<double>(static_cast<int>(rng.Index(2 * extent + 1)) - extent);
  return out;
}

inline Matrix RandomMatrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.Uniform(lo, hi);
  return m;
}

inline Matrix UnitRows(Matrix m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double n = 0;
    for (double v : m.row(r)) n += v * v;
    for (double& v : m.row(r)) v /= std::sqrt(n);
  }
  return m;
}

inline FeatureField RandomField(Rng& rng, const Camera& cam, int view_id, std::size_t dim) {
  FeatureField f;
  f.view_id = view_id;
  f.width = cam.width;
  f.height = cam.height;
  f.dim = dim;
  f.grid.resize(cam.width * cam.height * dim);
  for (double& v : f.grid) v = rng.Uniform(-1, 1);
  return f;
}

inline std::vector<Camera> RandomRig(Rng& rng, std::size_t views, std::size_t res) {
  const std::vector<double> elev = {rng.Uniform(-0.6, 0.6), rng.Uniform(-0.6, 0.6)};
  return MakeViewRig(views, rng.Uniform(1.8, 3.0), elev, {res, res, rng.Uniform(0.6, 1.2)});
}

// Random points with some exact duplicates so that shared pixels are common.
inline std::vector<Vec3> CloudWithDuplicates(Rng& rng, std::size_t n) {
  auto pts = RandomPoints(rng, n, 0.9);
  for (std::size_t i = 1; i < n; i += 4) pts[i] = pts[rng.Index(i)];
  return pts;
}

inline EncoderConfig TinyConfig() {
  EncoderConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.pointnet_hidden = 8;
  c.head_2d_out = 4;
  c.head_text_out = 4;
  c.num_patches = 6;
  c.patch_size = 5;
  return c;
}

// Small cached training set over `families`. The text table holds their
// parts and doubles as the 2D feature prototypes, so the config needs
// head_2d_out == head_text_out >= number of parts.
inline TrainingSet SynthTrainingSet(const std::vector<std::string>& families, std::size_t per_family,
                                    std::size_t points, const EncoderConfig& cfg, std::uint64_t seed,
                                    double noise = 0.0, std::size_t resolution = 48) {
  std::vector<std::string> vocab;
  for (const auto& f : families)
    for (const auto& p : FamilyParts(f))
      if (std::find(vocab.begin(), vocab.end(), p) == vocab.end()) vocab.push_back(p);
  TrainingSet set;
  set.text = SynthTextTable(vocab, cfg.head_text_out, seed + 1000);
  Rng rng(seed);
  const auto cams = DefaultRig(4, {resolution, resolution, 50.0 * std::numbers::pi / 180.0});
  CacheBuildOptions opt;
  opt.num_patches = cfg.num_patches;
  opt.patch_size = cfg.patch_size;
  for (std::size_t i = 0; i < per_family; ++i) {
    for (const auto& f : families) {
      const PointCloud cloud = SynthShape(f, points, rng, f + "_" + std::to_string(i));
      const auto fields = PaintFields(cloud, PrototypeFeatures(cloud, set.text), cams, noise, rng);
      set.shapes.push_back(TrainingShapeFromCache(BuildFeatureCache(cloud, cams, fields, opt)));
    }
  }
  return set;
}

inline EncoderConfig TinyTextConfig() {
  EncoderConfig c = TinyConfig();
  c.head_2d_out = 8;
  c.head_text_out = 8;
  return c;
}

template <typename F>
ErrorCode CaughtCode(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  throw std::logic_error("expected a pa3d::Error");
}

}  // namespace pa3d::testing

#define EXPECT_PA3D_ERROR(stmt, expected_code) \
  EXPECT_EQ(::pa3d::testing::CaughtCode([&] { (void)(stmt); }), (expected_code))

#endif  // PA3D_TESTS_TEST_SUPPORT_HPP_
