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

// Zero-shot part segmentation and text-query similarity from a single
// encoder forward pass per cloud.

#ifndef PA3D_INFERENCE_HPP_
#define PA3D_INFERENCE_HPP_

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/model.hpp"
#include "pa3d/tensor.hpp"
#include "pa3d/text_table.hpp"

namespace pa3d {

struct InferenceOptions {
  std::size_t fps_seed_index = 0;
};

struct Segmentation {
  std::vector<std::string> part_names;  // candidate parts, column order of scores
  std::vector<int> point_labels;        // N, index into part_names
  std::vector<int> patch_labels;        // G
  Matrix patch_scores;                  // G x C, cosine of h_text(z_i) with t_j
  PatchSet patches;
};

inline PatchSet InferencePatches(const EncoderConfig& cfg, std::span<const Vec3> points,
                                 const InferenceOptions& options) {
  const auto centers = FarthestPointSampling(points, cfg.num_patches, options.fps_seed_index);
  return BuildPatches(points, centers, cfg.patch_size);
}

// Per-patch features from one forward pass; no gradients are recorded.
inline Matrix PatchEmbeddings(const ModelParams& params, const PatchSet& patches,
                              std::span<const Vec3> points, Head head) {
  BoundModel model(params);
  const EncoderOutput enc = Encode(model, patches, points);
  const Tensor y = Project(model, head, enc.z);
  return Matrix(y.rows(), y.cols(), std::vector<double>(y.data().begin(), y.data().end()));
}

inline Matrix PatchLatents(const ModelParams& params, const PatchSet& patches,
                           std::span<const Vec3> points) {
  BoundModel model(params);
  const Tensor z = Encode(model, patches, points).z;
  return Matrix(z.rows(), z.cols(), std::vector<double>(z.data().begin(), z.data().end()));
}

// Index of each point's nearest patch center.
inline std::vector<std::size_t> NearestCentroid(const PatchSet& patches,
                                                std::span<const Vec3> points) {
  std::vector<std::size_t> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = NearestIndex(patches.centers, points[i]);
  return out;
}

inline Matrix PropagateToPoints(const PatchSet& patches, const Matrix& patch_values,
                                std::span<const Vec3> points) {
  const auto owner = NearestCentroid(patches, points);
  Matrix out(points.size(), patch_values.cols);
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto src = patch_values.row(owner[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline std::size_t ArgmaxRow(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

inline Segmentation Segment(const ModelParams& params, const PointCloud& cloud,
                            const TextTable& table, const InferenceOptions& options = {}) {
  Require(table.size() >= 1, ErrorCode::kInvalidArgument, "segment: empty text table");
  ValidateTextTable(table);
  Require(table.dim() == params.config.head_text_out, ErrorCode::kShapeMismatch,
          "segment: text dim " + std::to_string(table.dim()) + " vs head_text_out " +
              std::to_string(params.config.head_text_out));
  ValidateCloud(cloud);
  Segmentation seg;
  seg.part_names = table.names;
  seg.patches = InferencePatches(params.config, cloud.points, options);
  const Matrix emb = PatchEmbeddings(params, seg.patches, cloud.points, Head::kText);
  const std::size_t G = emb.rows, C = table.size();
  seg.patch_scores = Matrix(G, C);
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < emb.cols; ++d) s += emb(i, d) * table.embeddings(j, d);
      seg.patch_scores(i, j) = s;
    }
  for (std::size_t i = 0; i < G; ++i)
    seg.patch_labels.push_back(static_cast<int>(ArgmaxRow(seg.patch_scores.row(i))));
  for (std::size_t owner : NearestCentroid(seg.patches, cloud.points))
    seg.point_labels.push_back(seg.patch_labels[owner]);
  return seg;
}

struct QueryResult {
  std::vector<double> point_scores;
  std::vector<std::size_t> top_indices;
  std::vector<double> patch_scores;
};

// Scores every point by the cosine of its nearest patch's text embedding
// with the (normalised) query. Top-k is by score, ties to the smaller index.
inline QueryResult QuerySimilarity(const ModelParams& params, const PointCloud& cloud,
                                   std::span<const double> query, std::size_t top_k,
                                   const InferenceOptions& options = {}) {
  Require(query.size() == params.config.head_text_out, ErrorCode::kShapeMismatch,
          "query: dim " + std::to_string(query.size()) + " vs head_text_out " +
              std::to_string(params.config.head_text_out));
  ValidateCloud(cloud);
  Require(top_k <= cloud.size(), ErrorCode::kInvalidArgument,
          "query: top_k " + std::to_string(top_k) + " exceeds " + std::to_string(cloud.size()) +
              " points");
  double norm = 0;
  for (double v : query) norm += v * v;
  norm = std::sqrt(norm);
  Require(norm > 0, ErrorCode::kInvalidArgument, "query: zero query vector");

  const PatchSet patches = InferencePatches(params.config, cloud.points, options);
  const Matrix emb = PatchEmbeddings(params, patches, cloud.points, Head::kText);
  QueryResult out;
  for (std::size_t i = 0; i < emb.rows; ++i) {
    double s = 0;
    for (std::size_t d = 0; d < emb.cols; ++d) s += emb(i, d) * query[d] / norm;
    out.patch_scores.push_back(s);
  }
  for (std::size_t owner : NearestCentroid(patches, cloud.points))
    out.point_scores.push_back(out.patch_scores[owner]);
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.point_scores[a] > out.point_scores[b];
  });
  order.resize(top_k);
  out.top_indices = std::move(order);
  return out;
}

}  // namespace pa3d

#endif  // PA3D_INFERENCE_HPP_
