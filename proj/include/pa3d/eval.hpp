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

// Segmentation metrics and PCA feature colorisation.

#ifndef PA3D_EVAL_HPP_
#define PA3D_EVAL_HPP_

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/matrix.hpp"

namespace pa3d {

enum class MeanMode {
  kPresentParts,  // parts present in GT or prediction
  kAllParts,      // every listed part; absent-on-both-sides counts as 1
};

// IoU per listed part; nullopt when the part appears on neither side. A
// point counts toward part j on the GT side when j is among its labels.
inline std::vector<std::optional<double>> IouPerPart(std::span<const int> pred,
                                                     const PointLabels& gt,
                                                     std::span<const int> parts) {
  Require(pred.size() == gt.size(), ErrorCode::kShapeMismatch,
          "iou: " + std::to_string(pred.size()) + " predictions vs " + std::to_string(gt.size()) +
              " ground-truth points");
  std::vector<std::optional<double>> out;
  for (int part : parts) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] == part;
      const bool g = std::find(gt[i].begin(), gt[i].end(), part) != gt[i].end();
      inter += p && g;
      uni += p || g;
    }
    if (uni == 0) {
      out.push_back(std::nullopt);
    } else {
      out.push_back(static_cast<double>(inter) / static_cast<double>(uni));
    }
  }
  return out;
}

struct ShapeScore {
  std::string shape_id;
  std::string category;
  std::vector<std::optional<double>> part_iou;
  double miou = 0;
};

inline double ShapeMeanIou(std::span<const std::optional<double>> part_iou, MeanMode mode) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& v : part_iou) {
    if (v) {
      s += *v;
      ++n;
    } else if (mode == MeanMode::kAllParts) {
      s += 1.0;
      ++n;
    }
  }
  Require(n > 0, ErrorCode::kInvalidArgument, "iou: no part to average over");
  return s / static_cast<double>(n);
}

inline ShapeScore ScoreShape(std::string shape_id, std::string category, std::span<const int> pred,
                             const PointLabels& gt, std::span<const int> parts,
                             MeanMode mode = MeanMode::kPresentParts) {
  for (int p : pred)
    Require(std::find(parts.begin(), parts.end(), p) != parts.end(), ErrorCode::kInvalidArgument,
            "iou: predicted part " + std::to_string(p) + " is not in the part list");
  ShapeScore s;
  s.shape_id = std::move(shape_id);
  s.category = std::move(category);
  s.part_iou = IouPerPart(pred, gt, parts);
  s.miou = ShapeMeanIou(s.part_iou, mode);
  return s;
}

struct MeanIous {
  double miou = 0;  // mean over shapes
  double ciou = 0;  // mean over categories of the within-category mean
};

inline MeanIous AggregateMiouCiou(std::span<const ShapeScore> scores) {
  Require(!scores.empty(), ErrorCode::kInvalidArgument, "aggregate: no shape scores");
  MeanIous out;
  std::map<std::string, std::pair<double, std::size_t>> per_cat;
  for (const auto& s : scores) {
    out.miou += s.miou;
    auto& [sum, n] = per_cat[s.category];
    sum += s.miou;
    ++n;
  }
  out.miou /= static_cast<double>(scores.size());
  for (const auto& [cat, acc] : per_cat) out.ciou += acc.first / static_cast<double>(acc.second);
  out.ciou /= static_cast<double>(per_cat.size());
  return out;
}

// Top-3 principal components of the centred features, each min-max scaled
// to [0, 1]. Each component's largest-magnitude loading is made positive.
// Components with negligible variance (or missing, when D < 3) map to 0.5.
inline Matrix PcaColorize(const Matrix& features) {
  Require(features.rows >= 3, ErrorCode::kInvalidArgument,
          "pca: need at least 3 points, got " + std::to_string(features.rows));
  const std::size_t n = features.rows, d = features.cols;
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = features(i, j);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Matrix rgb(n, 3, 0.5);
  if (d == 0) return rgb;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const double top = std::max(values(d - 1), 0.0);
  if (top <= 0) return rgb;
  for (std::size_t c = 0; c < std::min<std::size_t>(3, d); ++c) {
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    if (values(col) <= 1e-12 * top) continue;
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < v.size(); ++j)
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = x * v;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (hi - lo <= 0) continue;
    for (std::size_t i = 0; i < n; ++i) rgb(i, c) = (proj(static_cast<Eigen::Index>(i)) - lo) / (hi - lo);
  }
  return rgb;
}

}  // namespace pa3d

#endif  // PA3D_EVAL_HPP_
