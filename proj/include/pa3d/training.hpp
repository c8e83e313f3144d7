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

// Stage 1 (2D feature distillation), Stage 2 (patch-text sigmoid
// contrastive alignment) and their joint variant.

#ifndef PA3D_TRAINING_HPP_
#define PA3D_TRAINING_HPP_

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/gradcheck.hpp"
#include "pa3d/liftproj.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/model.hpp"
#include "pa3d/parallel.hpp"
#include "pa3d/rng.hpp"
#include "pa3d/tensor.hpp"
#include "pa3d/text_table.hpp"

namespace pa3d {

// Nearest cached center per online center, ties to the smaller index.
inline std::vector<std::size_t> MatchPatches(std::span<const Vec3> online,
                                             std::span<const Vec3> cached) {
  Require(!cached.empty(), ErrorCode::kInvalidArgument, "match_patches: empty cache");
  std::vector<std::size_t> out;
  out.reserve(online.size());
  for (const auto& c : online) out.push_back(NearestIndex(cached, c));
  return out;
}

struct FractionalLabels {
  Matrix y;                   // G x C_s
  std::vector<int> part_ids;  // column j -> part id
};

// y_ij = (# members of patch i carrying part j) / k. Multi-label points
// count toward every part they carry.
inline FractionalLabels ComputeFractionalLabels(const PatchSet& patches,
                                                const PointLabels& point_labels,
                                                std::span<const int> part_ids) {
  FractionalLabels out;
  out.part_ids.assign(part_ids.begin(), part_ids.end());
  out.y = Matrix(patches.size(), part_ids.size(), 0.0);
  std::map<int, std::size_t> column;
  for (std::size_t j = 0; j < part_ids.size(); ++j) column[part_ids[j]] = j;
  for (std::size_t g = 0; g < patches.size(); ++g) {
    const auto& members = patches.membership[g];
    const double k = static_cast<double>(members.size());
    std::vector<std::size_t> counts(part_ids.size(), 0);
    for (std::size_t m : members) {
      Require(m < point_labels.size(), ErrorCode::kShapeMismatch,
              "fractional labels: point " + std::to_string(m) + " has no label entry");
      std::set<int> distinct(point_labels[m].begin(), point_labels[m].end());
      for (int id : distinct) {
        auto it = column.find(id);
        Require(it != column.end(), ErrorCode::kInvalidArgument,
                "fractional labels: part id " + std::to_string(id) + " not in the part list");
        ++counts[it->second];
      }
    }
    for (std::size_t j = 0; j < part_ids.size(); ++j)
      out.y(g, j) = static_cast<double>(counts[j]) / k;
  }
  return out;
}

inline Tensor ToTensor(const Matrix& m) { return Tensor::FromData({m.rows, m.cols}, m.data); }

// (1/G) sum_i [1 - cos(pred_i, target_i)]
inline Tensor Stage1Loss(const Tensor& pred, const Tensor& targets) {
  return ScalarAdd(ScalarMul(ReduceMean(CosineSimilarityRows(pred, targets)), -1.0), 1.0);
}

// s_ij = <z_i, t_j> / tau + b with tau = exp(log_tau).
inline Tensor SimilarityLogits(const Tensor& z_text, const Tensor& text_rows, const Tensor& log_tau,
                               const Tensor& bias) {
  const Tensor inv_tau = Exp(ScalarMul(log_tau, -1.0));
  return Add(Mul(Matmul(z_text, Transpose(text_rows)), inv_tau), bias);
}

// sum_ij [-y log sigma(s) - (1 - y) log(1 - sigma(s))], via log-sigmoid.
inline Tensor SigmoidBceSum(const Tensor& logits, const Matrix& y) {
  Require(logits.rows() == y.rows && logits.cols() == y.cols, ErrorCode::kShapeMismatch,
          "stage2 loss: logits " + ShapeString(logits.shape()) + " vs labels " +
              std::to_string(y.rows) + "x" + std::to_string(y.cols));
  Matrix neg(y.rows, y.cols);
  for (std::size_t i = 0; i < y.data.size(); ++i) neg.data[i] = 1.0 - y.data[i];
  const Tensor pos_term = Mul(ToTensor(y), LogSigmoid(logits));
  const Tensor neg_term = Mul(ToTensor(neg), LogSigmoid(ScalarMul(logits, -1.0)));
  return ScalarMul(ReduceSum(Add(pos_term, neg_term)), -1.0);
}

inline Tensor Stage2Loss(const Tensor& z_text, const Tensor& text_rows, const FractionalLabels& y,
                         const Tensor& log_tau, const Tensor& bias) {
  return SigmoidBceSum(SimilarityLogits(z_text, text_rows, log_tau, bias), y.y);
}

enum class Stage { kStage1 = 1, kStage2 = 2, kJoint = 3 };

inline Stage ParseStage(const std::string& s) {
  if (s == "1") return Stage::kStage1;
  if (s == "2") return Stage::kStage2;
  if (s == "joint") return Stage::kJoint;
  Fail(ErrorCode::kInvalidArgument, "unknown stage '" + s + "' (expected 1, 2 or joint)");
}

inline std::string StageName(Stage s) {
  return s == Stage::kStage1 ? "1" : s == Stage::kStage2 ? "2" : "joint";
}

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Decay applies to weight matrices only
// (names ending in ".w"); biases, norms, tau and b are not decayed.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void Step(ModelParams& params, const std::vector<std::size_t>& indices,
            const std::vector<std::vector<double>>& grads) {
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t s = 0; s < indices.size(); ++s) {
      ParamTensor& p = params.tensors[indices[s]];
      auto& [m, v] = state_[p.name];
      if (m.empty()) {
        m.assign(p.data.size(), 0.0);
        v.assign(p.data.size(), 0.0);
      }
      const bool decay = p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".w") == 0;
      const auto& g = grads[s];
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        if (decay) p.data[i] -= cfg_.learning_rate * cfg_.weight_decay * p.data[i];
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
        p.data[i] -= cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

struct TrainingShape {
  PointCloud cloud;                 // normalised points, labels, part names
  std::vector<Vec3> cached_centers;  // c_i^cache
  Matrix cached_targets;             // d_i per cached center
};

inline TrainingShape TrainingShapeFromCache(const FeatureCache& cache) {
  return {cache.cloud, cache.patches.centers, cache.patch_targets};
}

struct TrainingSet {
  std::vector<TrainingShape> shapes;
  TextTable text;
};

struct StageConfig {
  Stage stage = Stage::kStage1;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  AdamWConfig optimizer;
  FreezePolicy freeze_policy = FreezePolicy::kLastBlockAndHeads;
  bool augment = true;
  AugmentConfig aug;
  std::uint64_t seed = 0;
  double joint_text_weight = 1.0;
  bool allow_scratch = false;  // Stage 2 without a Stage 1 checkpoint
  std::size_t threads = 0;
};

struct LogRecord {
  std::size_t step = 0;
  std::string stage;
  double loss = 0;  // mean per-shape loss over the batch
  double lr = 0;
  double grad_norm = 0;
};

struct StageResult {
  ModelParams params;
  std::vector<LogRecord> log;
  std::vector<std::string> warnings;
};

namespace detail {

struct ShapeStep {
  double loss = 0;
  bool skipped = false;
  std::vector<std::vector<double>> grads;  // aligned with the optimised indices
};

struct PreparedShape {
  PointCloud cloud;
  PatchSet patches;
  const TrainingShape* source = nullptr;
};

// Loss of one prepared shape under `model`; null when a text stage meets a
// shape without parts.
inline Tensor ShapeLoss(const BoundModel& model, const PreparedShape& prep, const TextTable& text,
                        Stage stage, double text_weight) {
  const TrainingShape& shape = *prep.source;
  const bool use_2d = stage != Stage::kStage2;
  const bool use_text = stage != Stage::kStage1;

  std::vector<int> part_ids;
  for (std::size_t j = 0; j < shape.cloud.part_names.size(); ++j) part_ids.push_back(static_cast<int>(j));
  if (use_text && part_ids.empty()) return {};

  const EncoderOutput enc = Encode(model, prep.patches, prep.cloud.points);
  Tensor loss;
  if (use_2d) {
    // Centers are matched in the un-augmented frame via their point indices.
    std::vector<Vec3> online;
    for (std::size_t c : prep.patches.center_index) online.push_back(shape.cloud.points[c]);
    const auto match = MatchPatches(online, shape.cached_centers);
    Matrix targets(match.size(), shape.cached_targets.cols);
    for (std::size_t i = 0; i < match.size(); ++i) {
      auto src = shape.cached_targets.row(match[i]);
      std::copy(src.begin(), src.end(), targets.row(i).begin());
    }
    loss = Stage1Loss(Project(model, Head::k2d, enc.z), ToTensor(targets));
  }
  if (use_text) {
    const FractionalLabels y = ComputeFractionalLabels(prep.patches, prep.cloud.labels, part_ids);
    const Tensor rows = ToTensor(text.Rows(shape.cloud.part_names));
    Tensor l2 = Stage2Loss(Project(model, Head::kText, enc.z), rows, y, model.log_tau, model.logit_bias);
    if (use_2d) l2 = ScalarMul(l2, text_weight);
    loss = loss ? Add(loss, l2) : l2;
  }
  return loss;
}

inline ShapeStep RunShape(const ModelParams& params, const std::set<std::string>& grad_groups,
                          const std::vector<std::size_t>& indices, const PreparedShape& prep,
                          const TextTable& text, Stage stage, double text_weight) {
  ShapeStep out;
  const TrainingShape& shape = *prep.source;
  Graph graph;
  GraphScope scope(graph);
  BoundModel model(params, grad_groups);
  const Tensor loss = ShapeLoss(model, prep, text, stage, text_weight);
  if (!loss) {
    out.skipped = true;
    return out;
  }
  out.loss = loss.item();
  Require(std::isfinite(out.loss), ErrorCode::kNonFinite,
          "training: non-finite loss on shape '" + shape.cloud.shape_id + "'");
  if (indices.empty()) return out;
  const GradientMap grads = graph.Backward(loss);
  for (std::size_t idx : indices) {
    const Tensor& leaf = model.leaves()[idx];
    auto it = grads.find(leaf.id());
    if (it == grads.end()) {
      out.grads.emplace_back(leaf.numel(), 0.0);
    } else {
      out.grads.emplace_back(it->second.data().begin(), it->second.data().end());
    }
  }
  return out;
}

}  // namespace detail

// Groups whose parameters a stage's loss depends on.
inline std::set<std::string> StageGroups(const ModelParams& p, Stage stage) {
  std::set<std::string> out;
  for (const auto& g : CanonicalGroups(p.config)) {
    const bool text_only = g == group::kHeadText || g == group::kLogTau || g == group::kLogitBias;
    if (stage == Stage::kStage1 && text_only) continue;
    if (stage == Stage::kStage2 && g == group::kHead2d) continue;
    out.insert(g);
  }
  return out;
}

inline StageResult RunStage(const TrainingSet& data, ModelParams params, const StageConfig& cfg) {
  Require(cfg.epochs >= 1, ErrorCode::kInvalidArgument, "train: epochs must be >= 1");
  Require(cfg.batch_size >= 1, ErrorCode::kInvalidArgument, "train: batch size must be >= 1");
  Require(cfg.optimizer.learning_rate > 0, ErrorCode::kInvalidArgument, "train: lr must be > 0");
  Require(!data.shapes.empty(), ErrorCode::kInvalidArgument, "train: empty dataset");
  if (cfg.stage == Stage::kStage2) {
    Require(params.CompletedStage(1) || cfg.allow_scratch, ErrorCode::kInvalidArgument,
            "train: stage 2 starts from a stage 1 checkpoint (allow_scratch for the ablation)");
  }
  const bool use_2d = cfg.stage != Stage::kStage2;
  const bool use_text = cfg.stage != Stage::kStage1;
  for (const auto& s : data.shapes) {
    if (use_2d) {
      Require(!s.cached_centers.empty() && s.cached_centers.size() == s.cached_targets.rows,
              ErrorCode::kInvalidArgument,
              "train: shape '" + s.cloud.shape_id + "' has no usable feature cache");
      Require(s.cached_targets.cols == params.config.head_2d_out, ErrorCode::kShapeMismatch,
              "train: cache feature dim " + std::to_string(s.cached_targets.cols) +
                  " vs head_2d_out " + std::to_string(params.config.head_2d_out));
    }
    if (use_text) {
      Require(s.cloud.has_labels(), ErrorCode::kInvalidArgument,
              "train: shape '" + s.cloud.shape_id + "' has no part labels");
    }
  }
  if (use_text) {
    ValidateTextTable(data.text);
    Require(data.text.dim() == params.config.head_text_out, ErrorCode::kShapeMismatch,
            "train: text dim " + std::to_string(data.text.dim()) + " vs head_text_out " +
                std::to_string(params.config.head_text_out));
  }

  if (cfg.stage == Stage::kStage2) {
    SetTrainable(params, cfg.freeze_policy);
  } else {
    SetTrainable(params, FreezePolicy::kAll);
  }
  std::set<std::string> groups;
  const auto relevant = StageGroups(params, cfg.stage);
  for (const auto& g : relevant)
    if (params.IsTrainable(g)) groups.insert(g);
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    if (groups.count(params.tensors[i].group)) indices.push_back(i);

  StageResult result;
  AdamW opt(cfg.optimizer);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.shapes.size());
  std::size_t step = 0;
  std::set<std::string> warned;
  const std::size_t k = params.config.patch_size;
  const std::size_t G = params.config.num_patches;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.Shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      // Random draws happen serially so results do not depend on threading.
      std::vector<detail::PreparedShape> batch;
      for (std::size_t b = start; b < end; ++b) {
        const TrainingShape& s = data.shapes[order[b]];
        detail::PreparedShape prep;
        prep.source = &s;
        prep.cloud = cfg.augment ? Augment(s.cloud, rng, cfg.aug) : s.cloud;
        const std::size_t seed_index = rng.Index(prep.cloud.size());
        const auto centers = FarthestPointSampling(prep.cloud.points, G, seed_index);
        prep.patches = BuildPatches(prep.cloud.points, centers, k);
        batch.push_back(std::move(prep));
      }
      std::vector<detail::ShapeStep> steps(batch.size());
      detail::ParallelFor(batch.size(), cfg.threads, [&](std::size_t b) {
        steps[b] = detail::RunShape(params, groups, indices, batch[b], data.text, cfg.stage,
                                    cfg.joint_text_weight);
      });
      std::vector<std::vector<double>> total(indices.size());
      for (std::size_t s = 0; s < indices.size(); ++s)
        total[s].assign(params.tensors[indices[s]].data.size(), 0.0);
      double loss_sum = 0;
      std::size_t used = 0;
      for (std::size_t b = 0; b < steps.size(); ++b) {
        if (steps[b].skipped) {
          const auto& id = batch[b].source->cloud.shape_id;
          if (warned.insert(id).second)
            result.warnings.push_back("shape '" + id + "' has no parts; skipped in text loss");
          continue;
        }
        ++used;
        loss_sum += steps[b].loss;
        for (std::size_t s = 0; s < indices.size(); ++s)
          for (std::size_t i = 0; i < total[s].size(); ++i) total[s][i] += steps[b].grads[s][i];
      }
      if (used == 0) continue;
      double norm2 = 0;
      for (const auto& g : total)
        for (double v : g) norm2 += v * v;
      opt.Step(params, indices, total);
      for (std::size_t idx : indices)
        for (double v : params.tensors[idx].data)
          Require(std::isfinite(v), ErrorCode::kNonFinite,
                  "training: non-finite weight in '" + params.tensors[idx].name + "' at step " +
                      std::to_string(step));
      result.log.push_back({step, StageName(cfg.stage), loss_sum / static_cast<double>(used),
                            cfg.optimizer.learning_rate, std::sqrt(norm2)});
      ++step;
    }
  }
  params.completed_stages.push_back(static_cast<int>(cfg.stage));
  result.params = std::move(params);
  return result;
}

// Mean per-shape Stage-1 loss with deterministic patching (FPS from point 0).
inline double EvaluateStage1Loss(const ModelParams& params, const TrainingSet& data) {
  double total = 0;
  for (const auto& s : data.shapes) {
    detail::PreparedShape prep;
    prep.source = &s;
    prep.cloud = s.cloud;
    const auto centers = FarthestPointSampling(s.cloud.points, params.config.num_patches, 0);
    prep.patches = BuildPatches(s.cloud.points, centers, params.config.patch_size);
    total += detail::RunShape(params, {}, {}, prep, data.text, Stage::kStage1, 1.0).loss;
  }
  return total / static_cast<double>(data.shapes.size());
}

struct StageGradCheck {
  GradCheckResult result;
  std::vector<std::string> names;  // checked tensors, indexed by result.worst_tensor
};

// Central-difference check of one stage's loss on `shape` against every
// parameter that loss depends on, with deterministic patching.
inline StageGradCheck CheckStageGradients(const ModelParams& params, const TrainingShape& shape,
                                          const TextTable& text, Stage stage,
                                          const GradCheckOptions& options = {}) {
  detail::PreparedShape prep;
  prep.source = &shape;
  prep.cloud = shape.cloud;
  prep.patches = BuildPatches(shape.cloud.points,
                              FarthestPointSampling(shape.cloud.points, params.config.num_patches, 0),
                              params.config.patch_size);
  const auto groups = StageGroups(params, stage);
  std::vector<Tensor> leaves;
  StageGradCheck out;
  std::vector<Tensor> checked;
  for (const auto& t : params.tensors) {
    leaves.push_back(Tensor::FromData(t.shape, t.data, groups.count(t.group) > 0));
    if (leaves.back().requires_grad()) {
      checked.push_back(leaves.back());
      out.names.push_back(t.name);
    }
  }
  const ScalarFn f = [&](const std::vector<Tensor>&) {
    const BoundModel model(params, leaves);
    const Tensor loss = detail::ShapeLoss(model, prep, text, stage, 1.0);
    Require(static_cast<bool>(loss), ErrorCode::kInvalidArgument,
            "gradcheck: shape '" + shape.cloud.shape_id + "' has no parts");
    return loss;
  };
  out.result = CheckGradients(f, checked, options);
  return out;
}

}  // namespace pa3d

#endif  // PA3D_TRAINING_HPP_
