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

// Patch-token point cloud encoder: a shared PointNet over center-relative
// patch coordinates, a centroid positional MLP, pre-norm transformer
// blocks, and the two linear projection heads.

#ifndef PA3D_MODEL_HPP_
#define PA3D_MODEL_HPP_

#include <atomic>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/rng.hpp"
#include "pa3d/tensor.hpp"

namespace pa3d {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t pointnet_hidden = 32;
  std::size_t head_2d_out = 16;
  std::size_t head_text_out = 16;
  std::size_t num_patches = 32;  // G
  std::size_t patch_size = 16;   // k

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline void ValidateConfig(const EncoderConfig& c) {
  for (std::size_t v : {c.d_model, c.n_layers, c.n_heads, c.mlp_ratio, c.pointnet_hidden,
                        c.head_2d_out, c.head_text_out, c.num_patches, c.patch_size}) {
    Require(v >= 1, ErrorCode::kInvalidArgument, "encoder config: all dims must be >= 1");
  }
  Require(c.d_model % c.n_heads == 0, ErrorCode::kInvalidArgument,
          "encoder config: d_model " + std::to_string(c.d_model) + " not divisible by n_heads " +
              std::to_string(c.n_heads));
}

inline constexpr double kInitTemperature = 0.1;
inline constexpr double kInitLogitBias = -10.0;

namespace group {
inline const std::string kPointNet = "pointnet";
inline const std::string kPosEmbed = "pos_embed";
inline const std::string kFinalNorm = "final_norm";
inline const std::string kHead2d = "head_2d";
inline const std::string kHeadText = "head_text";
inline const std::string kLogTau = "log_tau";
inline const std::string kLogitBias = "logit_bias";
inline std::string Block(std::size_t l) { return "block." + std::to_string(l); }
}  // namespace group

struct ParamTensor {
  std::string name;
  std::string group;
  Shape shape;
  std::vector<double> data;

  friend bool operator==(const ParamTensor&, const ParamTensor&) = default;
};

struct ModelParams {
  EncoderConfig config;
  std::vector<ParamTensor> tensors;
  std::map<std::string, bool> trainable;  // per group
  std::vector<int> completed_stages;      // 1, 2, or 3 for joint

  std::ptrdiff_t Find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return static_cast<std::ptrdiff_t>(i);
    return -1;
  }
  const ParamTensor& Get(const std::string& name) const {
    const auto i = Find(name);
    Require(i >= 0, ErrorCode::kInvalidArgument, "model: no parameter '" + name + "'");
    return tensors[static_cast<std::size_t>(i)];
  }
  ParamTensor& Get(const std::string& name) {
    return const_cast<ParamTensor&>(static_cast<const ModelParams&>(*this).Get(name));
  }
  std::vector<std::string> Groups() const {
    std::vector<std::string> out;
    for (const auto& t : tensors)
      if (out.empty() || out.back() != t.group) out.push_back(t.group);
    return out;
  }
  bool HasGroup(const std::string& g) const {
    for (const auto& t : tensors)
      if (t.group == g) return true;
    return false;
  }
  bool IsTrainable(const std::string& g) const {
    auto it = trainable.find(g);
    return it != trainable.end() && it->second;
  }
  bool CompletedStage(int stage) const {
    for (int s : completed_stages)
      if (s == stage) return true;
    return false;
  }
  double temperature() const { return std::exp(Get("log_tau").data[0]); }
  double logit_bias() const { return Get("logit_bias").data[0]; }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

inline void AddLinear(ModelParams& p, const std::string& group, const std::string& name,
                      std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.Uniform(-bound, bound);
  p.tensors.push_back({name + ".w", group, {in, out}, std::move(w)});
  p.tensors.push_back({name + ".b", group, {1, out}, std::vector<double>(out, 0.0)});
}

inline void AddNorm(ModelParams& p, const std::string& group, const std::string& name,
                    std::size_t dim) {
  p.tensors.push_back({name + ".g", group, {1, dim}, std::vector<double>(dim, 1.0)});
  p.tensors.push_back({name + ".b", group, {1, dim}, std::vector<double>(dim, 0.0)});
}

}  // namespace detail

// Appends freshly initialised tensors for one group. Groups are
// independent so a partial checkpoint can be completed later.
inline void InitGroup(ModelParams& p, const std::string& g, Rng& rng) {
  const EncoderConfig& c = p.config;
  const std::size_t d = c.d_model;
  if (g == group::kPointNet) {
    detail::AddLinear(p, g, "pointnet.fc1", 3, c.pointnet_hidden, rng);
    detail::AddLinear(p, g, "pointnet.fc2", c.pointnet_hidden, d, rng);
  } else if (g == group::kPosEmbed) {
    detail::AddLinear(p, g, "pos.fc1", 3, d, rng);
    detail::AddLinear(p, g, "pos.fc2", d, d, rng);
  } else if (g.rfind("block.", 0) == 0) {
    const std::string b = g;
    detail::AddNorm(p, g, b + ".ln1", d);
    detail::AddLinear(p, g, b + ".attn.q", d, d, rng);
    detail::AddLinear(p, g, b + ".attn.k", d, d, rng);
    detail::AddLinear(p, g, b + ".attn.v", d, d, rng);
    detail::AddLinear(p, g, b + ".attn.out", d, d, rng);
    detail::AddNorm(p, g, b + ".ln2", d);
    detail::AddLinear(p, g, b + ".mlp.fc1", d, d * c.mlp_ratio, rng);
    detail::AddLinear(p, g, b + ".mlp.fc2", d * c.mlp_ratio, d, rng);
  } else if (g == group::kFinalNorm) {
    detail::AddNorm(p, g, "final_norm", d);
  } else if (g == group::kHead2d) {
    detail::AddLinear(p, g, "head_2d", d, c.head_2d_out, rng);
  } else if (g == group::kHeadText) {
    detail::AddLinear(p, g, "head_text", d, c.head_text_out, rng);
  } else if (g == group::kLogTau) {
    p.tensors.push_back({"log_tau", g, {1}, {std::log(kInitTemperature)}});
  } else if (g == group::kLogitBias) {
    p.tensors.push_back({"logit_bias", g, {1}, {kInitLogitBias}});
  } else {
    Fail(ErrorCode::kInvalidArgument, "model: unknown parameter group '" + g + "'");
  }
}

// Canonical group order; checkpoints and optimizers follow it.
inline std::vector<std::string> CanonicalGroups(const EncoderConfig& c) {
  std::vector<std::string> out = {group::kPointNet, group::kPosEmbed};
  for (std::size_t l = 0; l < c.n_layers; ++l) out.push_back(group::Block(l));
  for (const auto* g : {&group::kFinalNorm, &group::kHead2d, &group::kHeadText, &group::kLogTau,
                        &group::kLogitBias})
    out.push_back(*g);
  return out;
}

// Each group draws from its own stream derived from the seed, so adding a
// missing group later reproduces the same values as a full init.
inline Rng GroupRng(std::uint64_t seed, const std::string& g) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (unsigned char ch : g) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return Rng(h);
}

inline ModelParams InitModel(const EncoderConfig& cfg, std::uint64_t seed) {
  ValidateConfig(cfg);
  ModelParams p;
  p.config = cfg;
  for (const auto& g : CanonicalGroups(cfg)) {
    Rng rng = GroupRng(seed, g);
    InitGroup(p, g, rng);
    p.trainable[g] = true;
  }
  return p;
}

// Fills in any canonical group absent from `p`, keeping canonical order.
inline std::vector<std::string> CompleteModel(ModelParams& p, std::uint64_t seed) {
  std::vector<std::string> added;
  ModelParams full;
  full.config = p.config;
  full.trainable = p.trainable;
  full.completed_stages = p.completed_stages;
  for (const auto& g : CanonicalGroups(p.config)) {
    if (p.HasGroup(g)) {
      for (const auto& t : p.tensors)
        if (t.group == g) full.tensors.push_back(t);
    } else {
      Rng rng = GroupRng(seed, g);
      InitGroup(full, g, rng);
      added.push_back(g);
      if (!full.trainable.count(g)) full.trainable[g] = true;
    }
  }
  p = std::move(full);
  return added;
}

enum class FreezePolicy { kAll, kLastBlockAndHeads, kLastTwo, kLastThree, kHeadsOnly };

inline FreezePolicy ParseFreezePolicy(const std::string& s) {
  if (s == "all") return FreezePolicy::kAll;
  if (s == "last_block_and_heads") return FreezePolicy::kLastBlockAndHeads;
  if (s == "last_two") return FreezePolicy::kLastTwo;
  if (s == "last_three") return FreezePolicy::kLastThree;
  if (s == "heads_only") return FreezePolicy::kHeadsOnly;
  Fail(ErrorCode::kInvalidArgument, "unknown freeze policy '" + s + "'");
}

inline std::string FreezePolicyName(FreezePolicy p) {
  switch (p) {
    case FreezePolicy::kAll: return "all";
    case FreezePolicy::kLastBlockAndHeads: return "last_block_and_heads";
    case FreezePolicy::kLastTwo: return "last_two";
    case FreezePolicy::kLastThree: return "last_three";
    case FreezePolicy::kHeadsOnly: return "heads_only";
  }
  return "all";
}

// Sets per-group trainability. For the partial policies only the last
// 1/2/3 transformer blocks plus h_text, tau and b train; h_2D is frozen.
inline void SetTrainable(ModelParams& p, FreezePolicy policy) {
  const auto groups = CanonicalGroups(p.config);
  for (const auto& g : groups) p.trainable[g] = policy == FreezePolicy::kAll;
  if (policy == FreezePolicy::kAll) return;
  std::size_t open_blocks = 0;
  if (policy == FreezePolicy::kLastBlockAndHeads) open_blocks = 1;
  if (policy == FreezePolicy::kLastTwo) open_blocks = 2;
  if (policy == FreezePolicy::kLastThree) open_blocks = 3;
  const std::size_t L = p.config.n_layers;
  for (std::size_t l = L - std::min(open_blocks, L); l < L; ++l) p.trainable[group::Block(l)] = true;
  p.trainable[group::kHeadText] = true;
  p.trainable[group::kLogTau] = true;
  p.trainable[group::kLogitBias] = true;
}

inline std::atomic<std::uint64_t>& TransformerForwardCounter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
inline std::uint64_t TransformerForwardCount() { return TransformerForwardCounter().load(); }

struct Linear {
  Tensor w, b;
};
struct NormParams {
  Tensor g, b;
};
struct BlockWeights {
  NormParams ln1;
  Linear q, k, v, out;
  NormParams ln2;
  Linear fc1, fc2;
};

// Leaf tensors for one forward/backward pass over a copy of the params.
class BoundModel {
 public:
  BoundModel(const ModelParams& params, const std::set<std::string>& grad_groups = {})
      : config_(params.config) {
    for (const auto& t : params.tensors)
      leaves_.push_back(Tensor::FromData(t.shape, t.data, grad_groups.count(t.group) > 0));
    Bind(params);
  }

  // Binds caller-owned leaves, one per entry of `params.tensors`.
  BoundModel(const ModelParams& params, std::vector<Tensor> leaves)
      : config_(params.config), leaves_(std::move(leaves)) {
    Require(leaves_.size() == params.tensors.size(), ErrorCode::kShapeMismatch,
            "model: leaf count differs from parameter count");
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      Require(leaves_[i].shape() == params.tensors[i].shape, ErrorCode::kShapeMismatch,
              "model: leaf shape differs for '" + params.tensors[i].name + "'");
    Bind(params);
  }

  const EncoderConfig& config() const { return config_; }
  const std::vector<Tensor>& leaves() const { return leaves_; }
  const Tensor& Leaf(const std::string& name) const {
    auto it = index_.find(name);
    Require(it != index_.end(), ErrorCode::kInvalidArgument, "model: no parameter '" + name + "'");
    return leaves_[it->second];
  }

  Linear pointnet_fc1, pointnet_fc2, pos_fc1, pos_fc2;
  std::vector<BlockWeights> blocks;
  NormParams final_norm;
  Linear head_2d, head_text;
  Tensor log_tau, logit_bias;

 private:
  void Bind(const ModelParams& params) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i) index_[params.tensors[i].name] = i;
    pointnet_fc1 = LinearOf("pointnet.fc1");
    pointnet_fc2 = LinearOf("pointnet.fc2");
    pos_fc1 = LinearOf("pos.fc1");
    pos_fc2 = LinearOf("pos.fc2");
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string b = group::Block(l);
      blocks.push_back({NormOf(b + ".ln1"), LinearOf(b + ".attn.q"), LinearOf(b + ".attn.k"),
                        LinearOf(b + ".attn.v"), LinearOf(b + ".attn.out"), NormOf(b + ".ln2"),
                        LinearOf(b + ".mlp.fc1"), LinearOf(b + ".mlp.fc2")});
    }
    final_norm = NormOf("final_norm");
    if (index_.count("head_2d.w")) head_2d = LinearOf("head_2d");
    if (index_.count("head_text.w")) head_text = LinearOf("head_text");
    if (index_.count("log_tau")) log_tau = Leaf("log_tau");
    if (index_.count("logit_bias")) logit_bias = Leaf("logit_bias");
  }

  Linear LinearOf(const std::string& n) const { return {Leaf(n + ".w"), Leaf(n + ".b")}; }
  NormParams NormOf(const std::string& n) const { return {Leaf(n + ".g"), Leaf(n + ".b")}; }

  EncoderConfig config_;
  std::vector<Tensor> leaves_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor Ones(std::size_t rows) { return Tensor::Full({rows, 1}, 1.0); }

// x W + 1 b, with the bias row expanded by an explicit ones column.
inline Tensor ApplyLinear(const Tensor& x, const Linear& l) {
  return Add(Matmul(x, l.w), Matmul(Ones(x.rows()), l.b));
}

inline Tensor ApplyNorm(const Tensor& x, const NormParams& n) {
  const Tensor ones = Ones(x.rows());
  return Add(Mul(LayerNorm(x), Matmul(ones, n.g)), Matmul(ones, n.b));
}

struct TokenParts {
  Tensor local;     // PointNet term, G x d
  Tensor position;  // centroid MLP term, G x d
  Tensor tokens;    // sum
};

inline TokenParts EncodeTokens(const BoundModel& m, const PatchSet& patches,
                               std::span<const Vec3> points) {
  const std::size_t G = patches.size();
  Require(G >= 1, ErrorCode::kInvalidArgument, "encode: empty patch set");
  const std::size_t k = patches.patch_size();
  std::vector<double> rel;
  rel.reserve(G * k * 3);
  std::vector<double> centers;
  centers.reserve(G * 3);
  for (std::size_t g = 0; g < G; ++g) {
    Require(patches.membership[g].size() == k, ErrorCode::kShapeMismatch,
            "encode: patches must share one size");
    const Vec3& c = patches.centers[g];
    for (std::size_t idx : patches.membership[g]) {
      Require(idx < points.size(), ErrorCode::kShapeMismatch, "encode: patch index outside cloud");
      const Vec3 r = points[idx] - c;
      rel.insert(rel.end(), r.begin(), r.end());
    }
    centers.insert(centers.end(), c.begin(), c.end());
  }
  const Tensor rel_t = Tensor::FromData({G * k, 3}, std::move(rel));
  const Tensor ctr_t = Tensor::FromData({G, 3}, std::move(centers));
  TokenParts out;
  out.local = MaxPoolRows(ApplyLinear(Gelu(ApplyLinear(rel_t, m.pointnet_fc1)), m.pointnet_fc2), k);
  out.position = ApplyLinear(Gelu(ApplyLinear(ctr_t, m.pos_fc1)), m.pos_fc2);
  out.tokens = Add(out.local, out.position);
  return out;
}

namespace detail {

// d x dh column selector for head h.
inline Tensor HeadSelector(std::size_t d, std::size_t dh, std::size_t h) {
  std::vector<double> s(d * dh, 0.0);
  for (std::size_t j = 0; j < dh; ++j) s[(h * dh + j) * dh + j] = 1.0;
  return Tensor::FromData({d, dh}, std::move(s));
}

}  // namespace detail

inline Tensor SelfAttention(const Tensor& x, const BlockWeights& b, std::size_t n_heads) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / n_heads;
  const Tensor q = ApplyLinear(x, b.q);
  const Tensor k = ApplyLinear(x, b.k);
  const Tensor v = ApplyLinear(x, b.v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor sel = detail::HeadSelector(d, dh, h);
    const Tensor qh = Matmul(q, sel), kh = Matmul(k, sel), vh = Matmul(v, sel);
    const Tensor attn = SoftmaxRows(ScalarMul(Matmul(qh, Transpose(kh)), scale));
    heads.push_back(Matmul(attn, vh));
  }
  return ApplyLinear(n_heads == 1 ? heads[0] : Concat(heads, 1), b.out);
}

inline Tensor ApplyBlock(const Tensor& x, const BlockWeights& b, std::size_t n_heads) {
  const Tensor h = Add(x, SelfAttention(ApplyNorm(x, b.ln1), b, n_heads));
  return Add(h, ApplyLinear(Gelu(ApplyLinear(ApplyNorm(h, b.ln2), b.fc1)), b.fc2));
}

// Pre-norm blocks with full bidirectional attention, then a final norm.
inline Tensor TransformerForward(const BoundModel& m, const Tensor& tokens) {
  Require(tokens.rank() == 2 && tokens.cols() == m.config().d_model, ErrorCode::kShapeMismatch,
          "transformer: tokens " + ShapeString(tokens.shape()) + " vs d_model " +
              std::to_string(m.config().d_model));
  TransformerForwardCounter().fetch_add(1, std::memory_order_relaxed);
  Tensor x = tokens;
  for (const auto& b : m.blocks) x = ApplyBlock(x, b, m.config().n_heads);
  return ApplyNorm(x, m.final_norm);
}

enum class Head { k2d, kText };

// Linear projection head; text embeddings are L2-normalised by default.
inline Tensor Project(const BoundModel& m, Head head, const Tensor& z, bool normalize_text = true) {
  if (head == Head::k2d) {
    Require(static_cast<bool>(m.head_2d.w), ErrorCode::kInvalidArgument, "model has no h_2D head");
    return ApplyLinear(z, m.head_2d);
  }
  Require(static_cast<bool>(m.head_text.w), ErrorCode::kInvalidArgument, "model has no h_text head");
  const Tensor y = ApplyLinear(z, m.head_text);
  return normalize_text ? L2NormalizeRows(y) : y;
}

struct EncoderOutput {
  TokenParts tokens;
  Tensor z;
};

inline EncoderOutput Encode(const BoundModel& m, const PatchSet& patches,
                            std::span<const Vec3> points) {
  EncoderOutput out;
  out.tokens = EncodeTokens(m, patches, points);
  out.z = TransformerForward(m, out.tokens.tokens);
  return out;
}

inline std::set<std::string> TrainableGroups(const ModelParams& p) {
  std::set<std::string> out;
  for (const auto& [g, on] : p.trainable)
    if (on) out.insert(g);
  return out;
}

}  // namespace pa3d

#endif  // PA3D_MODEL_HPP_
