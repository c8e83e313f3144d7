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

// Command-line driver. Each subcommand resolves a flat settings map
// (defaults, then --config file, then explicit flags), runs, and records
// a run manifest from which the same outputs can be regenerated.

#ifndef PA3D_CLI_HPP_
#define PA3D_CLI_HPP_

#include <chrono>
#include <cmath>
#include <charconv>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pa3d/config.hpp"
#include "pa3d/dataio.hpp"
#include "pa3d/error.hpp"
#include "pa3d/eval.hpp"
#include "pa3d/inference.hpp"
#include "pa3d/liftproj.hpp"
#include "pa3d/model.hpp"
#include "pa3d/parallel.hpp"
#include "pa3d/synth.hpp"
#include "pa3d/training.hpp"

#ifndef PA3D_GIT_DESCRIBE
#define PA3D_GIT_DESCRIBE "unknown"
#endif

namespace pa3d::cli {

// Bad invocation: unknown values, missing options, contract violations
// detectable before any work starts. Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { kValue, kPath, kFlag };

struct OptionSpec {
  std::string key;
  std::string default_value;
  std::string help;
  Kind kind = Kind::kValue;
};

class Settings {
 public:
  Settings(KeyValues values, std::set<std::string> given)
      : values_(std::move(values)), given_(std::move(given)) {}

  const KeyValues& values() const { return values_; }
  const std::set<std::string>& given() const { return given_; }
  bool Given(const std::string& key) const { return given_.contains(key); }

  const std::string& Str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::logic_error("undeclared setting '" + key + "'");
    return it->second;
  }
  const std::string& Need(const std::string& key) const {
    const std::string& v = Str(key);
    if (v.empty()) throw UsageError("--" + key + " is required");
    return v;
  }
  fs::path PathOf(const std::string& key) const { return fs::path(Need(key)); }

  std::size_t Count(const std::string& key) const {
    const std::string& v = Str(key);
    std::size_t out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size())
      throw UsageError("--" + key + " expects a non-negative integer, got '" + v + "'");
    return out;
  }
  std::uint64_t U64(const std::string& key) const { return Count(key); }
  double Real(const std::string& key) const {
    const std::string& v = Str(key);
    double out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out))
      throw UsageError("--" + key + " expects a number, got '" + v + "'");
    return out;
  }
  bool Bool(const std::string& key) const {
    const std::string& v = Str(key);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw UsageError("--" + key + " expects true or false, got '" + v + "'");
  }
  std::vector<std::string> List(const std::string& key) const {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(Str(key));
    while (std::getline(in, item, ','))
      if (!Trim(item).empty()) out.push_back(Trim(item));
    return out;
  }

 private:
  KeyValues values_;
  std::set<std::string> given_;
};

struct RunResult {
  std::vector<fs::path> outputs;
  fs::path primary;  // the manifest defaults to <primary>.run.json
  int exit_code = 0;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<OptionSpec> options;
  std::function<RunResult(const Settings&)> run;
};

namespace detail {

// Library argument errors raised while decoding settings are usage errors.
template <typename F>
auto AsUsage(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<OptionSpec> ModelOptions() {
  const EncoderConfig d;
  return {{"d-model", std::to_string(d.d_model), "transformer width"},
          {"n-layers", std::to_string(d.n_layers), "transformer blocks"},
          {"n-heads", std::to_string(d.n_heads), "attention heads"},
          {"mlp-ratio", std::to_string(d.mlp_ratio), "MLP hidden width / d-model"},
          {"pointnet-hidden", std::to_string(d.pointnet_hidden), "PointNet hidden width"},
          {"head-2d-out", std::to_string(d.head_2d_out), "2D head output (cached feature dim)"},
          {"head-text-out", std::to_string(d.head_text_out), "text head output (text dim)"},
          {"num-patches", std::to_string(d.num_patches), "patches per cloud"},
          {"patch-size", std::to_string(d.patch_size), "points per patch"}};
}

inline bool AnyModelKeyGiven(const Settings& s) {
  for (const auto& o : ModelOptions())
    if (s.Given(o.key)) return true;
  return false;
}

inline EncoderConfig ModelConfig(const Settings& s) {
  EncoderConfig c;
  c.d_model = s.Count("d-model");
  c.n_layers = s.Count("n-layers");
  c.n_heads = s.Count("n-heads");
  c.mlp_ratio = s.Count("mlp-ratio");
  c.pointnet_hidden = s.Count("pointnet-hidden");
  c.head_2d_out = s.Count("head-2d-out");
  c.head_text_out = s.Count("head-text-out");
  c.num_patches = s.Count("num-patches");
  c.patch_size = s.Count("patch-size");
  AsUsage([&] { ValidateConfig(c); });
  return c;
}

inline std::vector<OptionSpec> WithModel(std::vector<OptionSpec> opts) {
  for (auto& o : ModelOptions()) opts.push_back(o);
  return opts;
}

// Subdirectories holding a manifest, sorted; or the directory itself when
// it is a single shape.
inline std::vector<fs::path> ShapeDirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) Fail(ErrorCode::kIo, "'" + dir.string() + "' is not a directory");
  if (fs::exists(dir / "manifest.json")) return {dir};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  Require(!out.empty(), ErrorCode::kIo, "'" + dir.string() + "' holds no shape directories");
  return out;
}

inline bool IsSingleShape(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

inline std::vector<TrainingShape> LoadTrainingShapes(const fs::path& dir, bool need_cache) {
  std::vector<TrainingShape> out;
  for (const auto& d : ShapeDirs(dir)) {
    const std::string kind = ManifestKind(d);
    if (kind == "cache") {
      out.push_back(TrainingShapeFromCache(ReadCache(d)));
    } else {
      Require(!need_cache, ErrorCode::kInvalidArgument,
              "'" + d.string() + "' is a '" + kind + "' directory; this stage needs feature caches");
      TrainingShape s;
      s.cloud = ReadAnyCloud(d);
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline void WriteRecords(const fs::path& path, const std::vector<LogRecord>& log) {
  std::string text;
  for (const auto& r : log) {
    Json j{{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr},
           {"grad_norm", r.grad_norm}};
    text += j.dump() + "\n";
  }
  WriteFileAtomic(path, text);
}

inline std::array<std::uint8_t, 3> ToRgb(std::span<const double> c) {
  std::array<std::uint8_t, 3> out{};
  for (int i = 0; i < 3; ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(c[i], 0.0, 1.0) * 255.0));
  return out;
}

inline fs::path SidecarPath(const fs::path& ply, const std::string& suffix) {
  fs::path p = ply;
  p.replace_extension();
  p += suffix;
  return p;
}

// --------------------------------------------------------------- commands

inline RunResult SynthGen(const Settings& s) {
  const fs::path out = s.PathOf("out");
  const auto families = s.List("families");
  if (families.empty()) throw UsageError("--families lists no family");
  for (const auto& f : families) AsUsage([&] { FamilyParts(f); });
  const std::size_t count = s.Count("count"), heldout = s.Count("heldout");
  const std::size_t points = s.Count("points"), views = s.Count("views");
  const double noise = s.Real("noise");
  if (count == 0) throw UsageError("--count must be >= 1");
  if (noise < 0) throw UsageError("--noise must be >= 0");
  const TextTable table =
      AsUsage([&] { return SynthTextTable(SynthVocabulary(), s.Count("feature-dim"), s.U64("prototype-seed")); });
  const auto cameras = AsUsage([&] { return DefaultRig(views); });

  Rng rng(s.U64("seed"));
  StagedDir staged(out);
  for (std::size_t i = 0; i < count + heldout; ++i) {
    for (const auto& family : families) {
      std::ostringstream id;
      id << family << "_" << std::setw(4) << std::setfill('0') << i;
      const PointCloud cloud = SynthShape(family, points, rng, id.str());
      if (i < count) {
        FieldSet fields;
        fields.shape_id = id.str();
        fields.cameras = cameras;
        fields.fields = PaintFields(cloud, PrototypeFeatures(cloud, table), cameras, noise, rng);
        WriteCloud(cloud, staged.path() / "clouds" / id.str(), "synthetic", s.U64("seed"));
        WriteFields(fields, staged.path() / "fields" / id.str());
      } else {
        WriteCloud(cloud, staged.path() / "heldout" / id.str(), "synthetic", s.U64("seed"));
      }
    }
  }
  WriteTextTable(table, staged.path() / "text");
  staged.Commit();
  return {{out}, out};
}

inline RunResult CacheLift(const Settings& s) {
  const fs::path cloud_dir = s.PathOf("cloud"), field_dir = s.PathOf("fields"), out = s.PathOf("out");
  CacheBuildOptions options;
  options.num_patches = s.Count("num-patches");
  options.patch_size = s.Count("patch-size");
  options.fps_seed_index = s.Count("fps-seed");
  options.lift.threads = ThreadsFromEnv();
  const std::size_t views = s.Count("views");
  const bool single = IsSingleShape(cloud_dir);

  auto build = [&](const fs::path& cdir, const fs::path& fdir, const fs::path& odir) {
    const PointCloud cloud = ReadAnyCloud(cdir);
    FieldSet fields = ReadFields(fdir);
    Require(fields.shape_id == cloud.shape_id, ErrorCode::kInvalidArgument,
            "fields '" + fdir.string() + "' belong to '" + fields.shape_id + "', cloud is '" +
                cloud.shape_id + "'");
    if (views > 0) {
      Require(views <= fields.fields.size(), ErrorCode::kInvalidArgument,
              "--views " + std::to_string(views) + " but '" + fdir.string() + "' holds " +
                  std::to_string(fields.fields.size()));
      fields.cameras.resize(views);
      fields.fields.resize(views);
    }
    FeatureCache cache = BuildFeatureCache(cloud, fields.cameras, fields.fields, options);
    WriteCache(cache, odir);
  };
  if (single) {
    build(cloud_dir, field_dir, out);
  } else {
    StagedDir staged(out);
    for (const auto& d : ShapeDirs(cloud_dir)) {
      const auto id = d.filename();
      build(d, field_dir / id, staged.path() / id);
    }
    staged.Commit();
  }
  return {{out}, out};
}

inline RunResult Train(const Settings& s) {
  const Stage stage = AsUsage([&] { return ParseStage(s.Str("stage")); });
  const FreezePolicy freeze = AsUsage([&] { return ParseFreezePolicy(s.Str("freeze")); });
  const fs::path ckpt_out = s.PathOf("ckpt-out");
  const bool scratch = s.Bool("allow-scratch");
  if (stage == Stage::kStage2 && s.Str("ckpt-in").empty() && !scratch)
    throw UsageError(
        "train --stage 2 initializes from the Stage 1 checkpoint: pass --ckpt-in, or "
        "--allow-scratch for the Stage-2-only ablation");
  const EncoderConfig cfg = ModelConfig(s);

  StageConfig sc;
  sc.stage = stage;
  sc.epochs = s.Count("epochs");
  sc.batch_size = s.Count("batch");
  sc.optimizer.learning_rate = s.Real("lr");
  sc.optimizer.weight_decay = s.Real("weight-decay");
  sc.freeze_policy = freeze;
  sc.augment = s.Bool("augment");
  const std::string rot = s.Str("rotation");
  if (rot == "so3") {
    sc.aug.rotation = RotationMode::kSO3;
  } else if (rot == "z") {
    sc.aug.rotation = RotationMode::kAxisZ;
  } else if (rot == "none") {
    sc.aug.rotation = RotationMode::kNone;
  } else {
    throw UsageError("--rotation expects so3, z or none, got '" + rot + "'");
  }
  sc.aug.translation = s.Real("translate");
  sc.aug.scale_lo = s.Real("scale-lo");
  sc.aug.scale_hi = s.Real("scale-hi");
  sc.aug.jitter_sigma = s.Real("jitter");
  sc.aug.jitter_clip = s.Real("jitter-clip");
  sc.seed = s.U64("seed");
  sc.joint_text_weight = s.Real("joint-weight");
  sc.allow_scratch = scratch;
  sc.threads = ThreadsFromEnv();
  if (sc.epochs == 0 || sc.batch_size == 0) throw UsageError("--epochs and --batch must be >= 1");
  if (!(sc.optimizer.learning_rate > 0)) throw UsageError("--lr must be > 0");

  TrainingSet data;
  data.shapes = LoadTrainingShapes(s.PathOf("data"), stage != Stage::kStage2);
  if (stage != Stage::kStage1) data.text = ReadTextTable(s.PathOf("text-table"));

  ModelParams params;
  if (!s.Str("ckpt-in").empty()) {
    params = AnyModelKeyGiven(s) ? LoadCheckpoint(s.PathOf("ckpt-in"), cfg)
                                 : LoadCheckpoint(s.PathOf("ckpt-in"));
  } else {
    params = InitModel(cfg, s.U64("seed"));
  }
  if (stage != Stage::kStage1) CompleteModel(params, s.U64("seed"));

  StageResult r = RunStage(data, std::move(params), sc);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";

  std::set<std::string> omit;
  if (stage == Stage::kStage1 && !r.params.CompletedStage(2) && !r.params.CompletedStage(3))
    omit = {group::kHeadText, group::kLogTau, group::kLogitBias};
  const fs::path log = s.Str("log").empty() ? fs::path(ckpt_out.string() + ".log.jsonl") : s.PathOf("log");
  WriteRecords(log, r.log);
  SaveCheckpoint(r.params, ckpt_out, omit);
  if (!r.log.empty())
    std::cerr << "stage " << StageName(stage) << ": " << r.log.size()
              << " steps, final loss " << r.log.back().loss << "\n";
  return {{ckpt_out, log}, ckpt_out};
}

inline TextTable CandidateParts(const TextTable& table, const PointCloud& cloud,
                                const std::vector<std::string>& parts) {
  if (!parts.empty()) return AsUsage([&] { return table.Subset(parts); });
  if (!cloud.part_names.empty() &&
      std::all_of(cloud.part_names.begin(), cloud.part_names.end(),
                  [&](const std::string& p) { return table.IndexOf(p) >= 0; }))
    return table.Subset(cloud.part_names);
  return table;
}

// Clouds already in unit-sphere units pass through unchanged; others are
// normalized before patching.
inline PointCloud ModelFrame(const PointCloud& cloud) {
  ValidateCloud(cloud);
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.points) centroid = centroid + p;
  centroid = (1.0 / static_cast<double>(cloud.size())) * centroid;
  double max_norm = 0;
  for (const auto& p : cloud.points) max_norm = std::max(max_norm, Norm(p - centroid));
  if (Norm(centroid) <= 1e-6 && std::abs(max_norm - 1.0) <= 1e-6) return cloud;
  return NormalizeUnitSphere(cloud);
}

inline void WriteSegmentation(const PointCloud& cloud, const Segmentation& seg, const fs::path& ply) {
  PlyData d;
  d.shape_id = cloud.shape_id;
  d.category = cloud.category;
  d.points = cloud.points;
  d.part_ids = seg.point_labels;
  WritePly(d, ply);
  WritePartsSidecar(SidecarPath(ply, ".parts.json"), cloud.shape_id, cloud.category, seg.part_names);
}

inline RunResult SegmentCmd(const Settings& s) {
  const fs::path cloud_dir = s.PathOf("cloud"), out = s.PathOf("out");
  const ModelParams params = LoadCheckpoint(s.PathOf("ckpt"));
  Require(params.HasGroup(group::kHeadText), ErrorCode::kInvalidArgument,
          "segment: checkpoint has no text head (run Stage 2 first)");
  const TextTable table = ReadTextTable(s.PathOf("text-table"));
  const auto parts = s.List("parts");
  InferenceOptions options;
  options.fps_seed_index = s.Count("fps-seed");
  if (IsSingleShape(cloud_dir)) {
    const PointCloud cloud = ReadAnyCloud(cloud_dir);
    WriteSegmentation(cloud, Segment(params, ModelFrame(cloud), CandidateParts(table, cloud, parts), options), out);
    return {{out, SidecarPath(out, ".parts.json")}, out};
  }
  StagedDir staged(out);
  for (const auto& d : ShapeDirs(cloud_dir)) {
    const PointCloud cloud = ReadAnyCloud(d);
    WriteSegmentation(cloud, Segment(params, ModelFrame(cloud), CandidateParts(table, cloud, parts), options),
                      staged.path() / (d.filename().string() + ".ply"));
  }
  staged.Commit();
  return {{out}, out};
}

struct NamedLabels {
  std::vector<std::string> names;
  std::vector<int> labels;  // one per point, index into names
};

// Predictions for `id` as a PLY with a parts sidecar, or a labelled shape
// directory whose first label per point is taken.
inline NamedLabels ReadPrediction(const fs::path& pred_dir, const std::string& id) {
  const fs::path ply = pred_dir / (id + ".ply");
  NamedLabels out;
  if (fs::exists(ply)) {
    const PlyData d = ReadPly(ply);
    Require(!d.part_ids.empty(), ErrorCode::kFormat, "'" + ply.string() + "' has no part_id property");
    out.names = ReadPartsSidecar(SidecarPath(ply, ".parts.json"));
    out.labels = d.part_ids;
  } else {
    const PointCloud c = ReadAnyCloud(pred_dir / id);
    Require(c.has_labels(), ErrorCode::kFormat, "'" + (pred_dir / id).string() + "' is unlabeled");
    out.names = c.part_names;
    for (const auto& l : c.labels) out.labels.push_back(l.empty() ? -1 : l[0]);
  }
  for (int l : out.labels)
    Require(l >= -1 && l < static_cast<int>(out.names.size()), ErrorCode::kFormat,
            "prediction for '" + id + "' has label " + std::to_string(l) + " outside its part list");
  return out;
}

inline RunResult EvalCmd(const Settings& s) {
  const fs::path pred_dir = s.PathOf("pred"), gt_dir = s.PathOf("gt"), report = s.PathOf("report");
  const std::string mode_name = s.Str("mode");
  MeanMode mode;
  if (mode_name == "present") {
    mode = MeanMode::kPresentParts;
  } else if (mode_name == "all") {
    mode = MeanMode::kAllParts;
  } else {
    throw UsageError("--mode expects present or all, got '" + mode_name + "'");
  }
  std::vector<ShapeScore> scores;
  Json shapes = Json::array();
  for (const auto& d : ShapeDirs(gt_dir)) {
    const PointCloud gt = ReadAnyCloud(d);
    Require(gt.has_labels(), ErrorCode::kInvalidArgument, "'" + d.string() + "' has no labels");
    const NamedLabels pred = ReadPrediction(pred_dir, d.filename().string());
    Require(pred.labels.size() == gt.size(), ErrorCode::kShapeMismatch,
            "prediction for '" + gt.shape_id + "' has " + std::to_string(pred.labels.size()) +
                " points, ground truth " + std::to_string(gt.size()));
    // Predicted names outside the ground-truth list get fresh ids so they
    // count as false positives.
    std::vector<std::string> names = gt.part_names;
    std::vector<int> mapped;
    for (int l : pred.labels) {
      if (l < 0) {
        mapped.push_back(-1);
        continue;
      }
      const std::string& name = pred.names[static_cast<std::size_t>(l)];
      auto it = std::find(names.begin(), names.end(), name);
      if (it == names.end()) it = names.insert(names.end(), name);
      mapped.push_back(static_cast<int>(it - names.begin()));
    }
    // Unlabelled predictions go to a sentinel id that is dropped from the mean.
    const int sentinel = static_cast<int>(names.size());
    for (int& v : mapped)
      if (v < 0) v = sentinel;
    std::vector<int> ids(names.size() + 1);
    std::iota(ids.begin(), ids.end(), 0);
    ShapeScore sc = ScoreShape(gt.shape_id, gt.category, mapped, gt.labels, ids, mode);
    sc.part_iou.pop_back();
    sc.miou = ShapeMeanIou(sc.part_iou, mode);
    Json parts = Json::object();
    for (std::size_t j = 0; j < names.size(); ++j)
      parts[names[j]] = sc.part_iou[j] ? Json(*sc.part_iou[j]) : Json(nullptr);
    shapes.push_back({{"shape_id", gt.shape_id}, {"category", gt.category}, {"miou", sc.miou},
                      {"part_iou", parts}});
    scores.push_back(std::move(sc));
  }
  const MeanIous m = AggregateMiouCiou(scores);
  Json j{{"miou", m.miou}, {"ciou", m.ciou}, {"mode", mode_name}, {"shapes", shapes}};
  WriteFileAtomic(report, j.dump(2) + "\n");
  std::cout << "mIoU " << m.miou << " cIoU " << m.ciou << " over " << scores.size() << " shapes\n";
  return {{report}, report};
}

inline RunResult GradcheckCmd(const Settings& s) {
  const EncoderConfig cfg = ModelConfig(s);
  const fs::path report = s.PathOf("report");
  const std::string family = s.Str("family");
  AsUsage([&] { FamilyParts(family); });
  GradCheckOptions options;
  options.step = s.Real("step");
  options.max_coords_per_tensor = s.Count("max-coords");
  options.seed = s.U64("seed");
  if (!(options.step > 0)) throw UsageError("--step must be > 0");

  Rng rng(s.U64("seed"));
  const TextTable table = AsUsage([&] { return SynthTextTable(SynthVocabulary(), cfg.head_text_out, 7); });
  if (cfg.head_2d_out != cfg.head_text_out)
    throw UsageError("gradcheck paints its fields with the text prototypes: head-2d-out must equal head-text-out");
  const PointCloud cloud = SynthShape(family, s.Count("points"), rng, family + "_gradcheck");
  const auto cameras = DefaultRig();
  const auto fields = PaintFields(cloud, PrototypeFeatures(cloud, table), cameras, s.Real("noise"), rng);
  CacheBuildOptions cb;
  cb.num_patches = cfg.num_patches;
  cb.patch_size = cfg.patch_size;
  const TrainingShape shape = TrainingShapeFromCache(BuildFeatureCache(cloud, cameras, fields, cb));
  const ModelParams params = InitModel(cfg, s.U64("seed"));

  constexpr double kTolerance = 1e-4;
  bool ok = true;
  Json j = Json::object();
  for (Stage stage : {Stage::kStage1, Stage::kStage2}) {
    const StageGradCheck g = CheckStageGradients(params, shape, table, stage, options);
    const bool pass = g.result.max_rel_error < kTolerance;
    ok = ok && pass;
    const std::string worst = g.names.empty() ? "" : g.names[g.result.worst_tensor];
    std::cout << "stage" << StageName(stage) << " max_rel_error=" << g.result.max_rel_error
              << " coords=" << g.result.coordinates_checked << " worst=" << worst << "["
              << g.result.worst_index << "] " << (pass ? "PASS" : "FAIL") << "\n";
    j["stage" + StageName(stage)] = {{"max_rel_error", g.result.max_rel_error},
                                     {"coordinates_checked", g.result.coordinates_checked},
                                     {"worst_tensor", worst},
                                     {"worst_index", g.result.worst_index},
                                     {"worst_analytic", g.result.worst_analytic},
                                     {"worst_numeric", g.result.worst_numeric},
                                     {"pass", pass}};
  }
  j["tolerance"] = kTolerance;
  WriteFileAtomic(report, j.dump(2) + "\n");
  return {{report}, report, ok ? 0 : 1};
}

inline RunResult PcaColors(const Settings& s) {
  const fs::path out = s.PathOf("out"), cloud_dir = s.PathOf("cloud");
  const std::string layer = s.Str("layer");
  if (layer != "dinocache" && layer != "stage1" && layer != "stage2")
    throw UsageError("--layer expects dinocache, stage1 or stage2, got '" + layer + "'");
  PointCloud cloud;
  Matrix features;
  if (layer == "dinocache") {
    FeatureCache cache = ReadCache(cloud_dir);
    Require(!cache.point_features.empty(), ErrorCode::kInvalidArgument,
            "'" + cloud_dir.string() + "' stores no per-point features");
    cloud = std::move(cache.cloud);
    features = std::move(cache.point_features);
  } else {
    const ModelParams params = LoadCheckpoint(s.PathOf("ckpt"));
    const Head head = layer == "stage1" ? Head::k2d : Head::kText;
    Require(params.HasGroup(head == Head::k2d ? group::kHead2d : group::kHeadText),
            ErrorCode::kInvalidArgument, "pca-colors: checkpoint lacks the " + layer + " head");
    cloud = ReadAnyCloud(cloud_dir);
    InferenceOptions options;
    options.fps_seed_index = s.Count("fps-seed");
    const PointCloud framed = ModelFrame(cloud);
    const PatchSet patches = InferencePatches(params.config, framed.points, options);
    features = PropagateToPoints(patches, PatchEmbeddings(params, patches, framed.points, head), framed.points);
  }
  const Matrix rgb = PcaColorize(features);
  PlyData d;
  d.shape_id = cloud.shape_id;
  d.category = cloud.category;
  d.points = cloud.points;
  for (std::size_t i = 0; i < rgb.rows; ++i) d.colors.push_back(ToRgb(rgb.row(i)));
  WritePly(d, out);
  return {{out}, out};
}

}  // namespace detail

inline const std::vector<Command>& Commands() {
  using detail::WithModel;
  static const std::vector<Command> commands = {
      {"synth-gen",
       "generate labelled synthetic shapes, painted feature fields and a text table",
       {{"out", "", "output directory", Kind::kPath},
        {"families", "barbell,chair", "comma-separated families (barbell, chair, table, lamp)"},
        {"count", "20", "training shapes per family"},
        {"heldout", "0", "extra held-out shapes per family (no fields)"},
        {"points", "512", "points per shape"},
        {"noise", "0", "Gaussian noise sigma on painted features"},
        {"seed", "0", "random seed"},
        {"feature-dim", "16", "prototype / text dimension"},
        {"prototype-seed", "7", "seed of the orthonormal part prototypes"},
        {"views", std::to_string(kDefaultViews), "rendered views per shape"}},
       detail::SynthGen},
      {"cache-lift",
       "lift feature fields onto clouds and write patch-target caches",
       {{"cloud", "", "cloud directory, or a directory of them", Kind::kPath},
        {"fields", "", "field directory, or a directory of them named by shape", Kind::kPath},
        {"out", "", "output cache directory", Kind::kPath},
        {"views", "0", "use the first n views (0 = all)"},
        {"num-patches", "32", "cached patches per shape"},
        {"patch-size", "16", "points per cached patch"},
        {"fps-seed", "0", "FPS starting point index"}},
       detail::CacheLift},
      {"train",
       "run one training stage",
       WithModel({{"stage", "1", "1, 2 or joint"},
                  {"data", "", "directory of cache (or, for stage 2, cloud) directories", Kind::kPath},
                  {"text-table", "", "text table directory (stages 2 and joint)", Kind::kPath},
                  {"ckpt-in", "", "checkpoint to start from", Kind::kPath},
                  {"ckpt-out", "", "checkpoint to write", Kind::kPath},
                  {"log", "", "JSONL training log (default <ckpt-out>.log.jsonl)", Kind::kPath},
                  {"freeze", "last_block_and_heads", "stage 2 policy: all, last_block_and_heads, last_two, last_three, heads_only"},
                  {"epochs", "1", "passes over the data"},
                  {"batch", "32", "shapes per optimizer step"},
                  {"lr", "0.001", "AdamW learning rate"},
                  {"weight-decay", "0.01", "AdamW decoupled weight decay"},
                  {"seed", "0", "random seed (init, shuffling, augmentation)"},
                  {"augment", "true", "apply geometric augmentation"},
                  {"rotation", "so3", "augmentation rotation: so3, z or none"},
                  {"translate", "0.1", "augmentation translation bound"},
                  {"scale-lo", "0.8", "augmentation scale lower bound"},
                  {"scale-hi", "1.2", "augmentation scale upper bound"},
                  {"jitter", "0.005", "augmentation jitter sigma"},
                  {"jitter-clip", "0.02", "augmentation jitter clip"},
                  {"joint-weight", "1", "text loss weight in joint mode"},
                  {"allow-scratch", "false", "allow stage 2 without a stage 1 checkpoint", Kind::kFlag}}),
       detail::Train},
      {"segment",
       "zero-shot part segmentation to PLY with a parts sidecar",
       {{"ckpt", "", "stage 2 checkpoint", Kind::kPath},
        {"cloud", "", "cloud or cache directory, or a directory of them", Kind::kPath},
        {"text-table", "", "text table directory", Kind::kPath},
        {"out", "", "output PLY (single cloud) or directory", Kind::kPath},
        {"parts", "", "comma-separated candidate parts (default: the cloud's part list)"},
        {"fps-seed", "0", "FPS starting point index"}},
       detail::SegmentCmd},
      {"eval",
       "mIoU / cIoU of predictions against labelled shapes",
       {{"pred", "", "directory of <id>.ply predictions (or labelled shape dirs)", Kind::kPath},
        {"gt", "", "directory of labelled shape directories", Kind::kPath},
        {"report", "", "JSON report path", Kind::kPath},
        {"mode", "present", "per-shape mean over present parts or all listed parts"}},
       detail::EvalCmd},
      {"gradcheck",
       "central-difference check of both stage losses on a synthetic shape",
       WithModel({{"report", "gradcheck_report.json", "JSON report path", Kind::kPath},
                  {"family", "chair", "synthetic family of the probe shape"},
                  {"points", "256", "points in the probe shape"},
                  {"noise", "0.05", "painted feature noise"},
                  {"seed", "0", "random seed"},
                  {"step", "1e-5", "central-difference step"},
                  {"max-coords", "8", "coordinates probed per tensor (0 = all)"}}),
       detail::GradcheckCmd},
      {"pca-colors",
       "colour points by the top three principal components of a feature layer",
       {{"ckpt", "", "checkpoint (stage1 / stage2 layers)", Kind::kPath},
        {"cloud", "", "cloud or cache directory", Kind::kPath},
        {"layer", "stage2", "dinocache, stage1 or stage2"},
        {"out", "", "output PLY", Kind::kPath},
        {"fps-seed", "0", "FPS starting point index"}},
       detail::PcaColors},
  };
  return commands;
}

inline const Command& FindCommand(const std::string& name) {
  for (const auto& c : Commands())
    if (c.name == name) return c;
  throw UsageError("unknown command '" + name + "'");
}

inline std::string UtcNow() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Regular files under each output, sorted by path.
inline Json OutputDigests(const std::vector<fs::path>& outputs) {
  std::vector<fs::path> files;
  for (const auto& o : outputs) {
    if (fs::is_directory(o)) {
      for (const auto& e : fs::recursive_directory_iterator(o))
        if (e.is_regular_file()) files.push_back(e.path());
    } else if (fs::exists(o)) {
      files.push_back(o);
    }
  }
  std::sort(files.begin(), files.end());
  Json out = Json::array();
  for (const auto& f : files) {
    const std::string bytes = ReadFile(f);
    out.push_back({{"path", f.string()}, {"bytes", bytes.size()}, {"fnv1a64", Hex64(Fnv1a64(bytes))}});
  }
  return out;
}

inline fs::path ManifestPathFor(const Settings& s, const RunResult& r) {
  if (!s.Str("manifest").empty()) return s.PathOf("manifest");
  fs::path p = r.primary;
  if (!p.has_filename()) p = p.parent_path();
  p += ".run.json";
  return p;
}

// Runs `cmd` with resolved settings and writes its run manifest.
inline int Execute(const Command& cmd, const Settings& s) {
  const std::string started = UtcNow();
  const RunResult r = cmd.run(s);
  Json m;
  m["format_version"] = kFormatVersion;
  m["kind"] = "run";
  m["command"] = cmd.name;
  m["config"] = s.values();
  m["given"] = s.given();
  m["seed"] = s.values().contains("seed") ? s.Str("seed") : "";
  m["git_describe"] = PA3D_GIT_DESCRIBE;
  m["started_utc"] = started;
  m["finished_utc"] = UtcNow();
  m["exit_code"] = r.exit_code;
  m["outputs"] = OutputDigests(r.outputs);
  WriteFileAtomic(ManifestPathFor(s, r), ManifestBytes(m));
  return r.exit_code;
}

inline Settings Resolve(const Command& cmd, const KeyValues& file_values, const KeyValues& cli_values) {
  KeyValues values;
  std::set<std::string> given;
  std::map<std::string, Kind> kinds;
  for (const auto& o : cmd.options) {
    values[o.key] = o.default_value;
    kinds[o.key] = o.kind;
  }
  values["manifest"] = "";
  kinds["manifest"] = Kind::kPath;
  for (const auto* layer : {&file_values, &cli_values}) {
    for (const auto& [k, v] : *layer) {
      if (!values.contains(k)) throw UsageError("unknown setting '" + k + "' for " + cmd.name);
      values[k] = v;
      given.insert(k);
    }
  }
  for (auto& [k, v] : values) {
    if (kinds[k] == Kind::kPath && !v.empty()) {
      fs::path p = fs::absolute(fs::path(v)).lexically_normal();
      if (!p.has_filename()) p = p.parent_path();
      v = p.string();
    }
  }
  return Settings(std::move(values), std::move(given));
}

// Re-executes a run manifest and checks that every recorded output is
// reproduced byte for byte.
inline int ReplayManifest(const fs::path& manifest_path) {
  Json m;
  try {
    m = Json::parse(ReadFile(manifest_path));
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + manifest_path.string() + "': not JSON (" + e.what() + ")");
  }
  Json body = m;
  body.erase("manifest_checksum");
  Require(m.contains("manifest_checksum") &&
              Hex64(Fnv1a64(body.dump())) == m["manifest_checksum"].get<std::string>(),
          ErrorCode::kChecksum, "'" + manifest_path.string() + "': manifest checksum mismatch");
  try {
    const Command& cmd = FindCommand(m.at("command").get<std::string>());
    const KeyValues values = m.at("config").get<KeyValues>();
    const auto given = m.at("given").get<std::set<std::string>>();
    const Json recorded = m.at("outputs");
    KeyValues all = values;
    all["manifest"] = fs::absolute(manifest_path).lexically_normal().string();
    const int code = Execute(cmd, Settings(all, given));
    const Json now = Json::parse(ReadFile(manifest_path)).at("outputs");
    if (now != recorded) {
      std::cerr << "replay: outputs differ from the recorded run\n";
      return 1;
    }
    std::cout << "replay: " << recorded.size() << " output files reproduced\n";
    return code;
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + manifest_path.string() + "': malformed run manifest (" + e.what() + ")");
  }
}

inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"pa3d: patch-text aligned point cloud encoder, desk-scale pipeline"};
  app.require_subcommand(1);
  std::map<std::string, std::map<std::string, std::string>> raw;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  std::map<std::string, std::map<std::string, bool>> flags;
  std::map<std::string, std::string> config_files;
  for (const auto& cmd : Commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_files[cmd.name], "key=value settings file");
    if (cmd.name == "synth-gen") sub->add_option("--spec", config_files[cmd.name], "synthetic spec (key=value)");
    for (const auto& o : cmd.options) {
      if (o.kind == Kind::kFlag) {
        opts[cmd.name][o.key] = sub->add_flag("--" + o.key, flags[cmd.name][o.key], o.help);
      } else {
        std::string help = o.help;
        if (!o.default_value.empty()) help += " [" + o.default_value + "]";
        opts[cmd.name][o.key] = sub->add_option("--" + o.key, raw[cmd.name][o.key], help);
      }
    }
    opts[cmd.name]["manifest"] =
        sub->add_option("--manifest", raw[cmd.name]["manifest"], "run manifest path [<output>.run.json]");
  }
  std::string replay_path;
  CLI::App* replay = app.add_subcommand("replay", "re-run a run manifest and verify its outputs");
  replay->add_option("manifest", replay_path, "run manifest")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();  // program name
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, std::cout, std::cerr);
    return code == 0 ? 0 : 2;
  }

  try {
    if (replay->parsed()) return ReplayManifest(replay_path);
    for (const auto& cmd : Commands()) {
      if (!app.got_subcommand(cmd.name)) continue;
      KeyValues file;
      if (!config_files[cmd.name].empty()) {
        try {
          file = LoadKeyValues(config_files[cmd.name]);
        } catch (const Error& e) {
          throw UsageError(e.what());
        }
      }
      KeyValues cli;
      for (const auto& [key, opt] : opts[cmd.name]) {
        if (opt->count() == 0) continue;
        cli[key] = flags[cmd.name].contains(key) ? (flags[cmd.name][key] ? "true" : "false")
                                                 : raw[cmd.name][key];
      }
      return Execute(cmd, Resolve(cmd, file, cli));
    }
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";  // what() leads with the code name
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

inline int run_cli(int argc, const char* const* argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace pa3d::cli

#endif  // PA3D_CLI_HPP_
