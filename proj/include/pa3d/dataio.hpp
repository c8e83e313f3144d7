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

// On-disk formats. Every directory carries a manifest.json with per-blob
// byte counts and 64-bit FNV-1a checksums, sealed by a checksum over its
// own canonical dump. Numeric blobs are little-endian, row-major: IEEE-754
// f32 for clouds, caches, fields and text tables; f64 for checkpoints.

#ifndef PA3D_DATAIO_HPP_
#define PA3D_DATAIO_HPP_

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "pa3d/error.hpp"
#include "pa3d/geometry.hpp"
#include "pa3d/liftproj.hpp"
#include "pa3d/matrix.hpp"
#include "pa3d/model.hpp"
#include "pa3d/text_table.hpp"

namespace pa3d {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline constexpr std::string_view kFormatVersion = "PA3D-1";

inline std::uint64_t Fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string Hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

namespace detail {

template <typename U>
void AppendLe(std::string& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename U>
U ReadLe(std::string_view in, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string EncodeF32(std::span<const double> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (double v : values) detail::AppendLe(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline std::vector<double> DecodeF32(std::string_view bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::bit_cast<float>(detail::ReadLe<std::uint32_t>(bytes, 4 * i));
  return out;
}

inline std::string EncodeU32(std::span<const std::size_t> values) {
  std::string out;
  for (std::size_t v : values) detail::AppendLe(out, static_cast<std::uint32_t>(v));
  return out;
}

inline std::vector<std::size_t> DecodeU32(std::string_view bytes) {
  std::vector<std::size_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::ReadLe<std::uint32_t>(bytes, 4 * i);
  return out;
}

inline std::string ReadFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void WriteFile(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(out), ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  Require(static_cast<bool>(out), ErrorCode::kIo, "short write to '" + path.string() + "'");
}

// Write to a sibling temp file, then rename over the target.
inline void WriteFileAtomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  WriteFile(tmp, bytes);
  fs::rename(tmp, path);
}

// Directory populated under a temporary name and moved into place on
// Commit(); an uncommitted staging directory is removed.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)) {
    staging_ = target_;
    staging_ += ".partial." + std::to_string(::getpid());
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  const fs::path& path() const { return staging_; }
  void Write(const std::string& name, std::string_view bytes) { WriteFile(staging_ / name, bytes); }
  void Commit() {
    fs::remove_all(target_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool committed_ = false;
};

// ---------------------------------------------------------------- manifests

inline Json BlobEntry(std::string_view bytes) {
  return {{"bytes", bytes.size()}, {"fnv1a64", Hex64(Fnv1a64(bytes))}};
}

inline void SealManifest(Json& m) {
  m.erase("manifest_checksum");
  m["manifest_checksum"] = Hex64(Fnv1a64(m.dump()));
}

inline std::string ManifestBytes(Json m) {
  SealManifest(m);
  return m.dump(2) + "\n";
}

class ManifestReader {
 public:
  ManifestReader(fs::path dir, std::string_view kind) : dir_(std::move(dir)) {
    const std::string text = ReadFile(dir_ / "manifest.json");
    try {
      manifest_ = Json::parse(text);
    } catch (const Json::exception& e) {
      Fail(ErrorCode::kFormat, Where() + "manifest is not valid JSON (" + e.what() + ")");
    }
    Require(manifest_.is_object(), ErrorCode::kFormat, Where() + "manifest is not an object");
    Require(manifest_.contains("format_version") && manifest_["format_version"].is_string(),
            ErrorCode::kFormat, Where() + "manifest has no format_version");
    const std::string version = manifest_["format_version"].get<std::string>();
    Require(version == kFormatVersion, ErrorCode::kVersion,
            Where() + "format_version '" + version + "', expected '" + std::string(kFormatVersion) + "'");
    Require(manifest_.contains("manifest_checksum") && manifest_["manifest_checksum"].is_string(),
            ErrorCode::kFormat, Where() + "manifest is not sealed");
    Json body = manifest_;
    body.erase("manifest_checksum");
    Require(Hex64(Fnv1a64(body.dump())) == manifest_["manifest_checksum"].get<std::string>(),
            ErrorCode::kChecksum, Where() + "manifest checksum mismatch");
    Require(text == manifest_.dump(2) + "\n", ErrorCode::kFormat, Where() + "manifest is not in canonical form");
    Require(String("kind") == kind, ErrorCode::kFormat,
            Where() + "directory holds '" + String("kind") + "', expected '" + std::string(kind) + "'");
  }

  const Json& json() const { return manifest_; }

  std::string String(const std::string& key) const {
    Require(manifest_.contains(key) && manifest_[key].is_string(), ErrorCode::kFormat,
            Where() + "manifest field '" + key + "' missing or not a string");
    return manifest_[key].get<std::string>();
  }
  std::size_t Count(const std::string& key) const {
    Require(manifest_.contains(key) && manifest_[key].is_number_unsigned(), ErrorCode::kFormat,
            Where() + "manifest field '" + key + "' missing or not a count");
    return manifest_[key].get<std::size_t>();
  }
  std::uint64_t U64(const std::string& key) const { return Count(key); }

  bool HasBlob(const std::string& name) const {
    return manifest_.contains("blobs") && manifest_["blobs"].is_object() &&
           manifest_["blobs"].contains(name);
  }

  // Blob bytes after size and checksum validation. A non-zero `expected`
  // is the size implied by the manifest dimensions.
  std::string Blob(const std::string& name, std::size_t expected = 0,
                   const std::string& dims = "") const {
    Require(HasBlob(name), ErrorCode::kFormat, Where() + "manifest lists no blob '" + name + "'");
    const Json& entry = manifest_["blobs"][name];
    Require(entry.is_object() && entry.contains("bytes") && entry["bytes"].is_number_unsigned() &&
                entry.contains("fnv1a64") && entry["fnv1a64"].is_string(),
            ErrorCode::kFormat, Where() + "malformed blob entry '" + name + "'");
    const std::size_t listed = entry["bytes"].get<std::size_t>();
    std::string bytes = ReadFile(dir_ / name);
    Require(bytes.size() >= listed, ErrorCode::kTruncated,
            Where() + name + " has " + std::to_string(bytes.size()) + " bytes, manifest lists " +
                std::to_string(listed));
    Require(bytes.size() == listed, ErrorCode::kFormat,
            Where() + name + " has " + std::to_string(bytes.size()) +
                " bytes, manifest lists " + std::to_string(listed));
    Require(Hex64(Fnv1a64(bytes)) == entry["fnv1a64"].get<std::string>(), ErrorCode::kChecksum,
            Where() + name + " checksum mismatch");
    if (expected != 0 || !dims.empty()) {
      Require(bytes.size() == expected, ErrorCode::kShapeMismatch,
              Where() + name + " holds " + std::to_string(bytes.size()) + " bytes but " + dims +
                  " implies " + std::to_string(expected));
    }
    return bytes;
  }

 private:
  std::string Where() const { return "'" + dir_.string() + "': "; }
  fs::path dir_;
  Json manifest_;
};

// ------------------------------------------------------- clouds and caches

namespace detail {

inline std::string EncodePoints(std::span<const Vec3> points) {
  std::vector<double> flat;
  flat.reserve(points.size() * 3);
  for (const auto& p : points) flat.insert(flat.end(), p.begin(), p.end());
  return EncodeF32(flat);
}

inline std::vector<Vec3> DecodePoints(std::string_view bytes) {
  const auto flat = DecodeF32(bytes);
  std::vector<Vec3> out(flat.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
  return out;
}

inline std::string EncodeLabels(const PointLabels& labels) {
  std::string out;
  for (const auto& l : labels) out += Json(l).dump() + "\n";
  return out;
}

inline PointLabels DecodeLabels(const std::string& bytes, std::size_t n, std::size_t num_parts,
                                const std::string& where) {
  PointLabels out;
  std::istringstream in(bytes);
  std::string line;
  while (std::getline(in, line)) {
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception&) {
      Fail(ErrorCode::kFormat, where + "labels.jsonl line " + std::to_string(out.size() + 1) +
                                   " is not JSON");
    }
    Require(j.is_array(), ErrorCode::kFormat, where + "label entry is not an array");
    std::vector<int> ids;
    for (const auto& v : j) {
      Require(v.is_number_integer(), ErrorCode::kFormat, where + "label id is not an integer");
      const int id = v.get<int>();
      Require(id >= 0 && static_cast<std::size_t>(id) < num_parts, ErrorCode::kFormat,
              where + "label id " + std::to_string(id) + " outside parts.json");
      ids.push_back(id);
    }
    out.push_back(std::move(ids));
  }
  Require(out.size() == n, ErrorCode::kShapeMismatch,
          where + "labels.jsonl has " + std::to_string(out.size()) + " lines for " +
              std::to_string(n) + " points");
  return out;
}

inline std::vector<std::string> DecodeNames(const std::string& bytes, const std::string& where,
                                            const std::string& file) {
  Json j;
  try {
    j = Json::parse(bytes);
  } catch (const Json::exception&) {
    Fail(ErrorCode::kFormat, where + file + " is not JSON");
  }
  Require(j.is_array(), ErrorCode::kFormat, where + file + " is not an array");
  std::vector<std::string> out;
  for (const auto& v : j) {
    Require(v.is_string(), ErrorCode::kFormat, where + file + " entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline void WriteShapeDir(const fs::path& dir, const FeatureCache& cache, bool with_cache) {
  const PointCloud& cloud = cache.cloud;
  ValidateCloud(cloud);
  Json m;
  m["format_version"] = kFormatVersion;
  m["kind"] = with_cache ? "cache" : "cloud";
  m["shape_id"] = cloud.shape_id;
  m["category"] = cloud.category;
  m["num_points"] = cloud.size();
  m["num_parts"] = cloud.part_names.size();
  m["labeled"] = cloud.has_labels();
  m["seed"] = cache.seed;
  m["provenance"] = cache.provenance;
  m["feature_dim"] = with_cache ? cache.feature_dim() : 0;
  m["num_patches"] = with_cache ? cache.patches.size() : 0;
  m["patch_size"] = with_cache ? cache.patches.patch_size() : 0;
  m["has_point_features"] = with_cache && !cache.point_features.empty();

  StagedDir staged(dir);
  auto put = [&](const std::string& name, const std::string& bytes) {
    staged.Write(name, bytes);
    m["blobs"][name] = BlobEntry(bytes);
  };
  put("points.f32", EncodePoints(cloud.points));
  put("parts.json", Json(cloud.part_names).dump() + "\n");
  if (cloud.has_labels()) put("labels.jsonl", EncodeLabels(cloud.labels));
  if (with_cache) {
    const std::size_t D = cache.feature_dim();
    Require(cache.patch_targets.rows == cache.patches.size(), ErrorCode::kShapeMismatch,
            "write cache: targets rows differ from patch count");
    if (!cache.point_features.empty()) {
      Require(cache.point_features.rows == cloud.size() && cache.point_features.cols == D,
              ErrorCode::kShapeMismatch, "write cache: point feature matrix has wrong shape");
      put("pointfeat.f32", EncodeF32(cache.point_features.data));
    }
    put("centers.f32", EncodePoints(cache.patches.centers));
    put("targets.f32", EncodeF32(cache.patch_targets.data));
    std::vector<std::size_t> flat;
    for (const auto& mem : cache.patches.membership) flat.insert(flat.end(), mem.begin(), mem.end());
    put("membership.u32", EncodeU32(flat));
    put("center_index.u32", EncodeU32(cache.patches.center_index));
  }
  staged.Write("manifest.json", ManifestBytes(m));
  staged.Commit();
}

inline FeatureCache ReadShapeDir(const fs::path& dir, std::string_view kind) {
  try {
    ManifestReader r(dir, kind);
    const std::string where = "'" + dir.string() + "': ";
    FeatureCache cache;
    PointCloud& cloud = cache.cloud;
    cloud.shape_id = r.String("shape_id");
    cloud.category = r.String("category");
    cache.provenance = r.String("provenance");
    cache.seed = r.U64("seed");
    const std::size_t n = r.Count("num_points");
    Require(n >= 1, ErrorCode::kFormat, where + "num_points must be >= 1");
    cloud.points = DecodePoints(r.Blob("points.f32", n * 12, "num_points=" + std::to_string(n)));
    cloud.part_names = DecodeNames(r.Blob("parts.json"), where, "parts.json");
    Require(cloud.part_names.size() == r.Count("num_parts"), ErrorCode::kShapeMismatch,
            where + "parts.json lists " + std::to_string(cloud.part_names.size()) +
                " names, manifest num_parts=" + std::to_string(r.Count("num_parts")));
    Require(r.json().contains("labeled") && r.json()["labeled"].is_boolean(), ErrorCode::kFormat,
            where + "manifest field 'labeled' missing");
    if (r.json()["labeled"].get<bool>())
      cloud.labels = DecodeLabels(r.Blob("labels.jsonl"), n, cloud.part_names.size(), where);
    for (const auto& p : cloud.points)
      for (double v : p) Require(std::isfinite(v), ErrorCode::kFormat, where + "non-finite point");
    if (kind == "cache") {
      const std::size_t D = r.Count("feature_dim");
      const std::size_t G = r.Count("num_patches");
      const std::size_t k = r.Count("patch_size");
      Require(D >= 1 && G >= 1 && k >= 1 && k <= n, ErrorCode::kFormat,
              where + "cache dims must be positive with patch_size <= num_points");
      const std::string dims = "num_patches=" + std::to_string(G) + ", feature_dim=" + std::to_string(D);
      Require(r.json().contains("has_point_features") && r.json()["has_point_features"].is_boolean(),
              ErrorCode::kFormat, where + "manifest field 'has_point_features' missing");
      if (r.json()["has_point_features"].get<bool>()) {
        cache.point_features = Matrix(n, D, DecodeF32(r.Blob("pointfeat.f32", n * D * 4,
                                                               "num_points=" + std::to_string(n) +
                                                                   ", feature_dim=" + std::to_string(D))));
      }
      cache.patches.centers = DecodePoints(r.Blob("centers.f32", G * 12, "num_patches=" + std::to_string(G)));
      cache.patch_targets = Matrix(G, D, DecodeF32(r.Blob("targets.f32", G * D * 4, dims)));
      const auto flat = DecodeU32(r.Blob("membership.u32", G * k * 4,
                                         "num_patches=" + std::to_string(G) +
                                             ", patch_size=" + std::to_string(k)));
      for (std::size_t v : flat)
        Require(v < n, ErrorCode::kFormat, where + "membership index out of range");
      for (std::size_t g = 0; g < G; ++g)
        cache.patches.membership.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(g * k),
                                              flat.begin() + static_cast<std::ptrdiff_t>((g + 1) * k));
      if (r.HasBlob("center_index.u32")) {
        cache.patches.center_index = DecodeU32(r.Blob("center_index.u32", G * 4, "num_patches=" + std::to_string(G)));
        for (std::size_t v : cache.patches.center_index)
          Require(v < n, ErrorCode::kFormat, where + "center index out of range");
      } else {
        // Caches from other writers: the center is the member nearest to it.
        for (std::size_t g = 0; g < G; ++g) {
          std::vector<Vec3> members;
          for (std::size_t m : cache.patches.membership[g]) members.push_back(cloud.points[m]);
          cache.patches.center_index.push_back(
              cache.patches.membership[g][NearestIndex(members, cache.patches.centers[g])]);
        }
      }
      for (double v : cache.patch_targets.data)
        Require(std::isfinite(v), ErrorCode::kFormat, where + "non-finite patch target");
    }
    return cache;
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + dir.string() + "': malformed manifest (" + e.what() + ")");
  }
}

}  // namespace detail

inline void WriteCloud(const PointCloud& cloud, const fs::path& dir,
                       const std::string& provenance = "synthetic", std::uint64_t seed = 0) {
  FeatureCache c;
  c.cloud = cloud;
  c.provenance = provenance;
  c.seed = seed;
  detail::WriteShapeDir(dir, c, false);
}

inline PointCloud ReadCloud(const fs::path& dir) { return detail::ReadShapeDir(dir, "cloud").cloud; }

inline void WriteCache(const FeatureCache& cache, const fs::path& dir) {
  detail::WriteShapeDir(dir, cache, true);
}

inline FeatureCache ReadCache(const fs::path& dir) { return detail::ReadShapeDir(dir, "cache"); }

// The `kind` field of a directory manifest, unvalidated.
inline std::string ManifestKind(const fs::path& dir) {
  try {
    const Json j = Json::parse(ReadFile(dir / "manifest.json"));
    return j.at("kind").get<std::string>();
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + dir.string() + "': manifest has no readable kind (" + e.what() + ")");
  }
}

// A cloud from either a cloud or a cache directory.
inline PointCloud ReadAnyCloud(const fs::path& dir) {
  const std::string kind = ManifestKind(dir);
  Require(kind == "cloud" || kind == "cache", ErrorCode::kFormat,
          "'" + dir.string() + "': '" + kind + "' directory holds no point cloud");
  return detail::ReadShapeDir(dir, kind).cloud;
}

// ------------------------------------------------------------ feature fields

inline Json CameraToJson(const Camera& c) {
  return {{"position", c.position}, {"look_at", c.look_at}, {"up", c.up},
          {"vertical_fov", c.vertical_fov}, {"width", c.width}, {"height", c.height}};
}

inline Camera CameraFromJson(const Json& j) {
  Camera c;
  c.position = j.at("position").get<Vec3>();
  c.look_at = j.at("look_at").get<Vec3>();
  c.up = j.at("up").get<Vec3>();
  c.vertical_fov = j.at("vertical_fov").get<double>();
  c.width = j.at("width").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  ValidateCamera(c);
  return c;
}

struct FieldSet {
  std::string shape_id;
  std::vector<Camera> cameras;
  std::vector<FeatureField> fields;
};

inline void WriteFields(const FieldSet& set, const fs::path& dir) {
  Require(set.cameras.size() == set.fields.size() && !set.fields.empty(),
          ErrorCode::kShapeMismatch, "write fields: need one camera per field");
  Json m;
  m["format_version"] = kFormatVersion;
  m["kind"] = "fields";
  m["shape_id"] = set.shape_id;
  m["views"] = Json::array();
  StagedDir staged(dir);
  for (std::size_t i = 0; i < set.fields.size(); ++i) {
    const FeatureField& f = set.fields[i];
    Require(f.grid.size() == f.width * f.height * f.dim, ErrorCode::kShapeMismatch,
            "write fields: grid size disagrees with its dimensions");
    std::ostringstream name;
    name << "field_" << std::setw(3) << std::setfill('0') << f.view_id << ".f32";
    const std::string bytes = EncodeF32(f.grid);
    staged.Write(name.str(), bytes);
    m["blobs"][name.str()] = BlobEntry(bytes);
    m["views"].push_back({{"view_id", f.view_id}, {"blob", name.str()}, {"width", f.width},
                          {"height", f.height}, {"dim", f.dim},
                          {"camera", CameraToJson(set.cameras[i])}});
  }
  staged.Write("manifest.json", ManifestBytes(m));
  staged.Commit();
}

inline FieldSet ReadFields(const fs::path& dir) {
  try {
    ManifestReader r(dir, "fields");
    FieldSet set;
    set.shape_id = r.String("shape_id");
    for (const Json& v : r.json().at("views")) {
      FeatureField f;
      f.view_id = v.at("view_id").get<int>();
      f.width = v.at("width").get<std::size_t>();
      f.height = v.at("height").get<std::size_t>();
      f.dim = v.at("dim").get<std::size_t>();
      const std::string name = v.at("blob").get<std::string>();
      f.grid = DecodeF32(r.Blob(name, f.width * f.height * f.dim * 4,
                                "width=" + std::to_string(f.width) + ", height=" +
                                    std::to_string(f.height) + ", dim=" + std::to_string(f.dim)));
      Camera cam = CameraFromJson(v.at("camera"));
      Require(cam.width == f.width && cam.height == f.height, ErrorCode::kShapeMismatch,
              "'" + dir.string() + "': camera resolution differs from field " + name);
      set.cameras.push_back(cam);
      set.fields.push_back(std::move(f));
    }
    Require(!set.fields.empty(), ErrorCode::kFormat, "'" + dir.string() + "': no views");
    return set;
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + dir.string() + "': malformed manifest (" + e.what() + ")");
  }
}

// ---------------------------------------------------------------- text table

// embeddings.f32 (C x d_t), parts.json (C names) and prompts.json (C lists).
// The manifest is optional on read so that tables from other writers load.
inline void WriteTextTable(const TextTable& table, const fs::path& dir) {
  ValidateTextTable(table);
  const std::string emb = EncodeF32(table.embeddings.data);
  const std::string parts = Json(table.names).dump() + "\n";
  Json prompts = Json::array();
  for (std::size_t i = 0; i < table.size(); ++i)
    prompts.push_back(i < table.prompts.size() ? Json(table.prompts[i]) : Json::array());
  const std::string prompt_bytes = prompts.dump() + "\n";
  Json m;
  m["format_version"] = kFormatVersion;
  m["kind"] = "text_table";
  m["num_parts"] = table.size();
  m["dim"] = table.dim();
  m["blobs"]["embeddings.f32"] = BlobEntry(emb);
  m["blobs"]["parts.json"] = BlobEntry(parts);
  m["blobs"]["prompts.json"] = BlobEntry(prompt_bytes);
  StagedDir staged(dir);
  staged.Write("embeddings.f32", emb);
  staged.Write("parts.json", parts);
  staged.Write("prompts.json", prompt_bytes);
  staged.Write("manifest.json", ManifestBytes(m));
  staged.Commit();
}

inline TextTable ReadTextTable(const fs::path& dir) {
  const std::string where = "'" + dir.string() + "': ";
  try {
    TextTable t;
    std::string emb, parts, prompts;
    std::optional<std::size_t> dim;
    if (fs::exists(dir / "manifest.json")) {
      ManifestReader r(dir, "text_table");
      const std::size_t C = r.Count("num_parts");
      const std::size_t d = r.Count("dim");
      dim = d;
      emb = r.Blob("embeddings.f32", C * d * 4,
                   "num_parts=" + std::to_string(C) + ", dim=" + std::to_string(d));
      parts = r.Blob("parts.json");
      if (r.HasBlob("prompts.json")) prompts = r.Blob("prompts.json");
    } else {
      emb = ReadFile(dir / "embeddings.f32");
      parts = ReadFile(dir / "parts.json");
      if (fs::exists(dir / "prompts.json")) prompts = ReadFile(dir / "prompts.json");
    }
    t.names = detail::DecodeNames(parts, where, "parts.json");
    const std::size_t C = t.names.size();
    Require(C >= 1, ErrorCode::kFormat, where + "parts.json is empty");
    Require(emb.size() % (4 * C) == 0 && !emb.empty(), ErrorCode::kShapeMismatch,
            where + "embeddings.f32 holds " + std::to_string(emb.size()) +
                " bytes, not a multiple of 4 x " + std::to_string(C) + " parts");
    const std::size_t d = emb.size() / (4 * C);
    if (dim) Require(*dim == d, ErrorCode::kShapeMismatch, where + "manifest dim disagrees with embeddings");
    t.embeddings = Matrix(C, d, DecodeF32(emb));
    if (!prompts.empty()) {
      const Json j = Json::parse(prompts);
      Require(j.is_array() && j.size() == C, ErrorCode::kFormat,
              where + "prompts.json must hold one list per part");
      for (const auto& row : j) t.prompts.push_back(row.get<std::vector<std::string>>());
    }
    ValidateTextTable(t);
    return t;
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, where + "malformed text table (" + e.what() + ")");
  }
}

// ---------------------------------------------------------------- checkpoint

inline constexpr std::string_view kCheckpointMagic = "PA3DCKPT";

inline Json ConfigToJson(const EncoderConfig& c) {
  return {{"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},         {"mlp_ratio", c.mlp_ratio},
          {"pointnet_hidden", c.pointnet_hidden}, {"head_2d_out", c.head_2d_out},
          {"head_text_out", c.head_text_out},     {"num_patches", c.num_patches},
          {"patch_size", c.patch_size}};
}

inline EncoderConfig ConfigFromJson(const Json& j) {
  EncoderConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.pointnet_hidden = j.at("pointnet_hidden").get<std::size_t>();
  c.head_2d_out = j.at("head_2d_out").get<std::size_t>();
  c.head_text_out = j.at("head_text_out").get<std::size_t>();
  c.num_patches = j.at("num_patches").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  return c;
}

// Layout: magic, u32 header length, JSON header, f64 payload in header
// order, u64 FNV-1a of all preceding bytes. Groups in `omit` are dropped.
inline std::string EncodeCheckpoint(const ModelParams& p, const std::set<std::string>& omit = {}) {
  Json h;
  h["format_version"] = kFormatVersion;
  h["config"] = ConfigToJson(p.config);
  h["completed_stages"] = p.completed_stages;
  h["trainable"] = Json::object();
  h["tensors"] = Json::array();
  std::string payload;
  for (const auto& t : p.tensors) {
    if (omit.contains(t.group)) continue;
    h["tensors"].push_back({{"name", t.name}, {"group", t.group}, {"shape", t.shape}});
    for (double v : t.data) detail::AppendLe(payload, std::bit_cast<std::uint64_t>(v));
    h["trainable"][t.group] = p.IsTrainable(t.group);
  }
  const std::string header = h.dump();
  std::string out(kCheckpointMagic);
  detail::AppendLe(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out += payload;
  detail::AppendLe(out, Fnv1a64(out));
  return out;
}

inline ModelParams DecodeCheckpoint(std::string_view bytes, const std::string& where = "checkpoint") {
  const std::string w = where + ": ";
  const std::size_t fixed = kCheckpointMagic.size() + 4;
  Require(bytes.size() >= fixed + 8, ErrorCode::kTruncated, w + "file too short");
  Require(bytes.substr(0, kCheckpointMagic.size()) == kCheckpointMagic, ErrorCode::kFormat,
          w + "bad magic");
  const std::size_t header_len = detail::ReadLe<std::uint32_t>(bytes, kCheckpointMagic.size());
  Require(bytes.size() >= fixed + header_len + 8, ErrorCode::kTruncated, w + "truncated header");
  Json h;
  try {
    h = Json::parse(bytes.substr(fixed, header_len));
  } catch (const Json::exception&) {
    // A damaged header is reported as corruption when the checksum disagrees.
    const std::uint64_t stored = detail::ReadLe<std::uint64_t>(bytes, bytes.size() - 8);
    Require(Fnv1a64(bytes.substr(0, bytes.size() - 8)) == stored, ErrorCode::kChecksum,
            w + "checksum mismatch");
    Fail(ErrorCode::kFormat, w + "header is not JSON");
  }
  try {
    const std::string version = h.at("format_version").get<std::string>();
    Require(version == kFormatVersion, ErrorCode::kVersion,
            w + "format_version '" + version + "', expected '" + std::string(kFormatVersion) + "'");
    ModelParams p;
    p.config = ConfigFromJson(h.at("config"));
    ValidateConfig(p.config);
    p.completed_stages = h.at("completed_stages").get<std::vector<int>>();
    std::size_t values = 0;
    for (const auto& t : h.at("tensors")) {
      ParamTensor pt;
      pt.name = t.at("name").get<std::string>();
      pt.group = t.at("group").get<std::string>();
      pt.shape = t.at("shape").get<Shape>();
      values += NumElements(pt.shape);
      p.tensors.push_back(std::move(pt));
    }
    const std::size_t expected = fixed + header_len + values * 8 + 8;
    const std::string sizes = w + "holds " + std::to_string(bytes.size()) +
                              " bytes, header implies " + std::to_string(expected);
    const std::uint64_t stored = detail::ReadLe<std::uint64_t>(bytes, bytes.size() - 8);
    if (Fnv1a64(bytes.substr(0, bytes.size() - 8)) != stored) {
      Require(bytes.size() >= expected, ErrorCode::kTruncated, sizes);
      Fail(ErrorCode::kChecksum, w + "checksum mismatch");
    }
    Require(bytes.size() == expected, ErrorCode::kFormat, sizes);
    std::size_t off = fixed + header_len;
    for (auto& t : p.tensors) {
      t.data.resize(NumElements(t.shape));
      for (double& v : t.data) {
        v = std::bit_cast<double>(detail::ReadLe<std::uint64_t>(bytes, off));
        off += 8;
        Require(std::isfinite(v), ErrorCode::kNonFinite, w + t.name + " holds non-finite values");
      }
    }
    for (const auto& [g, on] : h.at("trainable").items()) p.trainable[g] = on.get<bool>();

    // Names, groups and shapes must be exactly those the config defines.
    const ModelParams ref = InitModel(p.config, 0);
    for (const auto& t : p.tensors) {
      const auto i = ref.Find(t.name);
      Require(i >= 0, ErrorCode::kFormat, w + "unknown parameter '" + t.name + "'");
      const ParamTensor& r = ref.tensors[static_cast<std::size_t>(i)];
      Require(r.group == t.group && r.shape == t.shape, ErrorCode::kShapeMismatch,
              w + t.name + " has shape " + ShapeString(t.shape) + ", config implies " +
                  ShapeString(r.shape));
    }
    for (const auto& g : ref.Groups()) {
      std::size_t have = 0, want = 0;
      for (const auto& t : p.tensors) have += t.group == g;
      for (const auto& t : ref.tensors) want += t.group == g;
      Require(have == 0 || have == want, ErrorCode::kFormat, w + "group '" + g + "' is incomplete");
    }
    // Canonical order regardless of how the header listed them.
    std::vector<ParamTensor> ordered;
    for (const auto& r : ref.tensors) {
      const auto i = p.Find(r.name);
      if (i >= 0) ordered.push_back(std::move(p.tensors[static_cast<std::size_t>(i)]));
    }
    p.tensors = std::move(ordered);
    return p;
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, w + "malformed header (" + e.what() + ")");
  }
}

inline void SaveCheckpoint(const ModelParams& p, const fs::path& path,
                           const std::set<std::string>& omit = {}) {
  WriteFileAtomic(path, EncodeCheckpoint(p, omit));
}

inline ModelParams LoadCheckpoint(const fs::path& path) {
  return DecodeCheckpoint(ReadFile(path), "'" + path.string() + "'");
}

// Loads and requires the stored config to equal `expected`.
inline ModelParams LoadCheckpoint(const fs::path& path, const EncoderConfig& expected) {
  ModelParams p = LoadCheckpoint(path);
  if (!(p.config == expected)) {
    std::string diff;
    const Json a = ConfigToJson(p.config), b = ConfigToJson(expected);
    for (const auto& [k, v] : a.items())
      if (v != b[k]) diff += " " + k + "=" + v.dump() + " (expected " + b[k].dump() + ")";
    Fail(ErrorCode::kConfigMismatch, "'" + path.string() + "': config mismatch:" + diff);
  }
  return p;
}

// ----------------------------------------------------------------------- PLY

struct PlyData {
  std::string shape_id;
  std::string category;
  std::vector<Vec3> points;
  std::vector<int> part_ids;  // empty when absent
  std::vector<std::array<std::uint8_t, 3>> colors;  // empty when absent
};

inline void WritePly(const PlyData& d, const fs::path& path) {
  const std::size_t n = d.points.size();
  Require(d.part_ids.empty() || d.part_ids.size() == n, ErrorCode::kShapeMismatch,
          "ply: part ids do not match point count");
  Require(d.colors.empty() || d.colors.size() == n, ErrorCode::kShapeMismatch,
          "ply: colors do not match point count");
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\n";
  if (!d.shape_id.empty()) out << "comment shape_id " << d.shape_id << "\n";
  if (!d.category.empty()) out << "comment category " << d.category << "\n";
  out << "element vertex " << n << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (!d.part_ids.empty()) out << "property int part_id\n";
  if (!d.colors.empty()) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  out << std::setprecision(9);
  for (std::size_t i = 0; i < n; ++i) {
    out << static_cast<float>(d.points[i][0]) << ' ' << static_cast<float>(d.points[i][1]) << ' '
        << static_cast<float>(d.points[i][2]);
    if (!d.part_ids.empty()) out << ' ' << d.part_ids[i];
    if (!d.colors.empty())
      for (auto c : d.colors[i]) out << ' ' << static_cast<int>(c);
    out << '\n';
  }
  WriteFileAtomic(path, out.str());
}

// Reads the ASCII vertex layout WritePly produces.
inline PlyData ReadPly(const fs::path& path) {
  std::istringstream in(ReadFile(path));
  const std::string where = "'" + path.string() + "': ";
  std::string line;
  Require(std::getline(in, line) && line == "ply", ErrorCode::kFormat, where + "not a PLY file");
  PlyData d;
  std::size_t n = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string f;
      ls >> f;
      ascii = f == "ascii";
    } else if (word == "comment") {
      std::string key, value;
      ls >> key >> value;
      if (key == "shape_id") d.shape_id = value;
      if (key == "category") d.category = value;
    } else if (word == "element") {
      std::string name;
      ls >> name >> n;
      Require(name == "vertex", ErrorCode::kFormat, where + "unsupported element '" + name + "'");
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    }
  }
  Require(ascii, ErrorCode::kFormat, where + "only ASCII PLY is supported");
  Require(props.size() >= 3 && props[0] == "x" && props[1] == "y" && props[2] == "z",
          ErrorCode::kFormat, where + "vertex properties must start with x y z");
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(props.size());
    for (double& v : row)
      Require(static_cast<bool>(in >> v), ErrorCode::kTruncated, where + "vertex data truncated");
    d.points.push_back({row[0], row[1], row[2]});
    std::array<std::uint8_t, 3> rgb{};
    bool has_rgb = false;
    for (std::size_t p = 3; p < props.size(); ++p) {
      if (props[p] == "part_id") d.part_ids.push_back(static_cast<int>(row[p]));
      if (props[p] == "red") rgb[0] = static_cast<std::uint8_t>(row[p]), has_rgb = true;
      if (props[p] == "green") rgb[1] = static_cast<std::uint8_t>(row[p]);
      if (props[p] == "blue") rgb[2] = static_cast<std::uint8_t>(row[p]);
    }
    if (has_rgb) d.colors.push_back(rgb);
  }
  return d;
}

// <stem>.parts.json beside a labeled PLY: part id -> name.
inline void WritePartsSidecar(const fs::path& path, const std::string& shape_id,
                              const std::string& category, std::span<const std::string> parts) {
  Json j{{"shape_id", shape_id}, {"category", category},
         {"parts", std::vector<std::string>(parts.begin(), parts.end())}};
  WriteFileAtomic(path, j.dump(2) + "\n");
}

inline std::vector<std::string> ReadPartsSidecar(const fs::path& path) {
  try {
    return Json::parse(ReadFile(path)).at("parts").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    Fail(ErrorCode::kFormat, "'" + path.string() + "': malformed parts sidecar (" + e.what() + ")");
  }
}

}  // namespace pa3d

#endif  // PA3D_DATAIO_HPP_
