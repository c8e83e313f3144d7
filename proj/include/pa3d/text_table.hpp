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

#ifndef PA3D_TEXT_TABLE_HPP_
#define PA3D_TEXT_TABLE_HPP_

#include <cmath>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/matrix.hpp"

namespace pa3d {

inline const std::vector<std::string>& DefaultPromptTemplates() {
  static const std::vector<std::string> templates = {"{part}", "a {part}", "{part} part"};
  return templates;
}

inline std::string ExpandTemplate(const std::string& tmpl, const std::string& part) {
  std::string out = tmpl;
  const std::string key = "{part}";
  for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + part.size()))
    out.replace(pos, key.size(), part);
  return out;
}

// Part names and their unit-norm text embeddings t_j, one row per part.
struct TextTable {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> prompts;  // prompts embedded per part
  Matrix embeddings;                              // C x d_t

  std::size_t size() const { return names.size(); }
  std::size_t dim() const { return embeddings.cols; }

  std::ptrdiff_t IndexOf(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<std::ptrdiff_t>(i);
    return -1;
  }

  // Rows for `parts` in that order; every part must exist.
  Matrix Rows(std::span<const std::string> parts) const {
    Matrix out(parts.size(), dim());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto j = IndexOf(parts[i]);
      Require(j >= 0, ErrorCode::kInvalidArgument, "text table has no part '" + parts[i] + "'");
      auto src = embeddings.row(static_cast<std::size_t>(j));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  TextTable Subset(std::span<const std::string> parts) const {
    TextTable t;
    t.embeddings = Rows(parts);
    for (const auto& p : parts) {
      t.names.push_back(p);
      const auto j = static_cast<std::size_t>(IndexOf(p));
      t.prompts.push_back(j < prompts.size() ? prompts[j] : std::vector<std::string>{});
    }
    return t;
  }
};

inline void ValidateTextTable(const TextTable& t) {
  Require(!t.names.empty(), ErrorCode::kInvalidArgument, "text table is empty");
  Require(t.embeddings.rows == t.names.size(), ErrorCode::kShapeMismatch,
          "text table: " + std::to_string(t.names.size()) + " names but " +
              std::to_string(t.embeddings.rows) + " embedding rows");
  std::set<std::string> seen;
  for (const auto& n : t.names)
    Require(seen.insert(n).second, ErrorCode::kInvalidArgument,
            "text table: duplicate part name '" + n + "'");
  for (std::size_t i = 0; i < t.embeddings.rows; ++i) {
    double s = 0;
    for (double v : t.embeddings.row(i)) s += v * v;
    Require(std::abs(std::sqrt(s) - 1.0) <= 1e-6, ErrorCode::kInvalidArgument,
            "text table: row '" + t.names[i] + "' is not unit norm");
  }
}

// Mean of the per-template embeddings for one part, re-normalised.
inline std::vector<double> CombineTemplateEmbeddings(const Matrix& per_template) {
  Require(per_template.rows >= 1, ErrorCode::kInvalidArgument, "no template embeddings");
  std::vector<double> mean(per_template.cols, 0.0);
  for (std::size_t r = 0; r < per_template.rows; ++r)
    for (std::size_t c = 0; c < per_template.cols; ++c) mean[c] += per_template(r, c);
  double s = 0;
  for (double& v : mean) {
    v /= static_cast<double>(per_template.rows);
    s += v * v;
  }
  Require(s > 0, ErrorCode::kInvalidArgument, "template embeddings average to zero");
  const double inv = 1.0 / std::sqrt(s);
  for (double& v : mean) v *= inv;
  return mean;
}

}  // namespace pa3d

#endif  // PA3D_TEXT_TABLE_HPP_
