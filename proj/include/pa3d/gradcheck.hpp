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

#ifndef PA3D_GRADCHECK_HPP_
#define PA3D_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pa3d/error.hpp"
#include "pa3d/rng.hpp"
#include "pa3d/tensor.hpp"

namespace pa3d {

struct GradCheckOptions {
  double step = 1e-5;
  // 0 probes every coordinate; otherwise a seeded subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of `f` against central differences.
// Relative error per coordinate is |a - n| / max(1, |a|, |n|).
inline GradCheckResult CheckGradients(const ScalarFn& f, const std::vector<Tensor>& params,
                                      const GradCheckOptions& options = {}) {
  Require(options.step > 0, ErrorCode::kInvalidArgument, "gradcheck: step must be positive");
  for (const auto& p : params) {
    Require(p.is_leaf() && p.requires_grad(), ErrorCode::kInvalidArgument,
            "gradcheck: parameters must be requires_grad leaves");
  }

  GradientMap analytic;
  {
    Graph graph;
    GraphScope scope(graph);
    const Tensor loss = f(params);
    Require(std::isfinite(loss.item()), ErrorCode::kNonFinite,
            "gradcheck: non-finite loss at base point");
    analytic = graph.Backward(loss);
  }

  auto evaluate = [&]() {
    Graph graph;
    GraphScope scope(graph);
    const double v = f(params).item();
    Require(std::isfinite(v), ErrorCode::kNonFinite, "gradcheck: non-finite loss at probe point");
    return v;
  };

  Rng rng(options.seed);
  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t];
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (options.max_coords_per_tensor > 0 && n > options.max_coords_per_tensor) {
      rng.Shuffle(coords);
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto it = analytic.find(p.id());
    for (std::size_t i : coords) {
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double original = p.mutable_data()[i];
      p.mutable_data()[i] = original + options.step;
      const double up = evaluate();
      p.mutable_data()[i] = original - options.step;
      const double down = evaluate();
      p.mutable_data()[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++result.coordinates_checked;
      if (result.coordinates_checked == 1 || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace pa3d

#endif  // PA3D_GRADCHECK_HPP_
