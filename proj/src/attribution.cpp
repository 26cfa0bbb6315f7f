// Copyright 2026 The atpt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "atpt/attribution.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "atpt/graph.hpp"
#include "atpt/log.hpp"

namespace atpt {

namespace {

void check_stack(const Tensor& a, const char* op) {
  if (a.rank() != 3 || a.dim(1) != a.dim(2))
    throw ShapeError(op, "expected h x s x s, got " + shape_str(a.shape()));
}

// I + clamp(mean over heads), rows normalized on request.
Tensor finish_transition(const Tensor& weighted, const RolloutOptions& options) {
  const std::size_t heads = weighted.dim(0), s = weighted.dim(1);
  Tensor out = Tensor::identity(s);
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < heads; ++k) acc += weighted.at(k, r, c);
      const double mean = acc / static_cast<double>(heads);
      if (mean > 0.0) out.at(r, c) += mean;
    }
  }
  if (options.normalize_rows) {
    for (std::size_t r = 0; r < s; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < s; ++c) total += out.at(r, c);
      for (std::size_t c = 0; c < s; ++c) out.at(r, c) /= total;
    }
  }
  return out;
}

void require_gradients(const EncoderCapture& capture, const char* op) {
  if (!capture.has_gradients()) throw Error(std::string(op) + ": capture has no gradients");
}

}  // namespace

const char* to_string(MapVariant v) { return v == MapVariant::Gar ? "gar" : "refined"; }

Tensor gar_transition(const Tensor& attention, const Tensor& grad_attention,
                      const RolloutOptions& options) {
  check_stack(attention, "gar_transition");
  if (attention.shape() != grad_attention.shape())
    throw ShapeError("gar_transition", attention.shape(), grad_attention.shape());
  Tensor weighted(attention.shape());
  for (std::size_t i = 0; i < weighted.size(); ++i) weighted[i] = grad_attention[i] * attention[i];
  return finish_transition(weighted, options);
}

Tensor token_weights(const Tensor& tokens, const Tensor& grad_tokens, bool* degenerate) {
  if (tokens.rank() != 2) throw ShapeError("token_weights", "expected s x d, got " + shape_str(tokens.shape()));
  if (tokens.shape() != grad_tokens.shape())
    throw ShapeError("token_weights", tokens.shape(), grad_tokens.shape());
  const std::size_t s = tokens.dim(0), d = tokens.dim(1);
  Tensor w({s});
  double total = 0.0;
  for (std::size_t v = 0; v < s; ++v) {
    double q = 0.0;
    for (std::size_t j = 0; j < d; ++j) q += tokens.at(v, j) * grad_tokens.at(v, j);
    w[v] = q > 0.0 ? q : 0.0;
    total += w[v];
  }
  const bool fallback = !(total > 0.0);
  if (degenerate) *degenerate = fallback;
  if (fallback) {
    logger().warn("token_weights: no positive token score, using uniform weights");
    for (double& x : w.data()) x = 1.0 / static_cast<double>(s);
    return w;
  }
  for (double& x : w.data()) x /= total;
  return w;
}

Tensor refined_transition(const Tensor& attention, const Tensor& weights,
                          const RolloutOptions& options) {
  check_stack(attention, "refined_transition");
  const std::size_t s = attention.dim(1);
  if (weights.size() != s) throw ShapeError("refined_transition", attention.shape(), weights.shape());
  Tensor weighted(attention.shape());
  for (std::size_t i = 0; i < weighted.size(); ++i) {
    weighted[i] = attention[i] * weights[i % s];
    if (weighted[i] < 0.0) throw Error("refined_transition: negative attention or weight");
  }
  return finish_transition(weighted, options);
}

Tensor cls_grid(const Tensor& rollout) {
  const std::size_t s = rollout.dim(0);
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(s - 1))));
  if (g * g != s - 1) throw ShapeError("cls_grid", "s - 1 is not a perfect square: " + shape_str(rollout.shape()));
  Tensor grid({g, g});
  for (std::size_t k = 0; k < g * g; ++k) grid[k] = rollout.at(0, k + 1);
  return grid;
}

Tensor gar_product(const EncoderCapture& capture, const RolloutOptions& options) {
  require_gradients(capture, "gar_rollout");
  Tensor product;
  for (std::size_t b = 0; b < capture.blocks(); ++b) {
    Tensor t = gar_transition(capture.attention[b], capture.grad_attention[b], options);
    product = b == 0 ? std::move(t) : gemm(product, t);
  }
  return product;
}

Tensor refined_product(const EncoderCapture& capture, const RolloutOptions& options) {
  require_gradients(capture, "refined_rollout");
  const std::size_t blocks = capture.blocks();
  if (blocks < 2) throw Error("refined_rollout: needs at least two blocks");
  const Tensor prev = refined_transition(
      capture.attention[blocks - 2],
      token_weights(capture.tokens[blocks - 2], capture.grad_tokens[blocks - 2]), options);
  const Tensor last = refined_transition(
      capture.attention[blocks - 1],
      token_weights(capture.tokens[blocks - 1], capture.grad_tokens[blocks - 1]), options);
  Tensor avg(last.shape());
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (prev[i] + last[i]) / 2.0;
  return gemm(last, avg);
}

AttentionMap gar_rollout(const EncoderCapture& capture, const RolloutOptions& options) {
  return {cls_grid(gar_product(capture, options)), 0, MapVariant::Gar};
}

AttentionMap refined_rollout(const EncoderCapture& capture, const RolloutOptions& options) {
  return {cls_grid(refined_product(capture, options)), 0, MapVariant::Refined};
}

AttentionMap rollout(const EncoderCapture& capture, MapVariant variant, const RolloutOptions& options) {
  return variant == MapVariant::Gar ? gar_rollout(capture, options) : refined_rollout(capture, options);
}

Tensor l1_normalized(const Tensor& map) {
  double total = 0.0;
  for (double v : map.data()) total += std::abs(v);
  Tensor out(map.shape());
  if (!(total > 0.0)) {
    logger().warn("l1_normalized: map has zero mass, treating as uniform");
    for (double& v : out.data()) v = 1.0 / static_cast<double>(map.size());
    return out;
  }
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] / total;
  return out;
}

double attention_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("attention_distance", a.shape(), b.shape());
  const Tensor na = l1_normalized(a), nb = l1_normalized(b);
  double d = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) d += std::abs(na[i] - nb[i]);
  return d;
}

void write_map_csv(const std::string& path, const Tensor& grid) {
  std::ofstream out(path);
  if (!out) throw Error("write_map_csv: cannot open " + path);
  out << std::setprecision(17);
  for (std::size_t r = 0; r < grid.dim(0); ++r) {
    for (std::size_t c = 0; c < grid.dim(1); ++c) out << (c ? "," : "") << grid.at(r, c);
    out << '\n';
  }
}

}  // namespace atpt
