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

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "atpt/tensor.hpp"

namespace atpt {

class Graph;

/// Misuse of a recording: double backward, foreign output, non-scalar output.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Handle to a value recorded on a Graph.
class Var {
 public:
  Var() = default;

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward rule sees. `input_grads[k]` is null when input k needs no gradient.
struct BackwardContext {
  const Tensor& grad;
  const Tensor& value;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Gradients keyed by Var id.
using Gradients = std::map<std::size_t, Tensor>;

/// Linear tape of primitive applications. Node order is evaluation order, so
/// it is a topological order by construction. One backward per recording.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiation target.
  Var leaf(Tensor value);
  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Report the adjoint of an intermediate node in backward()'s result.
  /// Must be called before the node's consumers are recorded.
  void watch(Var v);

  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs,
             BackwardFn backward);

  /// Reverse sweep from a scalar output. Returns one entry per leaf and per
  /// watched node; unreachable ones receive zeros of their own shape.
  Gradients backward(Var output);

  bool requires_grad(Var v) const;
  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    bool reported = false;
  };

  void check_owned(Var v, std::string_view op) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Gradient entry for `v`, or throws if `v` was neither a leaf nor watched.
const Tensor& grad_of(const Gradients& grads, Var v);

// ---- primitive set --------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);
Var transpose(Var a);
/// Softmax over the last axis.
Var softmax_rows(Var a);
/// Normalization over the last axis followed by per-column gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Exact (erf) GELU.
Var gelu(Var a);
Var mean_axis(Var a, std::size_t axis);
Var sum_axis(Var a, std::size_t axis);
/// [x]_+ with subgradient 0 at the kink.
Var clamp_min0(Var a);
Var log(Var a);
Var exp(Var a);
/// Pairwise cosine similarity between the rows of a (n x D) and b (m x D).
Var cosine_similarity(Var a, Var b);

// ---- structural helpers ---------------------------------------------------

/// x (m x n) plus bias (n) added to every row.
Var add_row_bias(Var x, Var bias);
Var sum_all(Var a);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Stack k equal-shaped rank-2 tensors into a k x m x n tensor.
Var stack(std::span<const Var> parts);
/// Slice i of a rank-3 tensor.
Var select(Var a, std::size_t index);
/// Square image (H x W) to non-overlapping patches ((H/p)(W/p) x p*p).
Var patchify(Var image, std::size_t patch);

// ---- dense kernels shared with non-graph code -----------------------------

/// C = op(A) * op(B) for rank-2 tensors.
Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// ---- finite differences ---------------------------------------------------

using ScalarFn = std::function<double(const Tensor&)>;

/// Central difference (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate.
Tensor finite_difference_grad(const ScalarFn& f, const Tensor& x, double step);

/// Elementwise relative error with denominator max(|a|, |b|, floor).
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

}  // namespace atpt
