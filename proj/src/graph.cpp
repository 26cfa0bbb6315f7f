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

#include "atpt/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

namespace atpt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                  static_cast<Eigen::Index>(t.dim(1)));
}
MutMap as_mat(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                static_cast<Eigen::Index>(t.dim(1)));
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
  }
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

// Accumulate `scale * g` into `dst` when dst is requested.
void accumulate(Tensor* dst, const Tensor& g, double factor = 1.0) {
  if (!dst) return;
  auto d = dst->data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

// C += op(A) op(B)
void gemm_acc(Tensor& c, const Tensor& a, const Tensor& b, bool ta, bool tb) {
  auto cm = as_mat(c);
  const auto am = as_mat(a);
  const auto bm = as_mat(b);
  if (!ta && !tb) cm.noalias() += am * bm;
  else if (ta && !tb) cm.noalias() += am.transpose() * bm;
  else if (!ta && tb) cm.noalias() += am * bm.transpose();
  else cm.noalias() += am.transpose() * bm.transpose();
}

// Rows of the last axis: (count, width).
std::pair<std::size_t, std::size_t> rows_of(const Tensor& t) {
  const std::size_t width = t.shape().back();
  return {t.size() / width, width};
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

const Tensor& Var::value() const {
  if (!graph_) throw GraphError("unbound Var");
  return graph_->value(id_);
}

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, true});
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, false});
  return Var(this, nodes_.size() - 1);
}

void Graph::watch(Var v) {
  check_owned(v, "watch");
  nodes_[v.id()].reported = true;
  nodes_[v.id()].needs_grad = true;
}

void Graph::check_owned(Var v, std::string_view op) const {
  if (v.graph() != this) {
    throw GraphError(std::string(op) + ": Var belongs to a different graph");
  }
}

Var Graph::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                  BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Graph::record(std::string_view op, Tensor value, std::span<const Var> inputs,
                  BackwardFn backward) {
  if (consumed_) throw GraphError(std::string(op) + ": graph already consumed by backward");
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owned(in, op);
    node.inputs.push_back(in.id());
    node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

bool Graph::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id()].needs_grad;
}

Gradients Graph::backward(Var output) {
  if (output.graph() != this) throw GraphError("backward: output not on this graph");
  if (consumed_) throw GraphError("backward: graph already consumed; record again");
  if (nodes_[output.id()].value.size() != 1) {
    throw GraphError("backward: output must be scalar, got " +
                     shape_str(nodes_[output.id()].value.shape()));
  }
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[output.id()] = Tensor(nodes_[output.id()].value.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || grads[id].empty()) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].needs_grad) {
        if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{grads[id], node.value, in_values, in_grads});
  }

  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].reported) continue;
    out.emplace(id, grads[id].empty() ? Tensor(nodes_[id].value.shape(), 0.0)
                                      : std::move(grads[id]));
  }
  return out;
}

const Tensor& grad_of(const Gradients& grads, Var v) {
  auto it = grads.find(v.id());
  if (it == grads.end()) throw GraphError("grad_of: Var is neither a leaf nor watched");
  return it->second;
}

// ---- kernels ---------------------------------------------------------------

Tensor gemm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) throw ShapeError("matmul", a.shape(), b.shape());
  Tensor c({m, n});
  gemm_acc(c, a, b, trans_a, trans_b);
  return c;
}

// ---- primitives ------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tensor out = gemm(a.value(), b.value());
  return a.graph()->record("matmul", std::move(out), {a, b}, [](const BackwardContext& c) {
    if (c.input_grads[0]) gemm_acc(*c.input_grads[0], c.grad, *c.inputs[1], false, true);
    if (c.input_grads[1]) gemm_acc(*c.input_grads[1], *c.inputs[0], c.grad, true, false);
  });
}

Var add(Var a, Var b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  accumulate(&out, b.value());
  return a.graph()->record("add", std::move(out), {a, b}, [](const BackwardContext& c) {
    accumulate(c.input_grads[0], c.grad);
    accumulate(c.input_grads[1], c.grad);
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  accumulate(&out, b.value(), -1.0);
  return a.graph()->record("sub", std::move(out), {a, b}, [](const BackwardContext& c) {
    accumulate(c.input_grads[0], c.grad);
    accumulate(c.input_grads[1], c.grad, -1.0);
  });
}

Var hadamard(Var a, Var b) {
  require_same("hadamard", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph()->record("hadamard", std::move(out), {a, b}, [](const BackwardContext& c) {
    const Tensor& x = *c.inputs[0];
    const Tensor& y = *c.inputs[1];
    if (auto* gx = c.input_grads[0]) {
      for (std::size_t i = 0; i < x.size(); ++i) (*gx)[i] += c.grad[i] * y[i];
    }
    if (auto* gy = c.input_grads[1]) {
      for (std::size_t i = 0; i < y.size(); ++i) (*gy)[i] += c.grad[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.graph()->record("scale", std::move(out), {a}, [factor](const BackwardContext& c) {
    accumulate(c.input_grads[0], c.grad, factor);
  });
}

Var transpose(Var a) {
  require_rank("transpose", a.value(), 2);
  const Tensor& x = a.value();
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = x.at(i, j);
  return a.graph()->record("transpose", std::move(out), {a}, [m, n](const BackwardContext& c) {
    if (auto* g = c.input_grads[0]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g->at(i, j) += c.grad.at(j, i);
    }
  });
}

Var softmax_rows(Var a) {
  Tensor out = a.value();
  const auto [rows, width] = rows_of(out);
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = out.data().data() + r * width;
    const double mx = *std::max_element(p, p + width);
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < width; ++j) p[j] /= z;
  }
  return a.graph()->record("softmax_rows", std::move(out), {a}, [](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    const auto [rows, width] = rows_of(c.value);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = c.value.data().data() + r * width;
      const double* gy = c.grad.data().data() + r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
      double* gx = g->data().data() + r * width;
      for (std::size_t j = 0; j < width; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const auto [rows, width] = rows_of(xv);
  if (gain.value().size() != width) throw ShapeError("layer_norm", xv.shape(), gain.value().shape());
  if (bias.value().size() != width) throw ShapeError("layer_norm", xv.shape(), bias.value().shape());
  // Normalized values and inverse std are needed by the backward rule.
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += in[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (in[j] - mean) * is;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return x.graph()->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [xhat, inv_std, rows, width](const BackwardContext& c) {
        const Tensor& g = *c.inputs[1];
        auto* gx = c.input_grads[0];
        auto* gg = c.input_grads[1];
        auto* gb = c.input_grads[2];
        const double n = static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = c.grad.data().data() + r * width;
          const double* h = xhat->data().data() + r * width;
          if (gg)
            for (std::size_t j = 0; j < width; ++j) (*gg)[j] += dy[j] * h[j];
          if (gb)
            for (std::size_t j = 0; j < width; ++j) (*gb)[j] += dy[j];
          if (!gx) continue;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double dh = dy[j] * g[j];
            s1 += dh;
            s2 += dh * h[j];
          }
          const double is = (*inv_std)[r];
          double* out = gx->data().data() + r * width;
          for (std::size_t j = 0; j < width; ++j) {
            const double dh = dy[j] * g[j];
            out[j] += is * (dh - s1 / n - h[j] * s2 / n);
          }
        }
      });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v * normal_cdf(v);
  return a.graph()->record("gelu", std::move(out), {a}, [](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*g)[i] += c.grad[i] * (normal_cdf(x[i]) + x[i] * normal_pdf(x[i]));
    }
  });
}

namespace {

// Reduce over one axis: (outer, extent, inner) decomposition of the shape.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(std::string_view op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) s.reduced.push_back(shape[i]);
  if (s.reduced.empty()) s.reduced.push_back(1);
  return s;
}

Var reduce_axis(std::string_view op, Var a, std::size_t axis, bool mean) {
  const AxisSplit s = split_axis(op, a.shape(), axis);
  const double f = mean ? 1.0 / static_cast<double>(s.extent) : 1.0;
  Tensor out(s.reduced);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
  if (f != 1.0)
    for (double& v : out.data()) v *= f;
  return a.graph()->record(op, std::move(out), {a}, [s, f](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i)
          (*g)[(o * s.extent + e) * s.inner + i] += f * c.grad[o * s.inner + i];
  });
}

}  // namespace

Var mean_axis(Var a, std::size_t axis) { return reduce_axis("mean_axis", a, axis, true); }
Var sum_axis(Var a, std::size_t axis) { return reduce_axis("sum_axis", a, axis, false); }

Var clamp_min0(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph()->record("clamp_min0", std::move(out), {a}, [](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) (*g)[i] += c.grad[i];
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    if (v <= 0.0) throw Error("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return a.graph()->record("log", std::move(out), {a}, [](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    const Tensor& x = *c.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += c.grad[i] / x[i];
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  return a.graph()->record("exp", std::move(out), {a}, [](const BackwardContext& c) {
    auto* g = c.input_grads[0];
    if (!g) return;
    for (std::size_t i = 0; i < c.value.size(); ++i) (*g)[i] += c.grad[i] * c.value[i];
  });
}

Var cosine_similarity(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_rank("cosine_similarity", x, 2);
  require_rank("cosine_similarity", y, 2);
  if (x.dim(1) != y.dim(1)) throw ShapeError("cosine_similarity", x.shape(), y.shape());
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
  auto norms = [d](const Tensor& t) {
    std::vector<double> out(t.dim(0));
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += t.at(r, k) * t.at(r, k);
      out[r] = std::sqrt(s);
      if (out[r] == 0.0) throw Error("cosine_similarity: zero-norm row, cosine undefined");
    }
    return out;
  };
  auto na = std::make_shared<std::vector<double>>(norms(x));
  auto nb = std::make_shared<std::vector<double>>(norms(y));
  Tensor out = gemm(x, y, false, true);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) /= (*na)[i] * (*nb)[j];
  return a.graph()->record(
      "cosine_similarity", std::move(out), {a, b}, [na, nb, n, m, d](const BackwardContext& c) {
        const Tensor& x = *c.inputs[0];
        const Tensor& y = *c.inputs[1];
        // d cos_ij / d x_i = y_j / (|x_i||y_j|) - cos_ij x_i / |x_i|^2
        if (auto* gx = c.input_grads[0]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double g = c.grad.at(i, j);
              const double s = g / ((*na)[i] * (*nb)[j]);
              const double t = g * c.value.at(i, j) / ((*na)[i] * (*na)[i]);
              for (std::size_t k = 0; k < d; ++k) gx->at(i, k) += s * y.at(j, k) - t * x.at(i, k);
            }
        }
        if (auto* gy = c.input_grads[1]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double g = c.grad.at(i, j);
              const double s = g / ((*na)[i] * (*nb)[j]);
              const double t = g * c.value.at(i, j) / ((*nb)[j] * (*nb)[j]);
              for (std::size_t k = 0; k < d; ++k) gy->at(j, k) += s * x.at(i, k) - t * y.at(j, k);
            }
        }
      });
}

// ---- structural ------------------------------------------------------------

Var add_row_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const auto [rows, width] = rows_of(xv);
  if (bias.value().size() != width) throw ShapeError("add_row_bias", xv.shape(), bias.value().shape());
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] += bias.value()[j];
  return x.graph()->record("add_row_bias", std::move(out), {x, bias},
                           [rows, width](const BackwardContext& c) {
                             accumulate(c.input_grads[0], c.grad);
                             if (auto* gb = c.input_grads[1]) {
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < width; ++j)
                                   (*gb)[j] += c.grad[r * width + j];
                             }
                           });
}

Var sum_all(Var a) {
  const double s = sum(a.value());
  return a.graph()->record("sum_all", Tensor::scalar(s), {a}, [](const BackwardContext& c) {
    if (auto* g = c.input_grads[0])
      for (double& v : g->data()) v += c.grad[0];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph()->record("reshape", std::move(out), {a}, [](const BackwardContext& c) {
    accumulate(c.input_grads[0], c.grad);
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  require_rank("slice_rows", x, 2);
  if (count == 0 || begin + count > x.dim(0)) {
    throw ShapeError("slice_rows", "rows [" + std::to_string(begin) + "," +
                                       std::to_string(begin + count) + ") of " + shape_str(x.shape()));
  }
  const std::size_t w = x.dim(1);
  Tensor out({count, w}, std::vector<double>(x.data().begin() + begin * w,
                                             x.data().begin() + (begin + count) * w));
  return a.graph()->record("slice_rows", std::move(out), {a},
                           [begin, w](const BackwardContext& c) {
                             if (auto* g = c.input_grads[0])
                               for (std::size_t i = 0; i < c.grad.size(); ++i)
                                 (*g)[begin * w + i] += c.grad[i];
                           });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  require_rank("slice_cols", x, 2);
  if (count == 0 || begin + count > x.dim(1)) {
    throw ShapeError("slice_cols", "cols [" + std::to_string(begin) + "," +
                                       std::to_string(begin + count) + ") of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), w = x.dim(1);
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < count; ++j) out.at(r, j) = x.at(r, begin + j);
  return a.graph()->record("slice_cols", std::move(out), {a},
                           [begin, rows, w, count](const BackwardContext& c) {
                             if (auto* g = c.input_grads[0])
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < count; ++j)
                                   (*g)[r * w + begin + j] += c.grad.at(r, j);
                           });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no operands");
  const std::size_t w = parts[0].shape().at(1);
  std::vector<double> data;
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_rank("concat_rows", p.value(), 2);
    if (p.shape()[1] != w) throw ShapeError("concat_rows", parts[0].shape(), p.shape());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    rows += p.shape()[0];
  }
  return parts[0].graph()->record("concat_rows", Tensor({rows, w}, std::move(data)), parts,
                                  [](const BackwardContext& c) {
                                    std::size_t offset = 0;
                                    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
                                      const std::size_t n = c.inputs[k]->size();
                                      if (auto* g = c.input_grads[k])
                                        for (std::size_t i = 0; i < n; ++i)
                                          (*g)[i] += c.grad[offset + i];
                                      offset += n;
                                    }
                                  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no operands");
  const std::size_t rows = parts[0].shape().at(0);
  std::size_t width = 0;
  for (const Var& p : parts) {
    require_rank("concat_cols", p.value(), 2);
    if (p.shape()[0] != rows) throw ShapeError("concat_cols", parts[0].shape(), p.shape());
    width += p.shape()[1];
  }
  Tensor out({rows, width});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) out.at(r, offset + j) = p.value().at(r, j);
    offset += w;
  }
  return parts[0].graph()->record("concat_cols", std::move(out), parts,
                                  [rows, width](const BackwardContext& c) {
                                    std::size_t offset = 0;
                                    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
                                      const std::size_t w = c.inputs[k]->dim(1);
                                      if (auto* g = c.input_grads[k])
                                        for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < w; ++j)
                                            g->at(r, j) += c.grad[r * width + offset + j];
                                      offset += w;
                                    }
                                  });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack", "no operands");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 2) throw ShapeError("stack", "operands must be rank 2, got " + shape_str(s0));
  std::vector<double> data;
  data.reserve(parts.size() * parts[0].value().size());
  for (const Var& p : parts) {
    if (p.shape() != s0) throw ShapeError("stack", s0, p.shape());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts[0].graph()->record("stack", Tensor({parts.size(), s0[0], s0[1]}, std::move(data)),
                                  parts, [](const BackwardContext& c) {
                                    const std::size_t n = c.inputs[0]->size();
                                    for (std::size_t k = 0; k < c.inputs.size(); ++k)
                                      if (auto* g = c.input_grads[k])
                                        for (std::size_t i = 0; i < n; ++i)
                                          (*g)[i] += c.grad[k * n + i];
                                  });
}

Var select(Var a, std::size_t index) {
  const Tensor& x = a.value();
  require_rank("select", x, 3);
  if (index >= x.dim(0)) {
    throw ShapeError("select", "index " + std::to_string(index) + " out of " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1) * x.dim(2);
  Tensor out({x.dim(1), x.dim(2)},
             std::vector<double>(x.data().begin() + index * n, x.data().begin() + (index + 1) * n));
  return a.graph()->record("select", std::move(out), {a}, [index, n](const BackwardContext& c) {
    if (auto* g = c.input_grads[0])
      for (std::size_t i = 0; i < n; ++i) (*g)[index * n + i] += c.grad[i];
  });
}

Var patchify(Var image, std::size_t patch) {
  const Tensor& x = image.value();
  require_rank("patchify", x, 2);
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (patch == 0 || h % patch || w % patch) {
    throw ShapeError("patchify", "patch " + std::to_string(patch) + " does not tile " +
                                     shape_str(x.shape()));
  }
  const std::size_t gh = h / patch, gw = w / patch, pp = patch * patch;
  // index[k] = source pixel of output element k
  auto index = std::make_shared<std::vector<std::size_t>>(gh * gw * pp);
  Tensor out({gh * gw, pp});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx) {
          const std::size_t k = (py * gw + px) * pp + dy * patch + dx;
          const std::size_t src = (py * patch + dy) * w + px * patch + dx;
          (*index)[k] = src;
          out[k] = x[src];
        }
  return image.graph()->record("patchify", std::move(out), {image}, [index](const BackwardContext& c) {
    if (auto* g = c.input_grads[0])
      for (std::size_t k = 0; k < index->size(); ++k) (*g)[(*index)[k]] += c.grad[k];
  });
}

// ---- finite differences ----------------------------------------------------

Tensor finite_difference_grad(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw Error("finite_difference_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + step;
    const double up = f(probe);
    probe[k] = x[k] - step;
    const double down = f(probe);
    probe[k] = x[k];
    grad[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error", a.shape(), b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace atpt
