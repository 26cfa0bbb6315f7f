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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "atpt/graph.hpp"
#include "atpt/model.hpp"
#include "atpt/rng.hpp"
#include "oracles.hpp"

using namespace atpt;
using oracle::fd_extrapolated;
using oracle::random_tensor;

namespace {

// A unary primitive under test, applied to one leaf.
using Unary = std::function<Var(Graph&, Var)>;

// Backward of sum(op(x) * R) versus the oracle on random shapes.
void check_unary(const std::string& name, const Unary& op,
                 const std::function<Shape(Rng&)>& make_shape, double lo, double hi,
                 int instances = 100) {
  Rng rng(std::hash<std::string>{}(name));
  for (int it = 0; it < instances; ++it) {
    const Tensor x = random_tensor(rng, make_shape(rng), lo, hi);
    Tensor weights;
    auto loss = [&](Graph& g, Var xv) {
      Var y = op(g, xv);
      if (weights.empty()) {
        Rng wr(static_cast<std::uint64_t>(it) + 77);
        weights = random_tensor(wr, y.shape());
      }
      return sum_all(hadamard(y, g.constant(weights)));
    };
    Graph g;
    Var xv = g.leaf(x);
    const Gradients grads = g.backward(loss(g, xv));
    const Tensor analytic = grad_of(grads, xv);
    const Tensor numeric = fd_extrapolated(
        [&](const Tensor& p) {
          Graph h;
          return loss(h, h.constant(p)).value().item();
        },
        x, 1e-3);
    ASSERT_LT(max_relative_error(analytic, numeric), 1e-6) << name << " instance " << it;
  }
}

Shape matrix_shape(Rng& rng) {
  return {static_cast<std::size_t>(rng.uniform_int(1, 5)),
          static_cast<std::size_t>(rng.uniform_int(1, 6))};
}

}  // namespace

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Primitives, ClampMin0) {
  Graph g;
  Var y = clamp_min0(g.constant(Tensor::from({-1.0, 0.0, 2.0})));
  EXPECT_EQ(y.value(), Tensor::from({0.0, 0.0, 2.0}));
}

TEST(Primitives, SoftmaxConstantRowIsUniform) {
  Graph g;
  Var y = softmax_rows(g.constant(Tensor::matrix(1, 4, {3.0, 3.0, 3.0, 3.0})));
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Primitives, CosineOfVectorWithItself) {
  Rng rng(5);
  Graph g;
  Var v = g.constant(random_tensor(rng, {1, 7}));
  EXPECT_NEAR(cosine_similarity(v, v).value().item(), 1.0, 1e-15);
}

TEST(Primitives, ShapeMismatchNamesOperationAndShapes) {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({4, 5}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(hadamard(a, b), ShapeError);
}

TEST(Primitives, CosineZeroNormIsAnError) {
  Graph g;
  EXPECT_THROW(cosine_similarity(g.constant(Tensor({1, 3})), g.constant(Tensor::ones({1, 3}))),
               Error);
}

TEST(Backward, SquareHasDerivativeSix) {
  Graph g;
  Var x = g.leaf(Tensor::scalar(3.0));
  const Gradients grads = g.backward(hadamard(x, x));
  EXPECT_DOUBLE_EQ(grad_of(grads, x).item(), 6.0);
}

TEST(Backward, ErrorsOnMisuse) {
  Graph g;
  Var x = g.leaf(Tensor::from({1.0, 2.0}));
  EXPECT_THROW(g.backward(x), GraphError);  // non-scalar
  Graph other;
  Var y = other.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(g.backward(y), GraphError);  // foreign output
  Var s = sum_all(x);
  g.backward(s);
  EXPECT_THROW(g.backward(s), GraphError);  // already consumed
  EXPECT_THROW(scale(x, 2.0), GraphError);  // recording after backward
}

TEST(Backward, UnreachableLeafGetsZeros) {
  Graph g;
  Var x = g.leaf(Tensor::from({1.0, 2.0}));
  Var unused = g.leaf(Tensor({2, 3}, 4.0));
  const Gradients grads = g.backward(sum_all(x));
  EXPECT_EQ(grad_of(grads, unused), Tensor({2, 3}, 0.0));
}

TEST(Backward, ZeroOutputFunctionHasZeroGradients) {
  Rng rng(11);
  Graph g;
  Var x = g.leaf(random_tensor(rng, {3, 4}));
  const Gradients grads = g.backward(sum_all(scale(x, 0.0)));
  for (double v : grad_of(grads, x).data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, IsLinearInTheOutput) {
  Rng rng(12);
  const Tensor x = random_tensor(rng, {3, 4});
  auto f = [](Var v) { return sum_all(exp(softmax_rows(v))); };
  auto g_fn = [](Var v) { return sum_all(hadamard(v, v)); };
  auto grad = [&](const std::function<Var(Var)>& fn) {
    Graph g;
    Var v = g.leaf(x);
    const Gradients gr = g.backward(fn(v));
    return grad_of(gr, v);
  };
  const double alpha = 0.7, beta = -2.3;
  const Tensor combined = grad([&](Var v) { return add(scale(f(v), alpha), scale(g_fn(v), beta)); });
  const Tensor gf = grad(f), gg = grad(g_fn);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(combined[i], alpha * gf[i] + beta * gg[i], 1e-12);
  }
}

TEST(FiniteDifference, LinearFunctionGivesOnes) {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {2, 5});
  const Tensor grad = finite_difference_grad([](const Tensor& t) { return sum(t); }, x, 1e-4);
  for (double v : grad.data()) EXPECT_NEAR(v, 1.0, 1e-10);
}

TEST(FiniteDifference, SquareAtThree) {
  const Tensor grad = finite_difference_grad(
      [](const Tensor& t) { return t[0] * t[0]; }, Tensor::scalar(3.0), 1e-5);
  EXPECT_NEAR(grad[0], 6.0, 1e-9);
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_difference_grad([](const Tensor&) { return 0.0; }, Tensor::scalar(1.0), 0.0),
               Error);
}

TEST(Backward, SoftmaxCrossEntropyMatchesCentralDifferences) {
  Rng rng(21);
  for (int it = 0; it < 20; ++it) {
    const Tensor logits = random_tensor(rng, {1, 6}, -2.0, 2.0);
    const std::size_t label = static_cast<std::size_t>(rng.uniform_int(0, 5));
    Tensor onehot({1, 6});
    onehot[label] = 1.0;
    auto ce = [&](Graph& g, Var v) {
      return scale(sum_all(hadamard(log(softmax_rows(v)), g.constant(onehot))), -1.0);
    };
    Graph g;
    Var v = g.leaf(logits);
    const Tensor analytic = grad_of(g.backward(ce(g, v)), v);
    const Tensor numeric = finite_difference_grad(
        [&](const Tensor& p) {
          Graph h;
          return ce(h, h.constant(p)).value().item();
        },
        logits, 1e-5);
    EXPECT_LT(max_relative_error(analytic, numeric), 1e-6);
  }
}

// ---- every primitive against the oracle on 100 random shapes ---------------

TEST(PrimitiveGradients, Elementwise) {
  check_unary("scale", [](Graph&, Var x) { return scale(x, -1.7); }, matrix_shape, -1, 1);
  check_unary("exp", [](Graph&, Var x) { return exp(x); }, matrix_shape, -1, 1);
  check_unary("log", [](Graph&, Var x) { return log(x); }, matrix_shape, 0.5, 2.0);
  check_unary("gelu", [](Graph&, Var x) { return gelu(x); }, matrix_shape, -2, 2);
  // Inputs kept at least 0.05 away from the kink.
  check_unary(
      "clamp_min0",
      [](Graph&, Var x) { return clamp_min0(x); }, matrix_shape, 0.05, 1.0);
  check_unary(
      "clamp_min0_negative", [](Graph&, Var x) { return clamp_min0(scale(x, -1.0)); },
      matrix_shape, 0.05, 1.0);
  check_unary("transpose", [](Graph&, Var x) { return transpose(x); }, matrix_shape, -1, 1);
  check_unary("softmax_rows", [](Graph&, Var x) { return softmax_rows(x); }, matrix_shape, -2, 2);
}

TEST(PrimitiveGradients, Binary) {
  check_unary(
      "matmul_left",
      [](Graph& g, Var x) {
        Rng r(x.shape()[1] * 13 + x.shape()[0]);
        return matmul(x, g.constant(random_tensor(r, {x.shape()[1], 3})));
      },
      matrix_shape, -1, 1);
  check_unary(
      "matmul_right",
      [](Graph& g, Var x) {
        Rng r(x.shape()[0] * 17);
        return matmul(g.constant(random_tensor(r, {2, x.shape()[0]})), x);
      },
      matrix_shape, -1, 1);
  check_unary("matmul_self", [](Graph&, Var x) { return matmul(x, transpose(x)); }, matrix_shape,
              -1, 1);
  check_unary("add", [](Graph&, Var x) { return add(x, hadamard(x, x)); }, matrix_shape, -1, 1);
  check_unary("sub", [](Graph&, Var x) { return sub(exp(x), x); }, matrix_shape, -1, 1);
  check_unary("hadamard", [](Graph&, Var x) { return hadamard(x, exp(x)); }, matrix_shape, -1, 1);
}

TEST(PrimitiveGradients, Reductions) {
  check_unary("mean_axis0", [](Graph&, Var x) { return mean_axis(x, 0); }, matrix_shape, -1, 1);
  check_unary("mean_axis1", [](Graph&, Var x) { return mean_axis(x, 1); }, matrix_shape, -1, 1);
  check_unary("sum_axis0", [](Graph&, Var x) { return sum_axis(x, 0); }, matrix_shape, -1, 1);
  check_unary("sum_axis1", [](Graph&, Var x) { return sum_axis(x, 1); }, matrix_shape, -1, 1);
}

TEST(PrimitiveGradients, LayerNormAndCosine) {
  auto wide = [](Rng& rng) {
    return Shape{static_cast<std::size_t>(rng.uniform_int(1, 4)),
                 static_cast<std::size_t>(rng.uniform_int(2, 6))};
  };
  check_unary(
      "layer_norm_input",
      [](Graph& g, Var x) {
        const std::size_t w = x.shape()[1];
        Rng r(w);
        return layer_norm(x, g.constant(random_tensor(r, {w}, 0.5, 1.5)),
                          g.constant(random_tensor(r, {w})));
      },
      wide, -1, 1);
  check_unary(
      "layer_norm_gain",
      [](Graph& g, Var x) {
        Rng r(x.shape()[1] + 5);
        Var in = g.constant(random_tensor(r, {3, x.shape()[1]}));
        return layer_norm(in, reshape(x, {x.shape()[1]}), g.constant(Tensor({x.shape()[1]})));
      },
      [](Rng& rng) { return Shape{1, static_cast<std::size_t>(rng.uniform_int(2, 6))}; }, -1, 1);
  check_unary(
      "cosine_left",
      [](Graph& g, Var x) {
        Rng r(x.shape()[1] + 31);
        return cosine_similarity(x, g.constant(random_tensor(r, {3, x.shape()[1]})));
      },
      matrix_shape, 0.1, 1.0);
  check_unary(
      "cosine_right",
      [](Graph& g, Var x) {
        Rng r(x.shape()[1] + 41);
        return cosine_similarity(g.constant(random_tensor(r, {2, x.shape()[1]})), x);
      },
      matrix_shape, 0.1, 1.0);
}

TEST(PrimitiveGradients, Structural) {
  check_unary("row_bias", [](Graph& g, Var x) {
    Rng r(x.shape()[1]);
    return hadamard(add_row_bias(g.constant(random_tensor(r, {3, x.shape()[1]})),
                                 reshape(x, {x.shape()[1]})),
                    g.constant(random_tensor(r, {3, x.shape()[1]})));
  }, [](Rng& rng) { return Shape{1, static_cast<std::size_t>(rng.uniform_int(1, 6))}; }, -1, 1);
  check_unary("slices", [](Graph&, Var x) {
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    const Var cols[] = {slice_cols(x, c - 1, 1), exp(slice_cols(x, 0, c))};
    const Var rows[] = {slice_rows(x, r - 1, 1), exp(slice_rows(x, 0, r))};
    const Var flat[] = {reshape(concat_cols(cols), {1, r * (c + 1)}),
                        reshape(concat_rows(rows), {1, (r + 1) * c})};
    return concat_cols(flat);
  }, matrix_shape, -1, 1);
  check_unary("stack_select", [](Graph&, Var x) {
    const Var parts[] = {x, exp(x), hadamard(x, x)};
    Var s = stack(parts);
    return add(select(s, 1), select(s, 2));
  }, matrix_shape, -1, 1);
  check_unary("patchify", [](Graph&, Var x) { return patchify(x, 2); },
              [](Rng& rng) {
                const std::size_t n = 2 * static_cast<std::size_t>(rng.uniform_int(1, 3));
                return Shape{n, n};
              },
              -1, 1);
}

// ---- toy encoder: gradients with respect to captured attention --------------

TEST(ToyEncoder, AttentionLeafGradientMatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig{8, 4, 2, 2, 8, 2, 4};
  cfg.text = TextConfig{3, 2, 4, 2};
  const Model model = init_model(cfg, 17);
  Rng rng(4);
  const Tensor image = random_tensor(rng, {8, 8}, 0.0, 1.0);

  for (std::size_t block = 0; block < 2; ++block) {
    const ImagePass pass = target_logit(model, image, model.default_class_embeddings, 1);
    const Tensor& analytic = pass.capture.grad_attention[block];
    auto score = [&](const Tensor& delta) {
      EncodeHooks hooks;
      hooks.attention = [&](Graph& g, std::size_t b, Var a) {
        return b == block ? add(a, g.constant(delta)) : a;
      };
      PassOptions opt;
      opt.target = 1;
      opt.capture = false;
      opt.hooks = &hooks;
      return image_pass(model, image, model.default_class_embeddings, opt).objective;
    };
    const Tensor numeric = fd_extrapolated(score, Tensor(analytic.shape()), 1e-3);
    // rows other than CLS in the last block have exactly zero gradient
    EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), 1e-4) << "block " << block;
  }
}
