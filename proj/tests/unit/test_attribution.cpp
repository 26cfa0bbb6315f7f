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

#include "atpt/attribution.hpp"
#include "atpt/graph.hpp"
#include "oracles.hpp"

using namespace atpt;
using oracle::random_tensor;

namespace {

Tensor row_softmax_stack(Rng& rng, std::size_t heads, std::size_t s) {
  Tensor a({heads, s, s});
  for (std::size_t k = 0; k < heads; ++k)
    for (std::size_t r = 0; r < s; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < s; ++c) total += a.at(k, r, c) = std::exp(rng.uniform(-2.0, 2.0));
      for (std::size_t c = 0; c < s; ++c) a.at(k, r, c) /= total;
    }
  return a;
}

EncoderCapture random_capture(Rng& rng, std::size_t blocks, std::size_t heads, std::size_t s, std::size_t d) {
  EncoderCapture cap;
  for (std::size_t b = 0; b < blocks; ++b) {
    cap.attention.push_back(row_softmax_stack(rng, heads, s));
    cap.grad_attention.push_back(random_tensor(rng, {heads, s, s}));
    cap.tokens.push_back(random_tensor(rng, {s, d}));
    cap.grad_tokens.push_back(random_tensor(rng, {s, d}));
  }
  return cap;
}

void expect_row_stochastic(const Tensor& m) {
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < m.dim(1); ++c) total += m.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

}  // namespace

TEST(GarTransition, ZeroGradientIsIdentity) {
  Rng rng(1);
  const Tensor a = row_softmax_stack(rng, 3, 5);
  EXPECT_EQ(gar_transition(a, Tensor(a.shape())), Tensor::identity(5));
}

TEST(GarTransition, TwoTokenExample) {
  const Tensor a({1, 2, 2}, 0.5);
  const Tensor g({1, 2, 2}, 1.0);
  const Tensor t = gar_transition(a, g);
  EXPECT_NEAR(t.at(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(t.at(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(t.at(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(t.at(1, 1), 0.75, 1e-15);
  const Tensor raw = gar_transition(a, g, {false});
  EXPECT_EQ(raw, Tensor::matrix(2, 2, {1.5, 0.5, 0.5, 1.5}));
}

TEST(GarTransition, ClampAfterHeadMean) {
  // Head means: entry (0,1) = (0.5*1 + 0.5*-3)/2 < 0 is zeroed; (1,0) = (0.5*3 + 0.5*-1)/2 > 0 survives
  // although one head is negative.
  const Tensor a({2, 2, 2}, 0.5);
  Tensor g({2, 2, 2});
  g.at(0, 0, 1) = 1.0;
  g.at(1, 0, 1) = -3.0;
  g.at(0, 1, 0) = 3.0;
  g.at(1, 1, 0) = -1.0;
  const Tensor t = gar_transition(a, g, {false});
  EXPECT_EQ(t.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(t.at(1, 0), 0.5);
  EXPECT_THROW(gar_transition(a, Tensor({2, 3, 3})), ShapeError);
}

TEST(TokenWeights, Examples) {
  const Tensor t = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor g = Tensor::matrix(2, 2, {2, -1, -3, 4});
  const Tensor w = token_weights(t, g);
  EXPECT_NEAR(w[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(w[1], 2.0 / 3.0, 1e-15);

  const Tensor one = token_weights(t, Tensor::matrix(2, 2, {-1, 0, 0, 5}));
  EXPECT_EQ(one[0], 0.0);
  EXPECT_EQ(one[1], 1.0);

  bool degenerate = false;
  const Tensor u = token_weights(t, Tensor::matrix(2, 2, {-1, 0, 0, -5}), &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_EQ(u[0], 0.5);
  EXPECT_EQ(u[1], 0.5);
}

TEST(RefinedTransition, TwoTokenExample) {
  const Tensor a({1, 2, 2}, 0.5);
  const Tensor w = Tensor::from({1.0 / 3.0, 2.0 / 3.0});
  const Tensor raw = refined_transition(a, w, {false});
  EXPECT_NEAR(raw.at(0, 0), 7.0 / 6.0, 1e-15);
  EXPECT_NEAR(raw.at(0, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(raw.at(1, 0), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(raw.at(1, 1), 4.0 / 3.0, 1e-15);
  const Tensor t = refined_transition(a, w);
  EXPECT_NEAR(t.at(0, 0), 7.0 / 9.0, 1e-15);
  EXPECT_NEAR(t.at(0, 1), 2.0 / 9.0, 1e-15);
  EXPECT_NEAR(t.at(1, 0), 1.0 / 9.0, 1e-15);
  EXPECT_NEAR(t.at(1, 1), 8.0 / 9.0, 1e-15);
}

TEST(RefinedTransition, InvariantToScoreRescaling) {
  Rng rng(3);
  for (int it = 0; it < 50; ++it) {
    const Tensor a = row_softmax_stack(rng, 2, 6);
    const Tensor tok = random_tensor(rng, {6, 4});
    const Tensor grad = random_tensor(rng, {6, 4});
    Tensor scaled = grad;
    const double k = rng.uniform(0.1, 10.0);
    for (double& v : scaled.data()) v *= k;
    const Tensor t1 = refined_transition(a, token_weights(tok, grad));
    const Tensor t2 = refined_transition(a, token_weights(tok, scaled));
    EXPECT_LT(max_abs_diff(t1, t2), 1e-12);
  }
}

TEST(RefinedTransition, UniformWeightsMatchBruteForce) {
  Rng rng(4);
  const std::size_t h = 3, s = 5;
  const Tensor a = row_softmax_stack(rng, h, s);
  const Tensor t = refined_transition(a, Tensor({s}, 1.0 / s));
  for (std::size_t i = 0; i < s; ++i) {
    std::vector<double> row(s);
    double total = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
      for (std::size_t k = 0; k < h; ++k) row[j] += a.at(k, i, j) / s;
      row[j] = row[j] / h + (i == j ? 1.0 : 0.0);
      total += row[j];
    }
    for (std::size_t j = 0; j < s; ++j) EXPECT_NEAR(t.at(i, j), row[j] / total, 1e-14);
  }
  expect_row_stochastic(t);
}

TEST(Rollout, ZeroGradientGivesZeroMap) {
  Rng rng(5);
  EncoderCapture cap = random_capture(rng, 3, 2, 10, 4);
  for (auto& g : cap.grad_attention) g = Tensor(g.shape());
  const AttentionMap m = gar_rollout(cap);
  EXPECT_EQ(m.grid, Tensor({3, 3}));
  EXPECT_EQ(m.variant, MapVariant::Gar);
}

TEST(Rollout, SingleBlockIsClsRowOfTransition) {
  Rng rng(6);
  const EncoderCapture cap = random_capture(rng, 1, 2, 10, 4);
  const Tensor t = gar_transition(cap.attention[0], cap.grad_attention[0]);
  const AttentionMap m = gar_rollout(cap);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(m.grid[k], t.at(0, k + 1));
  EXPECT_THROW(refined_rollout(cap), Error);
}

TEST(Rollout, RefinedIdentityAndSquare) {
  Rng rng(7);
  EncoderCapture cap = random_capture(rng, 2, 1, 5, 3);
  // q_v <= 0 everywhere would fall back to uniform; use zero attention weights instead:
  // attention of zero makes every transition the identity.
  for (auto& a : cap.attention) a = Tensor(a.shape());
  EXPECT_EQ(refined_rollout(cap).grid, Tensor({2, 2}));

  // Identical blocks: A^(B) (A^(B-1) + A^(B)) / 2 = M^2.
  EncoderCapture same = random_capture(rng, 1, 1, 5, 3);
  same.attention.push_back(same.attention[0]);
  same.grad_attention.push_back(same.grad_attention[0]);
  same.tokens.push_back(same.tokens[0]);
  same.grad_tokens.push_back(same.grad_tokens[0]);
  const Tensor m = refined_transition(same.attention[0], token_weights(same.tokens[0], same.grad_tokens[0]));
  const Tensor direct = oracle::matmul_brute(m, m);
  EXPECT_LT(max_abs_diff(refined_product(same), direct), 1e-14);
}

TEST(Rollout, NonnegativeAndRowStochastic) {
  Rng rng(8);
  for (int it = 0; it < 100; ++it) {
    const EncoderCapture cap = random_capture(rng, 3, 2, 10, 4);
    const Tensor gp = gar_product(cap), rp = refined_product(cap);
    expect_row_stochastic(gp);
    expect_row_stochastic(rp);
    const AttentionMap gm = gar_rollout(cap), rm = refined_rollout(cap);
    for (double v : gm.grid.data()) EXPECT_GE(v, 0.0);
    for (double v : rm.grid.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(Rollout, GarAndRefinedAgreeOnTheConsistencyFixture) {
  // B = 2 identical blocks, uniform token weights (1/s) and uniform edge weighting (dA = 1/s).
  Rng rng(9);
  const std::size_t s = 10;
  EncoderCapture cap;
  const Tensor a = row_softmax_stack(rng, 2, s);
  const Tensor tok = random_tensor(rng, {s, 4});
  Tensor grad_tok(tok.shape());
  for (std::size_t i = 0; i < tok.size(); ++i) grad_tok[i] = tok[i] > 0 ? 1.0 : -1.0;
  // q_v = sum |T_v| > 0 for every token; rescale rows so that q is constant.
  for (std::size_t v = 0; v < s; ++v) {
    double q = 0.0;
    for (std::size_t j = 0; j < 4; ++j) q += tok.at(v, j) * grad_tok.at(v, j);
    for (std::size_t j = 0; j < 4; ++j) grad_tok.at(v, j) /= q;
  }
  const Tensor w = token_weights(tok, grad_tok);
  for (double x : w.data()) ASSERT_NEAR(x, 1.0 / s, 1e-15);
  for (int b = 0; b < 2; ++b) {
    cap.attention.push_back(a);
    cap.grad_attention.push_back(Tensor(a.shape(), 1.0 / static_cast<double>(s)));
    cap.tokens.push_back(tok);
    cap.grad_tokens.push_back(grad_tok);
  }
  // Bitwise agreement holds whenever the per-entry weights are identical.
  const Tensor wexact({s}, 1.0 / static_cast<double>(s));
  EXPECT_EQ(gar_transition(a, cap.grad_attention[0]), refined_transition(a, wexact));
  const Tensor t = refined_transition(a, wexact);
  Tensor avg(t.shape());
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (t[i] + t[i]) / 2.0;
  EXPECT_EQ(gemm(t, avg), gar_product(cap));
  EXPECT_LT(max_abs_diff(gar_rollout(cap).grid, refined_rollout(cap).grid), 1e-15);
}

TEST(AttentionDistance, Properties) {
  Rng rng(10);
  Tensor a({3, 3}), b({3, 3});
  a[0] = 1.0;
  b[8] = 5.0;
  EXPECT_EQ(attention_distance(a, b), 2.0);
  EXPECT_EQ(attention_distance(a, a), 0.0);
  for (int it = 0; it < 100; ++it) {
    const Tensor x = random_tensor(rng, {8, 8}, 0.0, 1.0), y = random_tensor(rng, {8, 8}, 0.0, 1.0);
    const double d = attention_distance(x, y);
    EXPECT_EQ(d, attention_distance(y, x));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
  }
  // Zero-mass maps compare as uniform.
  EXPECT_NEAR(attention_distance(Tensor({2, 2}), Tensor({2, 2}, 3.0)), 0.0, 1e-15);
  EXPECT_THROW(attention_distance(Tensor({2, 2}), Tensor({3, 3})), ShapeError);
}

TEST(ClsGrid, RejectsNonSquareTokenCount) {
  EXPECT_THROW(cls_grid(Tensor::identity(6)), ShapeError);
  EXPECT_EQ(cls_grid(Tensor::identity(5)).shape(), (Shape{2, 2}));
}
