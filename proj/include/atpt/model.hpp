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
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "atpt/graph.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

/// Patch vision transformer geometry. Token count s = 1 + grid^2.
struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t mlp_ratio = 2;
  std::size_t feature_dim = 32;
  /// Fixed input standardization applied before the patch projection.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return 1 + grid() * grid(); }
  std::size_t head_dim() const { return embed_dim / heads; }
  void validate() const;
};

struct TextConfig {
  std::size_t classes = 10;
  std::size_t prompts = 4;
  std::size_t text_dim = 32;
  std::size_t mlp_ratio = 2;
  void validate() const;
};

struct ModelConfig {
  EncoderConfig encoder;
  TextConfig text;
  double tau = 0.05;
  void validate() const;
};

struct BlockWeights {
  Tensor ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct EncoderWeights {
  Tensor patch_w, patch_b, cls, pos;
  std::vector<BlockWeights> blocks;
  Tensor norm_g, norm_b, proj;
};

/// Maps (prompts P, class token e_c) to a class embedding g_c through one
/// pre-norm transformer block, mean pooling and a projection.
struct TextHead {
  Tensor class_tokens;  // C x text_dim
  Tensor pos;           // (prompts + 1) x text_dim
  Tensor ln1_g, ln1_b, q_w, k_w, v_w, o_w;
  Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  Tensor norm_g, norm_b, proj;  // proj: text_dim x feature_dim
};

/// Learnable prompts plus Adam moments. Reset before every test sample.
struct PromptState {
  Tensor prompts;  // prompts x text_dim
  Tensor m, v;
  std::size_t step = 0;

  static PromptState reset(const Tensor& defaults);
};

struct Model {
  ModelConfig config;
  EncoderWeights encoder;
  TextHead text;
  Tensor default_prompts;
  /// Class embeddings of the default prompts; refreshed by refresh_cache().
  Tensor default_class_embeddings;

  void refresh_cache();
};

/// Fresh randomly initialized model.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// Every trainable tensor with a stable name, in a stable order.
std::vector<std::pair<std::string, Tensor*>> named_tensors(Model& model);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const Model& model);

// ---- graph-level building blocks -----------------------------------------

/// Encoder weights bound into a Graph either as leaves or as constants.
struct EncoderVars {
  Var patch_w, patch_b, cls, pos;
  struct Block {
    Var ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
    Var ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::vector<Block> blocks;
  Var norm_g, norm_b, proj;
};

struct TextVars {
  Var class_tokens, pos, ln1_g, ln1_b, q_w, k_w, v_w, o_w;
  Var ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b, norm_g, norm_b, proj;
};

EncoderVars bind_encoder(Graph& g, const EncoderWeights& w, bool trainable);
TextVars bind_text(Graph& g, const TextHead& w, bool trainable);

/// Optional rewrites of captured internals, used by finite-difference oracles
/// and the stability probes. Each receives the block index and the node.
struct EncodeHooks {
  std::function<Var(Graph&, std::size_t, Var)> attention;
  std::function<Var(Graph&, std::size_t, Var)> tokens;
};

struct EncodeTrace {
  Var feature;                 // 1 x feature_dim
  std::vector<Var> attention;  // per block, heads x s x s
  std::vector<Var> tokens;     // per block input, s x d
};

/// Records the encoder on `g`. Attention and token nodes are watched when
/// `capture` is set so backward() reports their adjoints.
EncodeTrace encode_on(Graph& g, const EncoderConfig& config, const EncoderVars& w, Var image,
                      bool capture, const EncodeHooks* hooks = nullptr);

/// C x feature_dim class embeddings for the given prompt node.
Var class_embeddings_on(Graph& g, const TextConfig& config, const TextVars& w, Var prompts);

/// 1 x C logits cos(f, g_c) / tau.
Var logits_on(Var feature, Var class_embeddings, double tau);

// ---- tensor-level API -----------------------------------------------------

/// Internals of one encoder pass. Gradient stacks are empty unless a backward
/// from a scalar target was run.
struct EncoderCapture {
  std::vector<Tensor> attention;       // heads x s x s
  std::vector<Tensor> tokens;          // s x d
  std::vector<Tensor> grad_attention;  // same shapes
  std::vector<Tensor> grad_tokens;

  std::size_t blocks() const { return attention.size(); }
  bool has_gradients() const {
    return !attention.empty() && grad_attention.size() == attention.size() &&
           grad_tokens.size() == tokens.size();
  }
};

/// Feature vector (1 x feature_dim) of an image; capture filled when requested.
Tensor encode_image(const Model& model, const Tensor& image, EncoderCapture* capture = nullptr);

/// C x feature_dim class embeddings for prompts P.
Tensor class_embeddings(const Model& model, const Tensor& prompts);

/// Softmax over cos(f, g_c) / tau; returns a length-C vector.
Tensor predict_probs(const Tensor& feature, const Tensor& class_embeddings, double tau);

std::size_t argmax(std::span<const double> values);

enum class Objective {
  /// S(x) = cos(f, g_target) / tau.
  TargetLogit,
  /// -log p_target(x).
  CrossEntropy,
};

struct PassOptions {
  Objective objective = Objective::TargetLogit;
  /// Defaults to the argmax prediction.
  std::optional<std::size_t> target;
  bool capture = true;
  bool input_gradient = false;
  const EncodeHooks* hooks = nullptr;
};

struct ImagePass {
  Tensor feature;
  Tensor probs;
  std::size_t target = 0;
  double objective = 0.0;
  EncoderCapture capture;
  Tensor input_grad;  // H x W when requested
};

/// One forward + backward through the encoder and scoring head for a scalar
/// objective, with class embeddings held fixed.
ImagePass image_pass(const Model& model, const Tensor& image, const Tensor& class_embeddings,
                     const PassOptions& options = {});

/// Target logit S(x) with attention and token gradients populated.
ImagePass target_logit(const Model& model, const Tensor& image, const Tensor& class_embeddings,
                       std::optional<std::size_t> target = std::nullopt);

}  // namespace atpt
