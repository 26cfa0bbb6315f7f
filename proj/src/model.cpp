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

#include "atpt/model.hpp"

#include <algorithm>
#include <cmath>

#include "atpt/rng.hpp"

namespace atpt {

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw Error("encoder config: patch_size " + std::to_string(patch_size) +
                " does not divide image_size " + std::to_string(image_size));
  }
  if (heads == 0 || embed_dim % heads != 0) {
    throw Error("encoder config: heads " + std::to_string(heads) + " does not divide embed_dim " +
                std::to_string(embed_dim));
  }
  if (!(pixel_std > 0.0)) throw Error("encoder config: pixel_std must be positive");
  if (blocks == 0 || mlp_ratio == 0 || feature_dim == 0) {
    throw Error("encoder config: blocks, mlp_ratio and feature_dim must be positive");
  }
}

void TextConfig::validate() const {
  if (classes < 2) throw Error("text config: need at least 2 classes");
  if (prompts == 0 || text_dim == 0 || mlp_ratio == 0) {
    throw Error("text config: prompts, text_dim and mlp_ratio must be positive");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  text.validate();
  if (!(tau > 0.0)) throw Error("model config: tau must be positive");
}

PromptState PromptState::reset(const Tensor& defaults) {
  return PromptState{defaults, Tensor(defaults.shape()), Tensor(defaults.shape()), 0};
}

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor linear_init(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain = 1.0) {
  return randn(rng, {fan_in, fan_out}, gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const auto& ec = config.encoder;
  const auto& tc = config.text;
  const std::size_t d = ec.embed_dim, s = ec.tokens(), pp = ec.patch_size * ec.patch_size;
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(ec.blocks));

  Model m;
  m.config = config;
  auto& e = m.encoder;
  e.patch_w = linear_init(rng, pp, d);
  e.patch_b = Tensor({d});
  e.cls = randn(rng, {1, d}, 0.1);
  e.pos = randn(rng, {s, d}, 0.1);
  for (std::size_t b = 0; b < ec.blocks; ++b) {
    BlockWeights w;
    w.ln1_g = Tensor::ones({d});
    w.ln1_b = Tensor({d});
    w.qkv_w = linear_init(rng, d, 3 * d);
    w.qkv_b = Tensor({3 * d});
    w.out_w = linear_init(rng, d, d, residual_gain);
    w.out_b = Tensor({d});
    w.ln2_g = Tensor::ones({d});
    w.ln2_b = Tensor({d});
    w.fc1_w = linear_init(rng, d, ec.mlp_ratio * d);
    w.fc1_b = Tensor({ec.mlp_ratio * d});
    w.fc2_w = linear_init(rng, ec.mlp_ratio * d, d, residual_gain);
    w.fc2_b = Tensor({d});
    e.blocks.push_back(std::move(w));
  }
  e.norm_g = Tensor::ones({d});
  e.norm_b = Tensor({d});
  e.proj = linear_init(rng, d, ec.feature_dim);

  const std::size_t t = tc.text_dim;
  auto& h = m.text;
  h.class_tokens = randn(rng, {tc.classes, t}, 1.0);
  h.pos = randn(rng, {tc.prompts + 1, t}, 0.1);
  h.ln1_g = Tensor::ones({t});
  h.ln1_b = Tensor({t});
  h.q_w = linear_init(rng, t, t);
  h.k_w = linear_init(rng, t, t);
  h.v_w = linear_init(rng, t, t);
  h.o_w = linear_init(rng, t, t, 0.5);
  h.ln2_g = Tensor::ones({t});
  h.ln2_b = Tensor({t});
  h.fc1_w = linear_init(rng, t, tc.mlp_ratio * t);
  h.fc1_b = Tensor({tc.mlp_ratio * t});
  h.fc2_w = linear_init(rng, tc.mlp_ratio * t, t, 0.5);
  h.fc2_b = Tensor({t});
  h.norm_g = Tensor::ones({t});
  h.norm_b = Tensor({t});
  h.proj = linear_init(rng, t, ec.feature_dim);

  m.default_prompts = randn(rng, {tc.prompts, t}, 0.5);
  m.refresh_cache();
  return m;
}

void Model::refresh_cache() { default_class_embeddings = class_embeddings(*this, default_prompts); }

namespace {

template <typename M, typename T>
std::vector<std::pair<std::string, T*>> collect(M& m) {
  std::vector<std::pair<std::string, T*>> out;
  auto& e = m.encoder;
  out.emplace_back("encoder.patch_w", &e.patch_w);
  out.emplace_back("encoder.patch_b", &e.patch_b);
  out.emplace_back("encoder.cls", &e.cls);
  out.emplace_back("encoder.pos", &e.pos);
  for (std::size_t b = 0; b < e.blocks.size(); ++b) {
    auto& w = e.blocks[b];
    const std::string p = "encoder.block" + std::to_string(b) + ".";
    out.emplace_back(p + "ln1_g", &w.ln1_g);
    out.emplace_back(p + "ln1_b", &w.ln1_b);
    out.emplace_back(p + "qkv_w", &w.qkv_w);
    out.emplace_back(p + "qkv_b", &w.qkv_b);
    out.emplace_back(p + "out_w", &w.out_w);
    out.emplace_back(p + "out_b", &w.out_b);
    out.emplace_back(p + "ln2_g", &w.ln2_g);
    out.emplace_back(p + "ln2_b", &w.ln2_b);
    out.emplace_back(p + "fc1_w", &w.fc1_w);
    out.emplace_back(p + "fc1_b", &w.fc1_b);
    out.emplace_back(p + "fc2_w", &w.fc2_w);
    out.emplace_back(p + "fc2_b", &w.fc2_b);
  }
  out.emplace_back("encoder.norm_g", &e.norm_g);
  out.emplace_back("encoder.norm_b", &e.norm_b);
  out.emplace_back("encoder.proj", &e.proj);
  auto& h = m.text;
  out.emplace_back("text.class_tokens", &h.class_tokens);
  out.emplace_back("text.pos", &h.pos);
  out.emplace_back("text.ln1_g", &h.ln1_g);
  out.emplace_back("text.ln1_b", &h.ln1_b);
  out.emplace_back("text.q_w", &h.q_w);
  out.emplace_back("text.k_w", &h.k_w);
  out.emplace_back("text.v_w", &h.v_w);
  out.emplace_back("text.o_w", &h.o_w);
  out.emplace_back("text.ln2_g", &h.ln2_g);
  out.emplace_back("text.ln2_b", &h.ln2_b);
  out.emplace_back("text.fc1_w", &h.fc1_w);
  out.emplace_back("text.fc1_b", &h.fc1_b);
  out.emplace_back("text.fc2_w", &h.fc2_w);
  out.emplace_back("text.fc2_b", &h.fc2_b);
  out.emplace_back("text.norm_g", &h.norm_g);
  out.emplace_back("text.norm_b", &h.norm_b);
  out.emplace_back("text.proj", &h.proj);
  out.emplace_back("prompts.default", &m.default_prompts);
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> named_tensors(Model& model) {
  return collect<Model, Tensor>(model);
}

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const Model& model) {
  return collect<const Model, const Tensor>(model);
}

// ---- graph building ----------------------------------------------------------

EncoderVars bind_encoder(Graph& g, const EncoderWeights& w, bool trainable) {
  auto bind = [&](const Tensor& t) { return trainable ? g.leaf(t) : g.constant(t); };
  EncoderVars v;
  v.patch_w = bind(w.patch_w);
  v.patch_b = bind(w.patch_b);
  v.cls = bind(w.cls);
  v.pos = bind(w.pos);
  for (const auto& b : w.blocks) {
    v.blocks.push_back({bind(b.ln1_g), bind(b.ln1_b), bind(b.qkv_w), bind(b.qkv_b), bind(b.out_w),
                        bind(b.out_b), bind(b.ln2_g), bind(b.ln2_b), bind(b.fc1_w), bind(b.fc1_b),
                        bind(b.fc2_w), bind(b.fc2_b)});
  }
  v.norm_g = bind(w.norm_g);
  v.norm_b = bind(w.norm_b);
  v.proj = bind(w.proj);
  return v;
}

TextVars bind_text(Graph& g, const TextHead& w, bool trainable) {
  auto bind = [&](const Tensor& t) { return trainable ? g.leaf(t) : g.constant(t); };
  return TextVars{bind(w.class_tokens), bind(w.pos),   bind(w.ln1_g),  bind(w.ln1_b),
                  bind(w.q_w),          bind(w.k_w),   bind(w.v_w),    bind(w.o_w),
                  bind(w.ln2_g),        bind(w.ln2_b), bind(w.fc1_w),  bind(w.fc1_b),
                  bind(w.fc2_w),        bind(w.fc2_b), bind(w.norm_g), bind(w.norm_b),
                  bind(w.proj)};
}

EncodeTrace encode_on(Graph& g, const EncoderConfig& config, const EncoderVars& w, Var image,
                      bool capture, const EncodeHooks* hooks) {
  const Shape expected{config.image_size, config.image_size};
  if (image.shape() != expected) throw ShapeError("encode_image", image.shape(), expected);
  const std::size_t d = config.embed_dim, heads = config.heads, dh = config.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  EncodeTrace trace;
  Var pixels = patchify(image, config.patch_size);
  pixels = scale(add(pixels, g.constant(Tensor(pixels.shape(), -config.pixel_mean))),
                 1.0 / config.pixel_std);
  Var patches = add_row_bias(matmul(pixels, w.patch_w), w.patch_b);
  const Var rows[] = {w.cls, patches};
  Var x = add(concat_rows(rows), w.pos);

  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& bw = w.blocks[b];
    if (hooks && hooks->tokens) x = hooks->tokens(g, b, x);
    if (capture) g.watch(x);
    trace.tokens.push_back(x);

    Var h = layer_norm(x, bw.ln1_g, bw.ln1_b);
    Var qkv = add_row_bias(matmul(h, bw.qkv_w), bw.qkv_b);
    std::vector<Var> probs;
    probs.reserve(heads);
    for (std::size_t k = 0; k < heads; ++k) {
      Var q = slice_cols(qkv, k * dh, dh);
      Var kk = slice_cols(qkv, d + k * dh, dh);
      probs.push_back(softmax_rows(scale(matmul(q, transpose(kk)), attn_scale)));
    }
    Var attn = stack(probs);
    if (hooks && hooks->attention) attn = hooks->attention(g, b, attn);
    if (capture) g.watch(attn);
    trace.attention.push_back(attn);

    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t k = 0; k < heads; ++k) {
      Var v = slice_cols(qkv, 2 * d + k * dh, dh);
      outs.push_back(matmul(select(attn, k), v));
    }
    x = add(x, add_row_bias(matmul(concat_cols(outs), bw.out_w), bw.out_b));

    Var h2 = layer_norm(x, bw.ln2_g, bw.ln2_b);
    Var mlp = add_row_bias(matmul(gelu(add_row_bias(matmul(h2, bw.fc1_w), bw.fc1_b)), bw.fc2_w),
                           bw.fc2_b);
    x = add(x, mlp);
  }

  Var cls_out = layer_norm(slice_rows(x, 0, 1), w.norm_g, w.norm_b);
  trace.feature = matmul(cls_out, w.proj);
  return trace;
}

Var class_embeddings_on(Graph& g, const TextConfig& config, const TextVars& w, Var prompts) {
  (void)g;
  const Shape expected{config.prompts, config.text_dim};
  if (prompts.shape() != expected) throw ShapeError("class_embeddings", prompts.shape(), expected);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(config.text_dim));
  std::vector<Var> rows;
  rows.reserve(config.classes);
  for (std::size_t c = 0; c < config.classes; ++c) {
    const Var parts[] = {prompts, slice_rows(w.class_tokens, c, 1)};
    Var x = add(concat_rows(parts), w.pos);
    Var h = layer_norm(x, w.ln1_g, w.ln1_b);
    Var q = matmul(h, w.q_w);
    Var k = matmul(h, w.k_w);
    Var v = matmul(h, w.v_w);
    Var a = softmax_rows(scale(matmul(q, transpose(k)), attn_scale));
    x = add(x, matmul(matmul(a, v), w.o_w));
    Var h2 = layer_norm(x, w.ln2_g, w.ln2_b);
    x = add(x, add_row_bias(matmul(gelu(add_row_bias(matmul(h2, w.fc1_w), w.fc1_b)), w.fc2_w),
                            w.fc2_b));
    Var pooled = reshape(mean_axis(x, 0), {1, config.text_dim});
    rows.push_back(matmul(layer_norm(pooled, w.norm_g, w.norm_b), w.proj));
  }
  return concat_rows(rows);
}

Var logits_on(Var feature, Var class_embeddings, double tau) {
  return scale(cosine_similarity(feature, class_embeddings), 1.0 / tau);
}

// ---- tensor-level ----------------------------------------------------------

Tensor encode_image(const Model& model, const Tensor& image, EncoderCapture* capture) {
  Graph g;
  const EncoderVars w = bind_encoder(g, model.encoder, false);
  EncodeTrace trace = encode_on(g, model.config.encoder, w, g.constant(image), false);
  if (capture) {
    capture->attention.clear();
    capture->tokens.clear();
    capture->grad_attention.clear();
    capture->grad_tokens.clear();
    for (Var a : trace.attention) capture->attention.push_back(a.value());
    for (Var t : trace.tokens) capture->tokens.push_back(t.value());
  }
  return trace.feature.value();
}

Tensor class_embeddings(const Model& model, const Tensor& prompts) {
  Graph g;
  const TextVars w = bind_text(g, model.text, false);
  return class_embeddings_on(g, model.config.text, w, g.constant(prompts)).value();
}

Tensor predict_probs(const Tensor& feature, const Tensor& class_embeddings, double tau) {
  if (!(tau > 0.0)) throw Error("predict_probs: tau must be positive");
  Graph g;
  const Tensor f = feature.rank() == 1 ? feature.reshaped({1, feature.size()}) : feature;
  Var p = softmax_rows(logits_on(g.constant(f), g.constant(class_embeddings), tau));
  return p.value().reshaped({class_embeddings.dim(0)});
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

ImagePass image_pass(const Model& model, const Tensor& image, const Tensor& class_embeddings,
                     const PassOptions& options) {
  const std::size_t classes = class_embeddings.dim(0);
  if (options.target && *options.target >= classes) {
    throw Error("image_pass: target class " + std::to_string(*options.target) + " out of range");
  }
  Graph g;
  const EncoderVars w = bind_encoder(g, model.encoder, false);
  Var x = options.input_gradient ? g.leaf(image) : g.constant(image);
  EncodeTrace trace =
      encode_on(g, model.config.encoder, w, x, options.capture, options.hooks);
  Var emb = g.constant(class_embeddings);
  Var logits = logits_on(trace.feature, emb, model.config.tau);
  Var probs = softmax_rows(logits);

  ImagePass pass;
  pass.feature = trace.feature.value();
  pass.probs = probs.value().reshaped({classes});
  pass.target = options.target.value_or(argmax(pass.probs.data()));

  Tensor onehot({1, classes});
  onehot[pass.target] = 1.0;
  Var picked = sum_all(hadamard(options.objective == Objective::TargetLogit ? logits : log(probs),
                                g.constant(onehot)));
  Var objective = options.objective == Objective::TargetLogit ? picked : scale(picked, -1.0);
  pass.objective = objective.value().item();

  const bool needs_backward = options.capture || options.input_gradient;
  if (!needs_backward) return pass;
  const Gradients grads = g.backward(objective);
  if (options.capture) {
    for (std::size_t b = 0; b < trace.attention.size(); ++b) {
      pass.capture.attention.push_back(trace.attention[b].value());
      pass.capture.tokens.push_back(trace.tokens[b].value());
      pass.capture.grad_attention.push_back(grad_of(grads, trace.attention[b]));
      pass.capture.grad_tokens.push_back(grad_of(grads, trace.tokens[b]));
    }
  }
  if (options.input_gradient) pass.input_grad = grad_of(grads, x);
  return pass;
}

ImagePass target_logit(const Model& model, const Tensor& image, const Tensor& class_embeddings,
                       std::optional<std::size_t> target) {
  PassOptions options;
  options.target = target;
  return image_pass(model, image, class_embeddings, options);
}

}  // namespace atpt
