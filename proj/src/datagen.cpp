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

#include "atpt/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "atpt/augment.hpp"
#include "atpt/checkpoint.hpp"
#include "atpt/graph.hpp"
#include "atpt/log.hpp"
#include "atpt/rng.hpp"

namespace atpt {

void SyntheticSpec::validate() const {
  if (classes < 2 || classes > kGlyphClasses)
    throw Error("synthetic spec: classes must be in [2, " + std::to_string(kGlyphClasses) + "]");
  if (glyph_size == 0 || glyph_size > image_size) throw Error("synthetic spec: glyph larger than image");
  if (glyph_size + 2 * jitter > image_size) throw Error("synthetic spec: jitter pushes the glyph off the image");
  if (train_per_class == 0 || test_per_class == 0) throw Error("synthetic spec: empty split");
}

nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"classes", s.classes},
          {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class},
          {"image_size", s.image_size},
          {"glyph_size", s.glyph_size},
          {"jitter", s.jitter},
          {"background_mean", s.background_mean},
          {"background_std", s.background_std},
          {"noise", s.noise},
          {"glyph_contrast", s.glyph_contrast},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.classes = j.value("classes", s.classes);
  s.train_per_class = j.value("train_per_class", s.train_per_class);
  s.test_per_class = j.value("test_per_class", s.test_per_class);
  s.image_size = j.value("image_size", s.image_size);
  s.glyph_size = j.value("glyph_size", s.glyph_size);
  s.jitter = j.value("jitter", s.jitter);
  s.background_mean = j.value("background_mean", s.background_mean);
  s.background_std = j.value("background_std", s.background_std);
  s.noise = j.value("noise", s.noise);
  s.glyph_contrast = j.value("glyph_contrast", s.glyph_contrast);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

std::string SyntheticSpec::hash() const {
  const std::string blob = to_json(*this).dump();
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(blob.data(), blob.size());
  return s.str();
}

Tensor glyph_pattern(std::size_t label, std::size_t n) {
  if (label >= kGlyphClasses) throw Error("glyph_pattern: no glyph for class " + std::to_string(label));
  Tensor g({n, n});
  const double mid = (static_cast<double>(n) - 1.0) / 2.0;
  const double q = static_cast<double>(n) / 4.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double y = static_cast<double>(r) - mid, x = static_cast<double>(c) - mid;
      const double ax = std::abs(x), ay = std::abs(y);
      const bool vbar = ax < 1.0, hbar = ay < 1.0;
      const bool edge = r == 0 || c == 0 || r + 1 == n || c + 1 == n;
      bool on = false;
      switch (label) {
        case 0: on = vbar; break;
        case 1: on = hbar; break;
        case 2: on = vbar || hbar; break;
        case 3: on = std::abs(ax - ay) < 0.75; break;
        case 4: on = std::abs(std::hypot(x, y) - mid) < 0.8; break;
        case 5: on = edge; break;
        case 6: on = r < 2 || vbar; break;
        case 7: on = r + 2 >= n || vbar; break;
        case 8: on = std::abs(ax - (y + mid) / 2.0) < 0.6; break;
        case 9: on = std::abs(ax - q) < 1.0 && ax > 0.5; break;
      }
      g.at(r, c) = on ? 1.0 : 0.0;
    }
  }
  return g;
}

Sample render_sample(const SyntheticSpec& spec, std::size_t label, std::uint64_t seed, bool erase) {
  const std::size_t n = spec.image_size;
  Rng rng(seed);
  // Smoothed noise: a coarse random grid, bilinearly upsampled.
  const std::size_t coarse = 5;
  Tensor low({coarse, coarse});
  for (double& v : low.data()) v = rng.normal(0.0, 1.0);
  Tensor image({n, n});
  const double step = static_cast<double>(coarse - 1) / static_cast<double>(n - 1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      image.at(r, c) = spec.background_mean +
                       spec.background_std * sample_bilinear(low, static_cast<double>(r) * step,
                                                             static_cast<double>(c) * step) +
                       rng.normal(0.0, spec.noise);

  const int j = static_cast<int>(spec.jitter);
  const std::size_t origin = (n - spec.glyph_size) / 2;
  const auto r0 = static_cast<std::size_t>(static_cast<int>(origin) + rng.uniform_int(-j, j));
  const auto c0 = static_cast<std::size_t>(static_cast<int>(origin) + rng.uniform_int(-j, j));
  const double contrast = spec.glyph_contrast * rng.uniform(0.85, 1.15);
  if (!erase) {
    const Tensor glyph = glyph_pattern(label, spec.glyph_size);
    for (std::size_t r = 0; r < spec.glyph_size; ++r)
      for (std::size_t c = 0; c < spec.glyph_size; ++c)
        image.at(r0 + r, c0 + c) += contrast * glyph.at(r, c);
  }
  clip01(image);
  return {std::move(image), label, Box{r0, c0, r0 + spec.glyph_size, c0 + spec.glyph_size}};
}

Dataset generate_split(const SyntheticSpec& spec, const std::string& split, bool erase) {
  spec.validate();
  if (split != "train" && split != "test") throw Error("unknown split '" + split + "'");
  const std::size_t per_class = split == "train" ? spec.train_per_class : spec.test_per_class;
  const std::uint64_t stream = split_seed(spec.seed, split == "train" ? 1 : 2);
  Dataset d;
  d.split = split;
  d.spec_hash = spec.hash();
  d.samples.reserve(per_class * spec.classes);
  for (std::size_t i = 0; i < per_class * spec.classes; ++i)
    d.samples.push_back(render_sample(spec, i % spec.classes, split_seed(stream, i), erase));
  return d;
}

DatasetPair generate(const SyntheticSpec& spec, bool erase) {
  return {generate_split(spec, "train", erase), generate_split(spec, "test", erase)};
}

namespace {

std::vector<Var> flatten(const EncoderVars& e, const TextVars& t, Var prompts) {
  std::vector<Var> v{e.patch_w, e.patch_b, e.cls, e.pos};
  for (const auto& b : e.blocks)
    v.insert(v.end(), {b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.out_w, b.out_b, b.ln2_g, b.ln2_b,
                       b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b});
  v.insert(v.end(), {e.norm_g, e.norm_b, e.proj, t.class_tokens, t.pos, t.ln1_g, t.ln1_b, t.q_w,
                     t.k_w, t.v_w, t.o_w, t.ln2_g, t.ln2_b, t.fc1_w, t.fc1_b, t.fc2_w, t.fc2_b,
                     t.norm_g, t.norm_b, t.proj, prompts});
  return v;
}

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

Tensor training_view(const Tensor& image, const PretrainConfig& config, Rng& rng) {
  if (!config.augment) return image;
  Tensor x = base_view(image, rng.engine()());
  if (rng.bernoulli(config.augmix_prob)) x = aggressive_view(x, rng.engine()());
  return x;
}

}  // namespace

std::vector<EpochStats> pretrain(Model& model, const Dataset& train, const PretrainConfig& config,
                                 const EpochCallback& callback) {
  std::vector<EpochStats> history;
  if (config.epochs == 0 || train.samples.empty()) return history;
  const std::size_t classes = model.config.text.classes;
  const auto params = named_tensors(model);
  AdamState adam;
  for (const auto& [name, t] : params) {
    adam.m.emplace_back(t->shape());
    adam.v.emplace_back(t->shape());
  }
  Rng rng(config.seed);
  std::vector<std::size_t> labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) labels[i] = train.samples[i].label;
  if (config.shuffle_labels) std::shuffle(labels.begin(), labels.end(), rng.engine());

  const std::size_t batches = (train.size() + config.batch - 1) / config.batch;
  const std::size_t total_steps = config.epochs * batches;
  std::vector<Tensor> last_good;
  for (const auto& [name, t] : params) last_good.push_back(*t);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * config.batch, hi = std::min(train.size(), lo + config.batch);
      Graph g;
      const EncoderVars ev = bind_encoder(g, model.encoder, true);
      const TextVars tv = bind_text(g, model.text, true);
      Var prompts = g.leaf(model.default_prompts);
      const std::vector<Var> leaves = flatten(ev, tv, prompts);
      Var emb = class_embeddings_on(g, model.config.text, tv, prompts);
      std::vector<Var> feats;
      Tensor onehot({hi - lo, classes});
      for (std::size_t k = lo; k < hi; ++k) {
        const Tensor x = training_view(train.samples[order[k]].image, config, rng);
        feats.push_back(encode_on(g, model.config.encoder, ev, g.constant(x), false).feature);
        onehot.at(k - lo, labels[order[k]]) = 1.0;
      }
      Var probs = softmax_rows(logits_on(concat_rows(feats), emb, model.config.tau));
      for (std::size_t k = lo; k < hi; ++k)
        correct += argmax(row(probs.value(), k - lo)) == labels[order[k]];
      Var loss = scale(sum_all(hadamard(log(probs), g.constant(onehot))),
                       -1.0 / static_cast<double>(hi - lo));
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        logger().error("pretrain: non-finite loss at epoch {}, restoring last good weights", epoch);
        for (std::size_t i = 0; i < params.size(); ++i) *params[i].second = last_good[i];
        model.refresh_cache();
        return history;
      }
      loss_sum += value * static_cast<double>(hi - lo);
      const Gradients grads = g.backward(loss);

      const double progress = static_cast<double>(adam.step) / static_cast<double>(total_steps);
      const double warm = std::min(1.0, static_cast<double>(adam.step + 1) /
                                            static_cast<double>(config.warmup_epochs * batches + 1));
      const double lr = warm * (config.lr_final + 0.5 * (config.lr - config.lr_final) *
                                                      (1.0 + std::cos(progress * 3.141592653589793)));
      ++adam.step;
      const double c1 = 1.0 - std::pow(0.9, static_cast<double>(adam.step));
      const double c2 = 1.0 - std::pow(0.999, static_cast<double>(adam.step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].second;
        const Tensor& gr = grad_of(grads, leaves[i]);
        if (gr.shape() != p.shape()) throw ShapeError("pretrain " + params[i].first, gr.shape(), p.shape());
        for (std::size_t j = 0; j < p.size(); ++j) {
          adam.m[i][j] = 0.9 * adam.m[i][j] + 0.1 * gr[j];
          adam.v[i][j] = 0.999 * adam.v[i][j] + 0.001 * gr[j] * gr[j];
          p[j] -= lr * ((adam.m[i][j] / c1) / (std::sqrt(adam.v[i][j] / c2) + 1e-8) +
                        config.weight_decay * p[j]);
        }
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) last_good[i] = *params[i].second;
    EpochStats st{epoch, loss_sum / static_cast<double>(train.size()),
                  static_cast<double>(correct) / static_cast<double>(train.size())};
    history.push_back(st);
    if (callback) callback(st);
  }
  model.refresh_cache();
  return history;
}

double zero_shot_accuracy(const Model& model, const Dataset& data, std::size_t limit) {
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor p = predict_probs(encode_image(model, data.samples[i].image),
                                   model.default_class_embeddings, model.config.tau);
    correct += argmax(p.data()) == data.samples[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double localization_score(const Tensor& grid, const Box& box, std::size_t image_size) {
  if (box.row1 > image_size || box.col1 > image_size || box.row0 >= box.row1 || box.col0 >= box.col1)
    throw Error("localization_score: box outside the image");
  if (image_size % grid.dim(0) != 0) throw ShapeError("localization_score", "grid does not tile the image");
  const Tensor up = upsample_nearest(grid, image_size / grid.dim(0));
  double total = 0.0, inside = 0.0;
  for (std::size_t r = 0; r < image_size; ++r)
    for (std::size_t c = 0; c < image_size; ++c) {
      const double v = std::abs(up.at(r, c));
      total += v;
      if (box.contains(r, c)) inside += v;
    }
  if (!(total > 0.0)) {
    logger().warn("localization_score: zero-mass map");
    return 0.0;
  }
  return inside / total;
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},   {"batch", c.batch},
          {"lr", c.lr},           {"lr_final", c.lr_final}, {"warmup_epochs", c.warmup_epochs},
          {"weight_decay", c.weight_decay}, {"augment", c.augment},
          {"augmix_prob", c.augmix_prob},   {"seed", c.seed},
          {"shuffle_labels", c.shuffle_labels}};
}

}  // namespace atpt
