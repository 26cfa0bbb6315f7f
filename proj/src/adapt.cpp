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

#include "atpt/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "atpt/graph.hpp"
#include "atpt/log.hpp"

namespace atpt {

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

std::size_t selection_size(std::size_t views, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("selection ratio must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(views)));
  return std::clamp<std::size_t>(k, 1, views);
}

SelectionResult select_low_entropy(const std::vector<Tensor>& probs, double ratio) {
  if (probs.empty()) throw Error("select_low_entropy: no views");
  SelectionResult r;
  r.ratio = ratio;
  for (const auto& p : probs) r.entropies.push_back(entropy(p.data()));
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return r.entropies[a] < r.entropies[b]; });
  order.resize(selection_size(probs.size(), ratio));
  r.selected = std::move(order);
  return r;
}

Var entropy_loss_on(Var probs) {
  const std::size_t n = probs.shape()[0];
  Var plogp = hadamard(probs, log(probs));
  return scale(sum_all(plogp), -1.0 / static_cast<double>(n));
}

double entropy_loss(const std::vector<Tensor>& probs) {
  if (probs.empty()) throw Error("entropy_loss: empty selection");
  double total = 0.0;
  for (const auto& p : probs) total += entropy(p.data());
  return total / static_cast<double>(probs.size());
}

namespace {

Var prompt_loss_on(Graph& g, const Model& model, Var prompts, const Tensor& features) {
  const TextVars w = bind_text(g, model.text, false);
  Var emb = class_embeddings_on(g, model.config.text, w, prompts);
  Var probs = softmax_rows(logits_on(g.constant(features), emb, model.config.tau));
  return entropy_loss_on(probs);
}

}  // namespace

double prompt_entropy_loss(const Model& model, const Tensor& prompts, const Tensor& features) {
  Graph g;
  return prompt_loss_on(g, model, g.constant(prompts), features).value().item();
}

double prompt_entropy_grad(const Model& model, const Tensor& prompts, const Tensor& features,
                           Tensor& grad) {
  Graph g;
  Var p = g.leaf(prompts);
  Var loss = prompt_loss_on(g, model, p, features);
  const double value = loss.value().item();
  if (!std::isfinite(value)) return value;
  grad = grad_of(g.backward(loss), p);
  return value;
}

TuneResult tune_prompts(const Model& model, PromptState& state, const Tensor& features,
                        const OptimizerConfig& config) {
  TuneResult result;
  const PromptState entry = state;
  if (state.m.empty()) state.m = Tensor(state.prompts.shape());
  if (state.v.empty()) state.v = Tensor(state.prompts.shape());
  for (std::size_t t = 0; t < config.steps; ++t) {
    Tensor grad;
    const double loss = prompt_entropy_grad(model, state.prompts, features, grad);
    if (t == 0) result.initial_loss = loss;
    if (!std::isfinite(loss) || !all_finite(grad)) {
      logger().warn("tune_prompts: non-finite loss, keeping the reset prompts");
      state = entry;
      result.aborted = true;
      return result;
    }
    Tensor& p = state.prompts;
    if (config.kind == OptimizerConfig::Kind::Sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= config.lr * grad[i];
    } else {
      ++state.step;
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
      for (std::size_t i = 0; i < p.size(); ++i) {
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1, vhat = state.v[i] / c2;
        p[i] -= config.lr * (mhat / (std::sqrt(vhat) + config.eps) + config.weight_decay * p[i]);
      }
    }
    ++result.steps_taken;
  }
  return result;
}

double tv(const Tensor& grid) {
  if (grid.rank() != 2) throw ShapeError("tv", "expected a grid, got " + shape_str(grid.shape()));
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  double vertical = 0.0, horizontal = 0.0;
  for (std::size_t u = 0; u + 1 < h; ++u)
    for (std::size_t v = 0; v < w; ++v) vertical += std::abs(grid.at(u + 1, v) - grid.at(u, v));
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v + 1 < w; ++v) horizontal += std::abs(grid.at(u, v + 1) - grid.at(u, v));
  return vertical + horizontal;
}

EnsembleWeights tv_weights(const std::vector<Tensor>& maps, bool raw) {
  if (maps.empty()) throw Error("tv_weights: no maps");
  EnsembleWeights e;
  for (const auto& m : maps) e.tv.push_back(tv(raw ? m : l1_normalized(m)));
  const double lowest = *std::min_element(e.tv.begin(), e.tv.end());
  double total = 0.0;
  for (double t : e.tv) {
    e.weights.push_back(std::exp(-(t - lowest)));
    total += e.weights.back();
  }
  for (double& w : e.weights) w /= total;
  return e;
}

Tensor weighted_average(const std::vector<Tensor>& probs, std::span<const double> weights) {
  if (probs.empty() || probs.size() != weights.size())
    throw Error("weighted_average: weights not aligned with views");
  Tensor out(probs.front().shape());
  for (std::size_t i = 0; i < probs.size(); ++i)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += weights[i] * probs[i][c];
  return out;
}

Tensor plain_average(const std::vector<Tensor>& probs) {
  if (probs.empty()) throw Error("plain_average: no views");
  Tensor out(probs.front().shape());
  for (const auto& p : probs)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += p[c];
  for (double& v : out.data()) v /= static_cast<double>(probs.size());
  return out;
}

std::size_t ensemble_predict(const std::vector<Tensor>& probs, std::span<const double> weights) {
  return argmax(weighted_average(probs, weights).data());
}

// ---- pipeline --------------------------------------------------------------

AugmentConfig PipelineConfig::augment() const {
  AugmentConfig a;
  a.views = views;
  a.ratio = ratio;
  a.m_high = m_high;
  a.m_low = m_low;
  a.swap_mix_strengths = swap_mix_strengths;
  a.guided = guided;
  a.variant = variant();
  a.rollout = rollout;
  return a;
}

PreparedViews prepare_views(const Tensor& image, const Model& model, std::size_t views,
                            std::uint64_t seed, bool with_maps, const RolloutOptions& rollout) {
  if (views == 0) throw Error("prepare_views: need at least one view");
  PreparedViews pv;
  pv.seed = seed;
  pv.params.push_back({});
  pv.base.push_back(image);
  pv.aggressive.push_back(image);
  pv.gar_maps.emplace_back();
  pv.refined_maps.emplace_back();
  for (std::size_t i = 1; i <= views; ++i) {
    const std::uint64_t vs = view_seed(seed, i);
    pv.params.push_back(sample_base_view(base_seed(vs)));
    pv.base.push_back(apply_base_view(image, pv.params.back()));
    pv.aggressive.push_back(aggressive_view(pv.base.back(), aggressive_seed(vs)));
    if (with_maps) {
      const ImagePass pass = target_logit(model, pv.base.back(), model.default_class_embeddings);
      pv.gar_maps.push_back(gar_rollout(pass.capture, rollout).grid);
      pv.refined_maps.push_back(refined_rollout(pass.capture, rollout).grid);
    }
  }
  return pv;
}

namespace {

std::vector<Tensor> features_of(const std::vector<Tensor>& images, const Model& model,
                                std::vector<bool>& ok) {
  std::vector<Tensor> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    try {
      out[i] = encode_image(model, images[i]);
      if (!all_finite(out[i])) throw Error("non-finite feature");
    } catch (const Error& e) {
      logger().warn("view {} excluded: {}", i, e.what());
      ok[i] = false;
    }
  }
  return out;
}

}  // namespace

InferResult run_variant(PreparedViews& pv, const Model& model, const PipelineConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = pv.base.size();
  const std::size_t size = model.config.encoder.image_size;
  InferResult r;

  std::vector<bool> ok(n, true);
  std::vector<Tensor> features;
  std::vector<Tensor> mixed;
  if (config.guided) {
    const auto& maps = config.refine ? pv.refined_maps : pv.gar_maps;
    if (maps.size() != n) throw Error("run_variant: prepared views carry no attention maps");
    const double lh = config.swap_mix_strengths ? config.m_low : config.m_high;
    const double ll = config.swap_mix_strengths ? config.m_high : config.m_low;
    mixed.push_back(pv.base[0]);
    for (std::size_t i = 1; i < n; ++i)
      mixed.push_back(mix_views(pv.base[i], pv.aggressive[i],
                                attention_masks(maps[i], size, config.ratio), lh, ll));
    features = features_of(mixed, model, ok);
  } else {
    if (pv.aggressive_features.size() != n) {
      std::vector<bool> aok(n, true);
      pv.aggressive_features = features_of(pv.aggressive, model, aok);
    }
    features = pv.aggressive_features;
    for (std::size_t i = 0; i < n; ++i) ok[i] = !features[i].empty();
  }
  const std::vector<Tensor>& views = config.guided ? mixed : pv.aggressive;

  std::vector<Tensor> probs;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (!ok[i]) {
      r.excluded.push_back(i);
      continue;
    }
    try {
      probs.push_back(predict_probs(features[i], model.default_class_embeddings, model.config.tau));
      ids.push_back(i);
    } catch (const Error& e) {
      logger().warn("view {} excluded: {}", i, e.what());
      r.excluded.push_back(i);
    }
  }
  if (probs.empty()) throw Error("atpt_infer: every view failed");

  const SelectionResult sel = select_low_entropy(probs, config.rho);
  r.entropies.assign(n, std::nan(""));
  for (std::size_t k = 0; k < ids.size(); ++k) r.entropies[ids[k]] = sel.entropies[k];
  std::vector<std::size_t> chosen = sel.selected;
  std::sort(chosen.begin(), chosen.end());

  const std::size_t fdim = features[ids[0]].size();
  Tensor selected_features({chosen.size(), fdim});
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    r.selected.push_back(ids[chosen[k]]);
    const Tensor& f = features[ids[chosen[k]]];
    std::copy(f.data().begin(), f.data().end(), selected_features.data().begin() + k * fdim);
  }

  PromptState state = PromptState::reset(model.default_prompts);
  const TuneResult tune = tune_prompts(model, state, selected_features, config.optimizer);
  r.initial_loss = tune.initial_loss;
  r.tuning_aborted = tune.aborted;
  const Tensor emb = class_embeddings(model, state.prompts);
  for (std::size_t v : r.selected) r.tuned_probs.push_back(predict_probs(features[v], emb, model.config.tau));

  if (config.tv_weight) {
    const MapVariant variant = config.variant();
    for (std::size_t k = 0; k < r.selected.size(); ++k) {
      const Tensor& x = views[r.selected[k]];
      const ImagePass pass = target_logit(model, x, emb, argmax(r.tuned_probs[k].data()));
      r.maps.push_back(rollout(pass.capture, variant, config.rollout).grid);
    }
    const EnsembleWeights ew = tv_weights(r.maps, config.tv_on_raw);
    r.tv = ew.tv;
    r.weights = ew.weights;
    r.averaged = weighted_average(r.tuned_probs, r.weights);
  } else {
    r.weights.assign(r.selected.size(), 1.0 / static_cast<double>(r.selected.size()));
    r.averaged = plain_average(r.tuned_probs);
  }
  r.prediction = argmax(r.averaged.data());
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

InferResult atpt_infer(const Tensor& image, const Model& model, const PipelineConfig& config,
                       std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  PreparedViews pv = prepare_views(image, model, config.views, seed, config.guided, config.rollout);
  InferResult r = run_variant(pv, model, config);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json to_json(const InferResult& r, const PipelineConfig& config) {
  nlohmann::json j;
  j["prediction"] = r.prediction;
  j["a_refine"] = config.refine;
  j["a_aug"] = config.guided;
  j["a_tv"] = config.tv_weight;
  j["views"] = config.views;
  nlohmann::json ent = nlohmann::json::array();
  for (double e : r.entropies) ent.push_back(std::isfinite(e) ? nlohmann::json(e) : nlohmann::json());
  j["entropies"] = ent;
  j["selected"] = r.selected;
  j["tv"] = r.tv;
  j["weights"] = r.weights;
  j["averaged"] = r.averaged.vec();
  j["excluded"] = r.excluded;
  j["initial_loss"] = r.initial_loss;
  j["tuning_aborted"] = r.tuning_aborted;
  return j;
}

}  // namespace atpt
