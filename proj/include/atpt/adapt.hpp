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
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "atpt/attribution.hpp"
#include "atpt/augment.hpp"
#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

/// -sum p log p with 0 log 0 = 0.
double entropy(std::span<const double> p);

struct SelectionResult {
  std::vector<std::size_t> selected;  // ascending entropy, ties by lower id
  std::vector<double> entropies;      // every view
  double ratio = 0.0;
};

/// max(1, ceil(ratio * views)).
std::size_t selection_size(std::size_t views, double ratio);
SelectionResult select_low_entropy(const std::vector<Tensor>& probs, double ratio);

/// Mean row entropy of an n x C probability node.
Var entropy_loss_on(Var probs);
double entropy_loss(const std::vector<Tensor>& probs);

struct OptimizerConfig {
  enum class Kind { Adam, Sgd };
  Kind kind = Kind::Adam;
  std::size_t steps = 1;
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style); ignored by Sgd.
  double weight_decay = 1e-4;
};

/// L_H of the given n x D view features as a function of the prompts.
double prompt_entropy_loss(const Model& model, const Tensor& prompts, const Tensor& features);
/// L_H and its gradient with respect to the prompts.
double prompt_entropy_grad(const Model& model, const Tensor& prompts, const Tensor& features,
                           Tensor& grad);

struct TuneResult {
  double initial_loss = 0.0;
  std::size_t steps_taken = 0;
  bool aborted = false;
};

/// Optimizer steps on L_H with only the prompts trainable. State carries the
/// Adam moments, so consecutive calls compose. A non-finite loss restores
/// the prompts held on entry.
TuneResult tune_prompts(const Model& model, PromptState& state, const Tensor& features,
                        const OptimizerConfig& config);

/// Anisotropic total variation of a grid.
double tv(const Tensor& grid);

struct EnsembleWeights {
  std::vector<double> tv;
  std::vector<double> weights;
};

/// softmax(-TV) over the maps; maps are l1-normalized first unless `raw`.
EnsembleWeights tv_weights(const std::vector<Tensor>& maps, bool raw = false);

/// sum_i w_i p_i.
Tensor weighted_average(const std::vector<Tensor>& probs, std::span<const double> weights);
/// (sum_i p_i) / n.
Tensor plain_average(const std::vector<Tensor>& probs);
std::size_t ensemble_predict(const std::vector<Tensor>& probs, std::span<const double> weights);

// ---- full pipeline ---------------------------------------------------------

struct PipelineConfig {
  std::size_t views = 64;
  double ratio = 0.2;  // mask ratio r
  double m_high = 0.8;
  double m_low = 0.2;
  bool swap_mix_strengths = false;
  bool refine = true;   // A-Refine
  bool guided = true;   // A-Aug
  bool tv_weight = true;  // A-TV
  bool tv_on_raw = false;
  RolloutOptions rollout;
  double rho = 0.1;
  OptimizerConfig optimizer;

  MapVariant variant() const { return refine ? MapVariant::Refined : MapVariant::Gar; }
  AugmentConfig augment() const;
};

/// Work shared by every ablation variant of one sample: base and aggressive
/// views plus both kinds of base-view maps under the reset prompts.
struct PreparedViews {
  std::uint64_t seed = 0;
  std::vector<BaseViewParams> params;  // [0] is the identity
  std::vector<Tensor> base, aggressive;
  std::vector<Tensor> gar_maps, refined_maps;  // [0] unused
  std::vector<Tensor> aggressive_features;     // filled lazily
};

PreparedViews prepare_views(const Tensor& image, const Model& model, std::size_t views,
                            std::uint64_t seed, bool with_maps, const RolloutOptions& rollout = {});

struct InferResult {
  std::size_t prediction = 0;
  std::vector<double> entropies;
  std::vector<std::size_t> selected;  // ascending view id
  std::vector<Tensor> tuned_probs;    // aligned with `selected`
  std::vector<double> tv;             // empty with A-TV off
  std::vector<double> weights;
  std::vector<Tensor> maps;           // selected views' maps, A-TV on only
  std::vector<std::size_t> excluded;
  Tensor averaged;
  double initial_loss = 0.0;
  bool tuning_aborted = false;
  double wall_seconds = 0.0;
};

nlohmann::json to_json(const InferResult& r, const PipelineConfig& config);

InferResult run_variant(PreparedViews& views, const Model& model, const PipelineConfig& config);
InferResult atpt_infer(const Tensor& image, const Model& model, const PipelineConfig& config,
                       std::uint64_t seed);

}  // namespace atpt
